"""Command-line front door: cluster, fit, extract, complete, serve.

Every command is deterministic for a fixed config + seed and idempotent
on identical inputs. Exit codes are stable API: 0 ok, 2 input error,
3 training failure, 4 unknown lookup, 5 backend failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import clustering
from .completion import (ViewObservation, build_viewpoint_plan, joint_refine,
                         mock_target_latents, run_completion)
from .config import ConfigError, PipelineConfig, load_config
from .denoiser import DenoiserError, MockTargetDenoiser, SubprocessDenoiser
from .features import FeatureFieldError, segment_instance, train
from .rasterizer import write_color_png
from .scene import SceneError, load_frames, load_scene, save_scene

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_TRAINING = 3
EXIT_LOOKUP = 4
EXIT_BACKEND = 5


class StageError(Exception):
    def __init__(self, stage: str, message: str, code: int):
        super().__init__(f"[{stage}] {message}")
        self.code = code


def _load_scene_with_frames(cfg: PipelineConfig, stage: str, trained: bool = False):
    scene_path = cfg.output / "scene_trained.spl2" if trained else cfg.scene
    if trained and not scene_path.exists():
        raise StageError(stage, f"trained container missing: {scene_path} (run fit first)",
                         EXIT_INPUT)
    try:
        cfg.validate_inputs()
        scene = load_scene(scene_path)
        scene.frames = load_frames(cfg.cameras, cfg.masks)
        scene.validate()
    except (ConfigError, SceneError, FileNotFoundError, OSError) as e:
        raise StageError(stage, str(e), EXIT_INPUT) from e
    return scene


def _snapshot_config(cfg: PipelineConfig) -> None:
    cfg.output.mkdir(parents=True, exist_ok=True)
    if cfg.source_path is not None:
        shutil.copyfile(cfg.source_path, cfg.output / "config.toml")


def _write_instances_json(path: Path, records) -> None:
    doc = {"instances": [
        {"id": rec.id,
         "frames": [{"frame": f, "mask": m} for f, m in rec.masks],
         "gaussian_count": int(rec.gaussians.size),
         "mean_feature": (None if rec.mean_feature is None
                          else [float(v) for v in rec.mean_feature])}
        for rec in records]}
    path.write_text(json.dumps(doc, indent=1))


def _read_instances(cfg: PipelineConfig, stage: str):
    path = cfg.output / "instances.json"
    if not path.exists():
        raise StageError(stage, f"instances artifact missing: {path} (run cluster first)",
                         EXIT_INPUT)
    doc = json.loads(path.read_text())
    records = []
    for entry in doc["instances"]:
        bin_path = cfg.output / f"instance_{entry['id']:03d}.bin"
        gaussians = np.frombuffer(bin_path.read_bytes(), dtype="<u8").astype(np.int64)
        mean = entry.get("mean_feature")
        records.append(clustering.InstanceRecord(
            id=int(entry["id"]),
            gaussians=gaussians,
            masks=[(e["frame"], e["mask"]) for e in entry["frames"]],
            mean_feature=None if mean is None else np.asarray(mean, dtype=np.float64)))
    return records


def cmd_cluster(cfg: PipelineConfig) -> int:
    scene = _load_scene_with_frames(cfg, "cluster")
    _snapshot_config(cfg)
    try:
        records = clustering.build_instances(scene, cfg.clustering)
    except SceneError as e:
        raise StageError("cluster", str(e), EXIT_INPUT) from e
    _write_instances_json(cfg.output / "instances.json", records)
    for rec in records:
        (cfg.output / f"instance_{rec.id:03d}.bin").write_bytes(
            rec.gaussians.astype("<u8").tobytes())
    print(f"{len(records)} instances")
    return EXIT_OK


def cmd_fit(cfg: PipelineConfig) -> int:
    scene = _load_scene_with_frames(cfg, "fit")
    records = _read_instances(cfg, "fit")
    _snapshot_config(cfg)
    try:
        result = train(scene, records, cfg.training)
    except FeatureFieldError as e:
        raise StageError("fit", str(e), EXIT_TRAINING) from e
    save_scene(scene, cfg.output / "scene_trained.spl2")
    _write_instances_json(cfg.output / "instances.json", records)
    with open(cfg.output / "training.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "total", "single_view", "cross_view", "masks_3d"])
        writer.writerows(result.log_rows)
    if result.single_instance:
        print("single-instance scene: features left untouched")
    else:
        final = result.log_rows[-1][1] if result.log_rows else float("nan")
        print(f"trained {cfg.training.iters} iterations, final loss {final:.6f}")
    return EXIT_OK


def _instance_by_id(records, instance_id: int, stage: str):
    for rec in records:
        if rec.id == instance_id:
            return rec
    raise StageError(stage, f"unknown instance id {instance_id}", EXIT_LOOKUP)


def cmd_extract(cfg: PipelineConfig, instance_id: int) -> int:
    scene = _load_scene_with_frames(cfg, "extract", trained=True)
    records = _read_instances(cfg, "extract")
    rec = _instance_by_id(records, instance_id, "extract")
    if rec.mean_feature is None:
        raise StageError("extract", f"instance {instance_id} has no mean feature (run fit)",
                         EXIT_INPUT)
    try:
        selected = segment_instance(scene, rec, cfg.training.tau_seg)
    except FeatureFieldError as e:
        raise StageError("extract", str(e), EXIT_INPUT) from e
    remainder = np.setdiff1d(np.arange(scene.n_gaussians), selected)
    save_scene(scene.subset(selected), cfg.output / f"instance_{instance_id:03d}.spl2")
    if remainder.size:
        save_scene(scene.subset(remainder), cfg.output / f"remainder_{instance_id:03d}.spl2")
    print(f"instance {instance_id}: {selected.size} gaussians extracted, "
          f"{remainder.size} remain")
    return EXIT_OK


def _plan_to_json(plan) -> dict:
    def cam(c):
        return {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "width": c.width, "height": c.height,
                "R": [float(v) for v in c.rotation.reshape(9)],
                "t": [float(v) for v in c.translation]}
    return {
        "poses": [cam(p) for p in plan.poses],
        "occlusion": [float(v) for v in plan.occlusion],
        "conditions": plan.conditions,
        "targets": plan.targets,
    }


def cmd_complete(cfg: PipelineConfig, instance_id: int) -> int:
    scene = _load_scene_with_frames(cfg, "complete", trained=True)
    records = _read_instances(cfg, "complete")
    rec = _instance_by_id(records, instance_id, "complete")
    if rec.mean_feature is None:
        raise StageError("complete", f"instance {instance_id} has no mean feature (run fit)",
                         EXIT_INPUT)
    _snapshot_config(cfg)
    out_dir = cfg.output / f"complete_{instance_id:03d}"
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        selected = segment_instance(scene, rec, cfg.training.tau_seg)
    except FeatureFieldError as e:
        raise StageError("complete", str(e), EXIT_INPUT) from e
    comp_cfg = cfg.completion
    plan = build_viewpoint_plan(selected, scene, comp_cfg)
    (out_dir / "plan.json").write_text(json.dumps(_plan_to_json(plan), indent=1))

    if not plan.targets:
        print("completion skipped: instance fully observed from all 16 viewpoints")
        return EXIT_OK

    schedule = comp_cfg.schedule()
    latents = mock_target_latents(selected, scene, plan, comp_cfg)
    if cfg.denoiser_command:
        try:
            denoiser = SubprocessDenoiser(cfg.denoiser_command, schedule, latents)
        except DenoiserError as e:
            raise StageError("complete", str(e), EXIT_BACKEND) from e
    else:
        denoiser = MockTargetDenoiser(latents, schedule)

    try:
        result = run_completion(selected, scene, denoiser, schedule, plan,
                                rec.mean_feature, comp_cfg)
    except (SceneError, DenoiserError) as e:
        raise StageError("complete", str(e), EXIT_BACKEND) from e
    finally:
        denoiser.close()

    for cv in result.conditions:
        write_color_png(cv.image, out_dir / f"condition_{cv.index:02d}.png")
    for n, img in result.images.items():
        write_color_png(img, out_dir / f"generated_{n:02d}.png")

    sources = [ViewObservation(cv.camera, cv.image) for cv in result.conditions]
    generated = [ViewObservation(plan.poses[n], result.images[n])
                 for n in result.target_indices]
    refined = joint_refine(scene.subset(selected), sources, generated, cfg.refine)
    save_scene(refined.scene, out_dir / "refined.spl2")
    if refined.diverged:
        print("warning: refinement diverged, refined.spl2 holds the unrefined instance")
    print(f"completed instance {instance_id}: {len(plan.conditions)} conditions, "
          f"{len(plan.targets)} generated views")
    return EXIT_OK


def cmd_serve(cfg: PipelineConfig, host: str, port: int | None) -> int:
    import uvicorn

    from .service import build_session, make_app

    try:
        session = build_session(cfg)
    except (SceneError, StageError, ConfigError, FileNotFoundError) as e:
        raise StageError("serve", str(e), EXIT_INPUT) from e
    frontend = Path("frontend/dist")
    app = make_app(session, cfg, frontend_dir=frontend if frontend.exists() else None)
    uvicorn.run(app, host=host, port=port or cfg.port, log_level="warning")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="splitscene",
        description="Instance decomposition and completion for 2D Gaussian splat scenes")
    parser.add_argument("--config", type=Path, help="TOML config file")
    parser.add_argument("--seed", type=int, help="override the pipeline seed")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("cluster", help="build instances from masks")
    sub.add_parser("fit", help="train the instance feature field")
    p_extract = sub.add_parser("extract", help="write one instance's splat container")
    p_extract.add_argument("--instance", type=int, required=True)
    p_complete = sub.add_parser("complete", help="generate unseen views and refine")
    p_complete.add_argument("--instance", type=int, required=True)
    p_serve = sub.add_parser("serve", help="run the interactive HTTP service")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=None)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, overrides={"seed": args.seed})
    except ConfigError as e:
        print(f"[config] {e}", file=sys.stderr)
        return EXIT_INPUT

    try:
        if args.command == "cluster":
            return cmd_cluster(cfg)
        if args.command == "fit":
            return cmd_fit(cfg)
        if args.command == "extract":
            return cmd_extract(cfg, args.instance)
        if args.command == "complete":
            return cmd_complete(cfg, args.instance)
        if args.command == "serve":
            return cmd_serve(cfg, args.host, args.port)
    except StageError as e:
        print(str(e), file=sys.stderr)
        return e.code
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
