"""HTTP facade for the interactive picker.

Endpoints: GET /render (orbit-camera PNG), POST /select (click to
instance), GET /instances, POST /instances/{id}/complete (async job),
GET /jobs/{id}, GET /splat/{id}. GET handlers never mutate state; the
one mutating job kind (complete) is serialized by a per-scene lock.
"""

from __future__ import annotations

import base64
import hashlib
import io
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI
from fastapi.responses import FileResponse, JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .cli import _read_instances
from .completion import (ViewObservation, build_viewpoint_plan, joint_refine,
                         mock_target_latents, run_completion)
from .config import PipelineConfig
from .denoiser import MockTargetDenoiser, SubprocessDenoiser
from .features import FeatureFieldError, query_click, segment_instance
from .rasterizer import render
from .scene import (SceneError, SplatScene, load_frames, load_scene, look_at_camera,
                    save_scene, scene_bytes)


@dataclass
class Job:
    id: str
    instance_id: int
    status: str = "queued"            # queued | running | done | failed
    result: dict | None = None
    error: str | None = None


@dataclass
class SessionState:
    scene: SplatScene
    instances: list
    config: PipelineConfig
    jobs: dict[str, Job] = field(default_factory=dict)
    job_counter: int = 0
    mutating: threading.Lock = field(default_factory=threading.Lock)
    table_lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def trained(self) -> bool:
        return bool(self.instances) and all(
            rec.mean_feature is not None for rec in self.instances)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.scene.features.tobytes())
        h.update(self.scene.centers.tobytes())
        for rec in self.instances:
            h.update(str((rec.id, rec.gaussians.tolist())).encode())
            if rec.mean_feature is not None:
                h.update(np.asarray(rec.mean_feature).tobytes())
        return h.hexdigest()


def build_session(cfg: PipelineConfig) -> SessionState:
    trained_path = cfg.output / "scene_trained.spl2"
    scene = load_scene(trained_path if trained_path.exists() else cfg.scene)
    scene.frames = load_frames(cfg.cameras, cfg.masks)
    scene.validate()
    instances = []
    if (cfg.output / "instances.json").exists():
        instances = _read_instances(cfg, "serve")
    return SessionState(scene=scene, instances=instances, config=cfg)


def orbit_camera(scene: SplatScene, yaw_deg: float, pitch_deg: float,
                 radius: float | None, width: int, height: int):
    centroid = scene.centroid()
    if radius is None or radius <= 0:
        radius = 2.5 * max(scene.scene_scale, 1e-6)
    yaw = math.radians(yaw_deg)
    pitch = math.radians(max(-89.0, min(89.0, pitch_deg)))
    pos = centroid + radius * np.array([math.cos(pitch) * math.cos(yaw),
                                        math.cos(pitch) * math.sin(yaw),
                                        math.sin(pitch)])
    f = (max(width, height) / 2.0) / math.tan(math.radians(25.0))
    return look_at_camera(pos, centroid, f, f, width, height)


def _png_bytes(img: np.ndarray) -> bytes:
    arr = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def _mask_png_base64(mask: np.ndarray) -> str:
    arr = (mask.astype(np.uint8) * 255)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _run_complete_job(state: SessionState, job: Job, out_dir: Path) -> None:
    cfg = state.config
    try:
        rec = next(r for r in state.instances if r.id == job.instance_id)
        selected = segment_instance(state.scene, rec, cfg.training.tau_seg)
        plan = build_viewpoint_plan(selected, state.scene, cfg.completion)
        if not plan.targets:
            job.result = {"skipped": True, "generated": [],
                          "conditions": plan.conditions, "targets": []}
            job.status = "done"
            return
        schedule = cfg.completion.schedule()
        latents = mock_target_latents(selected, state.scene, plan, cfg.completion)
        if cfg.denoiser_command:
            denoiser = SubprocessDenoiser(cfg.denoiser_command, schedule, latents)
        else:
            denoiser = MockTargetDenoiser(latents, schedule)
        try:
            result = run_completion(selected, state.scene, denoiser, schedule,
                                    plan, rec.mean_feature, cfg.completion)
        finally:
            denoiser.close()
        sources = [ViewObservation(cv.camera, cv.image) for cv in result.conditions]
        generated = [ViewObservation(plan.poses[n], result.images[n])
                     for n in result.target_indices]
        refined = joint_refine(state.scene.subset(selected), sources, generated,
                               cfg.refine)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_scene(refined.scene, out_dir / "refined.spl2")
        job.result = {
            "skipped": False,
            "conditions": plan.conditions,
            "targets": plan.targets,
            "generated": ["data:image/png;base64," +
                          base64.b64encode(_png_bytes(result.images[n])).decode()
                          for n in result.target_indices],
            "refined_splat_url": f"/splat/{job.instance_id}",
        }
        job.status = "done"
    except Exception as e:                      # job isolation: report, don't crash
        job.status = "failed"
        job.error = str(e)
    finally:
        state.mutating.release()


def make_app(state: SessionState, cfg: PipelineConfig,
             frontend_dir: Path | None = None) -> FastAPI:
    app = FastAPI(title="splitscene decompose service")

    @app.get("/render")
    def get_render(yaw: float = 0.0, pitch: float = 30.0, radius: float = 0.0,
                   w: int | None = None, h: int | None = None):
        width = cfg.render_width if w is None else w
        height = cfg.render_height if h is None else h
        if width <= 0 or height <= 0 or width > 2048 or height > 2048:
            return JSONResponse({"error": "bad image size"}, status_code=400)
        cam = orbit_camera(state.scene, yaw, pitch, radius or None, width, height)
        out = render(state.scene, cam)
        white = np.clip(out.color, 0, 1) + (1.0 - out.alpha[..., None])
        return Response(content=_png_bytes(white), media_type="image/png")

    @app.post("/select")
    def post_select(body: dict):
        if not state.trained:
            return JSONResponse({"error": "features untrained, run fit"}, status_code=409)
        try:
            yaw = float(body.get("yaw", 0.0))
            pitch = float(body.get("pitch", 30.0))
            radius = float(body.get("radius", 0.0)) or None
            x = int(body["x"])
            y = int(body["y"])
            width = int(body.get("w", cfg.render_width))
            height = int(body.get("h", cfg.render_height))
        except (KeyError, TypeError, ValueError):
            return JSONResponse({"error": "bad select body"}, status_code=400)
        if not (0 <= x < width and 0 <= y < height):
            return JSONResponse({"error": "pixel out of bounds"}, status_code=400)
        cam = orbit_camera(state.scene, yaw, pitch, radius, width, height)
        hit = query_click(state.scene, cam, (x, y), state.instances,
                          cfg.training.tau_seg)
        return {
            "instance_id": hit.instance_id,
            "gaussian_count": int(hit.gaussians.size),
            "mask_png_base64": _mask_png_base64(hit.mask),
        }

    @app.get("/instances")
    def get_instances():
        return {"instances": [
            {"id": rec.id, "gaussian_count": int(rec.gaussians.size),
             "frames": len(rec.masks), "trained": rec.mean_feature is not None}
            for rec in state.instances]}

    @app.post("/instances/{instance_id}/complete")
    def post_complete(instance_id: int):
        if not any(r.id == instance_id for r in state.instances):
            return JSONResponse({"error": f"unknown instance {instance_id}"},
                                status_code=404)
        if not state.trained:
            return JSONResponse({"error": "features untrained, run fit"}, status_code=409)
        if not state.mutating.acquire(blocking=False):
            return JSONResponse({"error": "another mutating job is running"},
                                status_code=409)
        with state.table_lock:
            state.job_counter += 1
            job = Job(id=f"job-{state.job_counter}", instance_id=instance_id)
            state.jobs[job.id] = job
        out_dir = cfg.output / f"complete_{instance_id:03d}"
        job.status = "running"
        thread = threading.Thread(target=_run_complete_job, args=(state, job, out_dir),
                                  daemon=True)
        thread.start()
        return {"job_id": job.id}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            return JSONResponse({"error": f"unknown job {job_id}"}, status_code=404)
        body = {"id": job.id, "instance_id": job.instance_id, "status": job.status}
        if job.status == "done":
            body["result"] = job.result
        if job.status == "failed":
            body["error"] = job.error
        return body

    @app.get("/splat/{instance_id}")
    def get_splat(instance_id: int):
        refined = cfg.output / f"complete_{instance_id:03d}" / "refined.spl2"
        if refined.exists():
            return FileResponse(refined, media_type="application/octet-stream",
                                filename=f"instance_{instance_id:03d}.spl2")
        rec = next((r for r in state.instances if r.id == instance_id), None)
        if rec is None:
            return JSONResponse({"error": f"unknown instance {instance_id}"},
                                status_code=404)
        if rec.mean_feature is None:
            return JSONResponse({"error": "features untrained, run fit"}, status_code=409)
        try:
            selected = segment_instance(state.scene, rec, cfg.training.tau_seg)
        except (SceneError, FeatureFieldError) as e:
            return JSONResponse({"error": str(e)}, status_code=409)
        return Response(content=scene_bytes(state.scene.subset(selected)),
                        media_type="application/octet-stream")

    if frontend_dir and Path(frontend_dir).exists():
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")

    return app
