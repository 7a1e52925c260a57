"""Shared on-disk pipeline fixtures for CLI and service tests."""

from __future__ import annotations

from pathlib import Path

from splitscene.scene import save_frames, save_scene
from splitscene.synth import OccluderArc, SynthSpec, generate


def walled_pair_spec(seed=3):
    """Two blobs; a wall ring with two gaps hides instance 1 from the
    30-degree completion ring while the steep capture ring sees over it.
    Instance 2 sits far enough out that its own viewpoint ring clears the
    wall entirely (it completes as fully observed)."""
    return SynthSpec(
        n_instances=2, n_views=8, seed=seed, elevation_deg=62, image_size=96,
        centers=[(0.0, 0.0, 0.0), (5.0, 0.0, 0.0)],
        occluders=[OccluderArc(center=(0.0, 0.0), radius=1.6,
                               z_range=(-0.2, 1.4), spacing=0.15, scale=0.14,
                               gaps_deg=((-33.0, 33.0), (147.0, 213.0)))])


def write_pipeline_fixture(root: Path, spec: SynthSpec, config_lines=()) -> Path:
    """Materialize scene + cameras + masks + config.toml; returns config path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    res = generate(spec)
    save_scene(res.scene, root / "scene.spl2")
    save_frames(res.scene.frames, root / "cameras.json", root / "masks")
    lines = [
        "seed = 7",
        "",
        "[paths]",
        'scene = "scene.spl2"',
        'cameras = "cameras.json"',
        'masks = "masks"',
        'output = "out"',
    ] + list(config_lines)
    cfg_path = root / "config.toml"
    cfg_path.write_text("\n".join(lines) + "\n")
    return cfg_path
