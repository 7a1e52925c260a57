"""Pipeline configuration: one TOML file, CLI overrides, stable defaults."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .clustering import ClusteringConfig
from .completion import CompletionConfig, RefineConfig
from .features import TrainingConfig


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    scene: Path = Path("scene.spl2")
    cameras: Path = Path("cameras.json")
    masks: Path = Path("masks")
    output: Path = Path("out")
    seed: int = 42
    denoiser_command: list[str] | None = None        # None = in-process mock
    port: int = 7878
    render_width: int = 512
    render_height: int = 384
    training: TrainingConfig = field(default_factory=TrainingConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    source_path: Path | None = None                  # the config file, for provenance

    def validate_inputs(self) -> None:
        for name, p in (("scene", self.scene), ("cameras", self.cameras),
                        ("masks", self.masks)):
            if not Path(p).exists():
                raise ConfigError(f"{name} path does not exist: {p}")

    def apply_seed(self) -> None:
        """One seed drives every stage unless a section pinned its own."""
        self.training.seed = self.seed
        self.completion.seed = self.seed


def _fill(section: dict, target) -> None:
    known = {f.name for f in fields(target)}
    for key, value in section.items():
        if key not in known:
            raise ConfigError(f"unknown option {key!r} for {type(target).__name__}")
        current = getattr(target, key)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(target, key, type(current)(value) if current is not None else value)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file does not exist: {path}")
        doc = tomllib.loads(path.read_text())
        base = path.parent
        paths = doc.pop("paths", {})
        for key in ("scene", "cameras", "masks", "output"):
            if key in paths:
                setattr(cfg, key, base / paths.pop(key))
        if paths:
            raise ConfigError(f"unknown [paths] keys: {sorted(paths)}")
        for section, target in (("training", cfg.training),
                                ("clustering", cfg.clustering),
                                ("completion", cfg.completion),
                                ("refine", cfg.refine)):
            _fill(doc.pop(section, {}), target)
        if "seed" in doc:
            cfg.seed = int(doc.pop("seed"))
        if "denoiser_command" in doc:
            value = doc.pop("denoiser_command")
            cfg.denoiser_command = [str(v) for v in value] if value else None
        for key in ("port", "render_width", "render_height"):
            if key in doc:
                setattr(cfg, key, int(doc.pop(key)))
        if doc:
            raise ConfigError(f"unknown config keys: {sorted(doc)}")
        cfg.source_path = path
    if overrides:
        for key, value in overrides.items():
            if value is None:
                continue
            setattr(cfg, key, value)
    cfg.apply_seed()
    return cfg
