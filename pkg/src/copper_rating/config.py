"""Run configuration: generator, training and ladder settings in one document.

The on-disk format is YAML with three sections (``generator``, ``train``,
``ladder``) plus top-level ``seed`` and ``deterministic``. Every artifact the
CLI writes embeds :func:`config_digest` of the effective configuration.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .ladder import DEFAULT_THRESHOLDS
from .scene_sim.materials import DEFAULT_PALETTE, MaterialSpec, check_palette


@dataclass
class GeneratorConfig:
    image_size: tuple[int, int] = (128, 128)
    n_stirs: int = 16
    purity_range: tuple[float, float] = (0.70, 1.0)
    granule_radius: tuple[float, float] = (4.0, 9.0)
    vertices: tuple[int, int] = (5, 10)
    # total footprint area of a sample / frame area
    coverage: float = 3.0
    # Dirichlet concentration of the per-sample impurity mix
    composition_concentration: float = 400.0
    pixel_size_cm: float = 0.025
    thickness_cm: float = 0.1
    color_noise: float = 4.0
    shading: float = 0.08
    palette: tuple[MaterialSpec, ...] = DEFAULT_PALETTE

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.purity_range = tuple(float(v) for v in self.purity_range)
        self.granule_radius = tuple(float(v) for v in self.granule_radius)
        self.vertices = tuple(int(v) for v in self.vertices)
        self.palette = check_palette(
            [m if isinstance(m, MaterialSpec) else MaterialSpec.from_dict(m) for m in self.palette]
        )
        lo, hi = self.purity_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"purity_range must lie in (0, 1], got {self.purity_range}")
        if self.n_stirs < 1:
            raise ValueError("n_stirs must be >= 1")
        if self.coverage <= 0 or self.thickness_cm <= 0 or self.pixel_size_cm <= 0:
            raise ValueError("coverage, thickness_cm and pixel_size_cm must be positive")
        if not (3 <= self.vertices[0] <= self.vertices[1]):
            raise ValueError(f"invalid vertex range {self.vertices}")
        if not (0 < self.granule_radius[0] <= self.granule_radius[1]):
            raise ValueError(f"invalid radius range {self.granule_radius}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["palette"] = [m.to_dict() for m in self.palette]
        return _jsonable(d)


@dataclass
class TrainConfig:
    # phase 1: segmentation
    seg_epochs: int = 20
    seg_batch_size: int = 8
    seg_lr: float = 1e-2
    seg_momentum: float = 0.9
    seg_weight_decay: float = 1e-4
    seg_width: int = 16
    cutpaste: bool = True
    cutpaste_k: tuple[int, int] = (1, 4)
    cutpaste_prob: float = 0.5
    min_patch_area: int = 16
    standard_ops: tuple[str, ...] = ("flip", "rotate", "translate")
    # phase 2: area branch
    area_epochs: int = 20
    area_lr: float = 1e-3
    # phase 3: mass + rank branches
    mass_epochs: int = 30
    mass_lr: float = 3e-3
    purity_batch_size: int = 8
    alpha: float = 0.5
    gamma: float = 2.0
    # learning-rate multiplier for the convolutional correction paths of the mass and rank branches
    correction_lr_scale: float = 0.1
    teacher_forcing: bool = False
    fuse_seg_features: bool = False
    # divergence: loss > factor * initial for `patience` consecutive epochs
    divergence_factor: float = 10.0
    divergence_patience: int = 3

    def __post_init__(self):
        self.cutpaste_k = tuple(int(v) for v in self.cutpaste_k)
        self.standard_ops = tuple(self.standard_ops)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        for op in self.standard_ops:
            if op not in ("flip", "rotate", "translate"):
                raise ValueError(f"unknown augmentation op {op!r}")

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))


@dataclass
class LadderConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    sweep_levels: tuple[int, ...] = tuple(range(2, 11))

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        self.sweep_levels = tuple(int(v) for v in self.sweep_levels)

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ladder: LadderConfig = field(default_factory=LadderConfig)
    seed: int = 0
    deterministic: bool = True
    num_samples: int = 66
    group_size: int = 6
    split_groups: tuple[int, int, int] = (8, 2, 1)

    def __post_init__(self):
        self.split_groups = tuple(int(v) for v in self.split_groups)

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "train": self.train.to_dict(),
            "ladder": self.ladder.to_dict(),
            "seed": self.seed,
            "deterministic": self.deterministic,
            "num_samples": self.num_samples,
            "group_size": self.group_size,
            "split_groups": list(self.split_groups),
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            generator=_build(GeneratorConfig, d.pop("generator", {})),
            train=_build(TrainConfig, d.pop("train", {})),
            ladder=_build(LadderConfig, d.pop("ladder", {})),
            **d,
        )

    def digest(self) -> str:
        return config_digest(self.to_dict())


def _build(cls, d):
    d = dict(d or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_digest(d: dict) -> str:
    blob = json.dumps(_jsonable(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        return RunConfig.from_dict(yaml.safe_load(f))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides; values are parsed as YAML scalars."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ValueError(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return RunConfig.from_dict(d)
