"""Pipeline configuration: one YAML file with a section per stage.

Every section overlays dataclass defaults; unknown keys are rejected so a
typo never silently falls back to a default.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from .augment import AugmentParams


@dataclass
class SegmentationConfig:
    upper_hu: float = 1300.0
    lower_range: Tuple[float, float] = (150.0, 500.0)
    n_candidates: int = 22
    closing_diameter: int = 7


@dataclass
class RoiConfig:
    width_jump: float = 1.3
    margin_mm: float = 30.0
    prob_cutoff: float = 0.5
    min_component_mm3: float = 2.0
    posterior_fraction: float = 0.01
    rect_mm: Tuple[float, float] = (50.0, 25.0)
    rect_px: Tuple[int, int] = (100, 200)
    hu_window: Tuple[float, float] = (-200.0, 1300.0)


@dataclass
class VoxelConfig:
    base_channels: int = 8
    levels: int = 3
    learning_rate: float = 3e-3
    batch_size: int = 8
    epochs: int = 6
    pos_weight: float = 10.0
    crop: Optional[Tuple[int, int]] = (96, 128)
    negative_slice_fraction: float = 0.3


@dataclass
class RefineConfig:
    n_trees: int = 4
    max_depth: int = 12
    use_hu: bool = False
    max_voxels_per_case: int = 4000


@dataclass
class GraderConfig:
    scheme: str = "five"
    channels: Tuple[int, int, int] = (8, 16, 32)
    hidden: int = 128
    learning_rate: float = 3e-3
    momentum: float = 0.9
    batch_size: int = 16
    max_epochs: int = 10


@dataclass
class CaseConfig:
    n_trees: int = 500
    max_depth: int = 4
    n_aug: int = 20
    loop_n_aug: int = 2            # augmentation rounds inside the alternating loop
    suspicious_ratio: float = 0.30
    ensemble_folds: int = 6
    embed_rows: int = 40


@dataclass
class ThresholdConfig:
    tau: float = 0.42
    alpha: float = 0.14
    beta: float = 0.0


@dataclass
class SplitConfig:
    fractions: Tuple[float, float, float] = (0.75, 0.12, 0.13)
    train: Optional[list] = None
    val: Optional[list] = None
    test: Optional[list] = None


def _aug_default(kind):
    return field(default_factory=lambda: asdict(getattr(AugmentParams, kind)()))


@dataclass
class Config:
    seed: int = 0
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    grader: GraderConfig = field(default_factory=GraderConfig)
    case: CaseConfig = field(default_factory=CaseConfig)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    roi_augment: dict = _aug_default("roi")
    slice_augment: dict = _aug_default("slice")

    def augment(self, kind: str) -> AugmentParams:
        d = self.roi_augment if kind == "roi" else self.slice_augment
        return AugmentParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return asdict(self)


def _tuplify(value, template):
    if isinstance(template, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _overlay(obj, data: Dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ValueError(f"section '{where}' must be a mapping")
    names = {f.name: f for f in fields(obj)}
    updates = {}
    for key, value in data.items():
        if key not in names:
            raise ValueError(f"unknown key '{where}.{key}'" if where else f"unknown key '{key}'")
        cur = getattr(obj, key)
        if is_dataclass(cur):
            updates[key] = _overlay(cur, value, f"{where}.{key}" if where else key)
        elif isinstance(cur, dict) and key.endswith("_augment"):
            unknown = set(value) - set(cur)
            if unknown:
                raise ValueError(f"unknown augmentation keys {sorted(unknown)}")
            updates[key] = {**cur, **{k: _tuplify(v, cur[k]) for k, v in value.items()}}
        else:
            updates[key] = _tuplify(value, cur)
    return replace(obj, **updates)


def config_from_dict(data: Optional[dict]) -> Config:
    cfg = _overlay(Config(), data or {}, "")
    cfg.augment("roi"), cfg.augment("slice")  # validates both ranges
    if sum(cfg.split.fractions) <= 0:
        raise ValueError("split fractions must be positive")
    return cfg


def load_config(path=None, seed: Optional[int] = None) -> Config:
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
    cfg = config_from_dict(data)
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    return cfg


def dump_config(cfg: Config) -> str:
    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v

    return yaml.safe_dump(plain(cfg.to_dict()), sort_keys=True)


def thread_count() -> int:
    """Worker threads from SIJGRADE_THREADS (default 1)."""
    raw = os.environ.get("SIJGRADE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SIJGRADE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)
