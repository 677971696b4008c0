"""Key-value text configuration.

One ``key = value`` per line; ``#`` starts a comment. Tuples are written as
comma-separated values (``object_count = 3, 7``), booleans as true/false.
Unknown keys are an error so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from pathlib import Path

CATEGORIES = ("box-crate", "cylinder-bin", "table", "chair", "L-sofa", "wall-display")


class ConfigError(ValueError):
    pass


def _coerce(tp, raw: str, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], p, key) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} values, got {len(parts)}")
        return tuple(_coerce(a, p, key) for a, p in zip(args, parts))
    try:
        if tp is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def parse_kv(text: str, cls):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(hints[key], raw, key)
    return cls(**values)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_kv(obj) -> str:
    return "".join(f"{f.name} = {_fmt(getattr(obj, f.name))}\n" for f in fields(obj))


def load_kv(path, cls):
    return parse_kv(Path(path).read_text(), cls)


def as_dict(obj) -> dict:
    return dataclasses.asdict(obj)


@dataclass(frozen=True)
class SceneSpec:
    rng_seed: int = 0
    room_width: tuple[float, float] = (4.5, 6.5)
    room_depth: tuple[float, float] = (4.5, 6.5)
    wall_height: tuple[float, float] = (2.4, 3.0)
    l_shape_prob: float = 0.3
    object_count: tuple[int, int] = (3, 6)
    categories: tuple[str, ...] = CATEGORIES
    clearance: float = 0.3
    wall_margin: float = 0.3
    points_per_m2: float = 110.0
    noise_sigma: float = 0.005
    bottom_cull: bool = True
    occlusion_sectors: int = 1
    sector_deg: float = 30.0

    def __post_init__(self):
        if self.clearance < 0 or self.wall_margin < 0:
            raise ConfigError("clearance and wall_margin must be non-negative")
        for name in ("room_width", "room_depth", "wall_height", "object_count"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: empty range {lo}..{hi}")
        if not self.categories or any(c not in CATEGORIES for c in self.categories):
            raise ConfigError(f"categories must be drawn from {CATEGORIES}")


@dataclass(frozen=True)
class Config:
    """Every tunable of the detector, shape predictor and training schedule."""

    seed: int = 0
    # backbone
    min_scan_points: int = 1024
    sa1_centroids: int = 512
    sa1_radius: float = 0.2
    sa1_nsample: int = 16
    sa1_hidden: int = 64
    sa2_centroids: int = 128
    sa2_radius: float = 0.4
    sa2_nsample: int = 8
    feature_dim: int = 128
    hidden_activation: str = "relu"
    # proposals
    obj_candidates: int = 64
    wall_candidates: int = 16
    cluster_radius: float = 0.3
    cluster_nsample: int = 16
    # anchors
    num_anchors: int = 18
    anchor_gt_samples: int = 512
    sample_iterations: int = 2
    radius_floor: float = 0.02
    # heads
    heading_bins: int = 12
    pos_dist: float = 0.3
    neg_dist: float = 0.6
    wall_pos_dist: float = 0.5
    wall_neg_dist: float = 1.0
    fusion_init: float = 0.5
    use_anchor: bool = True
    use_wall_attention: bool = True
    # shape
    shape_dim: int = 256
    shape_hidden: int = 128
    occ_queries: int = 2048
    occ_batch_queries: int = 256
    prior_points: int = 256
    mesh_resolution: int = 32
    iso: float = 0.5
    # scene assembly
    objectness_threshold: float = 0.5
    nms_iou: float = 0.25
    wall_objectness_threshold: float = 0.5
    merge_angle_deg: float = 15.0
    merge_dist: float = 0.3
    # training
    batch: int = 8
    lr: float = 1e-3
    epochs: int = 60
    shape_batch: int = 32
    shape_lr: float = 1e-4
    shape_epochs: int = 100
    pretrain_epochs: int = 120
    pretrain_lr: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    plateau_threshold: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # evaluation
    eval_iou: float = 0.25
    cd_thresholds: tuple[float, ...] = (0.1, 0.047)
    cd_samples: int = 2048
    layout_dist: float = 0.3

    @property
    def num_classes(self) -> int:
        return len(CATEGORIES)
