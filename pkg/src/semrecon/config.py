"""Pipeline configuration: sectioned TOML file plus command-line overrides."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .segment2d import SegmentParams
from .semmap import MapParams

FEATURE_PROVIDERS = ("class-probability", "file")


class ConfigError(ValueError):
    """Invalid setting; ``field`` is the dotted path, e.g. ``semmap.t_iou``."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass
class DatasetSection:
    path: Optional[str] = None
    depth_scale: Optional[float] = None
    pose_tolerance: float = 0.02
    keyframe_stride: int = 10


@dataclass
class SegmentSection:
    edge_angle_deg: float = 20.0
    depth_gap_rel: float = 0.04
    min_area: int = 200


@dataclass
class SemmapSection:
    t_iou: float = 0.4
    t_p1: float = 0.9
    t_p2: float = 0.7
    delta_up: float = 0.05
    delta_down: float = 0.05
    max_support: int = 512
    occlusion_tol: float = 0.1


@dataclass
class FusionSection:
    voxel_size: float = 0.05
    truncation: Optional[float] = None
    w_max: float = 128.0


@dataclass
class SemanticSection:
    propagation: bool = True
    eps_occ: Optional[float] = None  # default 1.5 x voxel size
    feature_provider: str = "class-probability"
    feature_dir: Optional[str] = None
    feature_level: int = 1
    num_classes: int = 41
    fallback_radius: int = 1
    gt_max_dist: Optional[float] = None  # default 2 x voxel size


@dataclass
class RunSection:
    out: Optional[str] = None
    seed: int = 0
    threads: int = 1
    brute_force_oracles: bool = False


@dataclass
class PipelineConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    segment: SegmentSection = field(default_factory=SegmentSection)
    semmap: SemmapSection = field(default_factory=SemmapSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    semantic: SemanticSection = field(default_factory=SemanticSection)
    run: RunSection = field(default_factory=RunSection)

    # derived values ---------------------------------------------------------
    @property
    def eps_occ(self) -> float:
        e = self.semantic.eps_occ
        return 1.5 * self.fusion.voxel_size if e is None else e

    @property
    def gt_max_dist(self) -> float:
        d = self.semantic.gt_max_dist
        return 2.0 * self.fusion.voxel_size if d is None else d

    def map_params(self) -> MapParams:
        return MapParams(**asdict(self.semmap))

    def segment_params(self) -> SegmentParams:
        return SegmentParams(**asdict(self.segment))

    # serialisation ----------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        cfg = cls()
        for name, section in d.items():
            if not hasattr(cfg, name) or name.startswith("_"):
                raise ConfigError(name, "unknown section")
            if not isinstance(section, dict):
                raise ConfigError(name, "expected a table of settings")
            target = getattr(cfg, name)
            known = {f.name: f for f in fields(target)}
            for key, value in section.items():
                if key not in known:
                    raise ConfigError(f"{name}.{key}", "unknown setting")
                setattr(target, key, _coerce(f"{name}.{key}", known[key], value))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(str(path), f"TOML syntax error: {exc}") from None
        return cls.from_dict(data)

    def digest(self) -> str:
        """Stable SHA-256 over the canonical JSON form (output dir excluded)."""
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k != "out"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> None:
        def need(ok, path, msg):
            if not ok:
                raise ConfigError(path, msg)

        ds, sg, sm, fu, se, rn = self.dataset, self.segment, self.semmap, self.fusion, self.semantic, self.run
        need(ds.depth_scale is None or ds.depth_scale > 0, "dataset.depth_scale", "must be > 0")
        need(ds.pose_tolerance >= 0, "dataset.pose_tolerance", "must be >= 0")
        need(ds.keyframe_stride >= 1, "dataset.keyframe_stride", "must be >= 1")
        need(0 < sg.edge_angle_deg < 180, "segment.edge_angle_deg", "must lie in (0, 180)")
        need(sg.depth_gap_rel > 0, "segment.depth_gap_rel", "must be > 0")
        need(sg.min_area >= 1, "segment.min_area", "must be >= 1")
        for name in ("t_iou", "t_p1", "t_p2", "delta_up", "delta_down"):
            v = getattr(sm, name)
            need(0.0 <= v <= 1.0, f"semmap.{name}", f"must lie in [0, 1], got {v}")
        need(sm.t_p2 <= sm.t_p1, "semmap.t_p2", "must not exceed semmap.t_p1")
        need(sm.max_support >= 1, "semmap.max_support", "must be >= 1")
        need(sm.occlusion_tol >= 0, "semmap.occlusion_tol", "must be >= 0")
        need(0.01 <= fu.voxel_size <= 1.0, "fusion.voxel_size", "must lie in [0.01, 1.0] m")
        need(fu.truncation is None or fu.truncation >= fu.voxel_size, "fusion.truncation",
             "must be at least one voxel")
        need(fu.w_max >= 1, "fusion.w_max", "must be >= 1")
        need(se.eps_occ is None or se.eps_occ > 0, "semantic.eps_occ", "must be > 0")
        need(se.feature_provider in FEATURE_PROVIDERS, "semantic.feature_provider",
             f"must be one of {', '.join(FEATURE_PROVIDERS)}")
        need(se.feature_provider != "file" or se.feature_dir, "semantic.feature_dir",
             "required when feature_provider = 'file'")
        need(se.feature_level in (1, 2, 3, 4), "semantic.feature_level", "must be 1..4")
        need(se.num_classes >= 2, "semantic.num_classes", "must be >= 2")
        need(se.fallback_radius >= 0, "semantic.fallback_radius", "must be >= 0")
        need(se.gt_max_dist is None or se.gt_max_dist > 0, "semantic.gt_max_dist", "must be > 0")
        need(rn.threads >= 1, "run.threads", "must be >= 1")


def _coerce(path, f, value):
    kind = f.type.replace("Optional[", "").rstrip("]")
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(value, bool):
        raise ConfigError(path, f"expected a {kind}, got a boolean")
    if kind == "int":
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if kind == "float":
        if not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")
    return value


# flag name -> (section, key)
OVERRIDES = {
    "dataset": ("dataset", "path"),
    "out": ("run", "out"),
    "voxel_size": ("fusion", "voxel_size"),
    "keyframe_stride": ("dataset", "keyframe_stride"),
    "t_iou": ("semmap", "t_iou"),
    "t_p1": ("semmap", "t_p1"),
    "t_p2": ("semmap", "t_p2"),
    "seed": ("run", "seed"),
    "threads": ("run", "threads"),
    "brute_force_oracles": ("run", "brute_force_oracles"),
}


def apply_overrides(cfg: PipelineConfig, values: dict) -> PipelineConfig:
    """Set every non-None entry of ``values`` (keys from :data:`OVERRIDES`)."""
    for name, value in values.items():
        if value is None or name not in OVERRIDES:
            continue
        section, key = OVERRIDES[name]
        setattr(getattr(cfg, section), key, value)
    cfg.validate()
    return cfg
