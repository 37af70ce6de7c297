"""Pipeline configuration and its flat ``key = value`` text format.

One setting per line, ``section.field = value``; ``#`` starts a comment.
Tuples are comma-separated. Unknown keys are rejected. Example::

    # detection range and voxel grid
    voxel.x_range = -25.6, 25.6
    voxel.voxel_size = 0.1, 0.1, 0.15
    backbone.fpn_scales = 1, 2, 4
    head.score_threshold = 0.1
    mode = oracle
    precision = fp32

Top-level keys: ``mode`` (learned | oracle), ``precision`` (fp32 | fp16),
``seed``, ``workers``, ``voxelize_stage`` (model | preprocess).
Sections: ``voxel``, ``backbone``, ``head``, ``roi``, ``attention``,
``match``, ``eval``, ``scene``; their fields mirror the dataclasses below.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .center_head import HeadConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .matching import MatchConfig
from .roi_attention import RoiConfig
from .scene import SceneConfig
from .tensor import AttentionConfig, Precision
from .voxelizer import VoxelConfig


@dataclass(frozen=True)
class PipelineConfig:
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    mode: str = "learned"
    precision: str = "fp32"
    seed: int = 0
    workers: int = 1
    voxelize_stage: str = "model"

    def __post_init__(self):
        if self.mode not in ("learned", "oracle"):
            raise ConfigError(f"mode must be learned or oracle, got {self.mode!r}")
        if self.precision not in ("fp32", "fp16"):
            raise ConfigError(f"precision must be fp32 or fp16, got {self.precision!r}")
        if self.voxelize_stage not in ("model", "preprocess"):
            raise ConfigError("voxelize_stage must be model or preprocess")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        bad = [s for s in self.roi.scales if s not in self.backbone.fpn_scales]
        if bad:
            raise ConfigError(f"roi scales {bad} not in backbone fpn_scales "
                              f"{self.backbone.fpn_scales}")
        if self.roi.model_dim != self.attention.model_dim:
            raise ConfigError("roi.model_dim must equal attention.model_dim")
        if self.attention.pe_dim != self.attention.model_dim:
            raise ConfigError("attention.pe_dim must equal attention.model_dim")
        if self.backbone.mode != self.mode:
            object.__setattr__(self, "backbone", replace(self.backbone, mode=self.mode))
        self.voxel.dims  # range divisibility
        for r in (self.scene.x_range, self.scene.y_range):
            if r[0] < min(self.voxel.x_range[0], self.voxel.y_range[0]) or \
                    r[1] > max(self.voxel.x_range[1], self.voxel.y_range[1]):
                raise ConfigError("scene placement range exceeds the detection range")

    @property
    def tensor_precision(self) -> Precision:
        return Precision.FP16E if self.precision == "fp16" else Precision.FP32


SECTIONS = ("voxel", "backbone", "head", "roi", "attention", "match", "eval", "scene")
TOP_LEVEL = ("mode", "precision", "seed", "workers", "voxelize_stage")


def _coerce(raw: str, default, hint, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            elem = type(default[0]) if default else float
            return tuple(elem(p) if elem is not int else int(p) for p in parts)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: PipelineConfig = None) -> PipelineConfig:
    base = base or PipelineConfig()
    section_updates = {s: {} for s in SECTIONS}
    top = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"line {n}: unknown section {section!r}")
            current = getattr(base, section)
            known = {f.name for f in fields(current)}
            if name not in known:
                raise ConfigError(f"line {n}: unknown key {key!r}")
            section_updates[section][name] = _coerce(value, getattr(current, name), None, key)
        else:
            if key not in TOP_LEVEL:
                raise ConfigError(f"line {n}: unknown key {key!r}")
            top[key] = _coerce(value, getattr(base, key), None, key)
    kwargs = dict(top)
    try:
        for s in SECTIONS:
            if section_updates[s]:
                kwargs[s] = replace(getattr(base, s), **section_updates[s])
        return replace(base, **kwargs)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: PipelineConfig) -> str:
    lines = ["# centeratt pipeline configuration"]
    for key in TOP_LEVEL:
        lines.append(f"{key} = {_format(getattr(cfg, key))}")
    for s in SECTIONS:
        lines.append("")
        for f in fields(getattr(cfg, s)):
            if s == "backbone" and f.name == "mode":
                continue
            lines.append(f"{s}.{f.name} = {_format(getattr(getattr(cfg, s), f.name))}")
    return "\n".join(lines) + "\n"
