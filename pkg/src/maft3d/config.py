"""Run configuration: defaults, text parsing, validation.

The file format is plain ``key = value`` with dotted section prefixes, e.g.
``decoder.layers = 6``. Unknown keys and out-of-range values are rejected
before any computation starts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Bad key, bad type, or out-of-range value in a configuration."""


@dataclass
class DecoderSection:
    layers: int = 6
    heads: int = 8
    d: int = 256
    ffn: int = 1024
    queries: int = 100


@dataclass
class RpeSection:
    s: float = 0.1
    length: int = 48


@dataclass
class ApeSection:
    temperature: float = 10000.0


@dataclass
class LossSection:
    lambda_cls: float = 0.5
    lambda_bce: float = 1.0
    lambda_dice: float = 1.0
    lambda_center: float = 0.5
    no_object_weight: float = 0.1


@dataclass
class OptimSection:
    lr: float = 1e-4
    weight_decay: float = 0.05
    poly_power: float = 0.9


@dataclass
class DataSection:
    voxel_size: float = 0.05  # synthetic desk default; real scans use 0.02 m
    max_points: int = 250000
    classes: int = 18
    knn: int = 16


@dataclass
class GenSection:
    extent_x: float = 8.0
    extent_y: float = 8.0
    extent_z: float = 3.0
    n_inst_min: int = 3
    n_inst_max: int = 8
    noise_sigma: float = 0.005
    clutter_fraction: float = 0.2
    inst_points_min: int = 400
    inst_points_max: int = 700
    min_separation: float = 0.3


@dataclass
class TrainSection:
    epochs: int = 100
    batch_size: int = 4
    checkpoint_every: int = 25
    workers: int = 1  # scene-level parallelism; results are worker-count invariant


@dataclass
class EvalSection:
    top_k: int = 100
    min_tokens: int = 10  # token-level stand-in for the 100-point scan filter


@dataclass
class AblationSection:
    refinement: bool = True
    center_match: bool = True
    center_loss: bool = True


@dataclass
class Config:
    decoder: DecoderSection = field(default_factory=DecoderSection)
    rpe: RpeSection = field(default_factory=RpeSection)
    ape: ApeSection = field(default_factory=ApeSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    data: DataSection = field(default_factory=DataSection)
    gen: GenSection = field(default_factory=GenSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    mode: str = "rpe"
    seed: int = 0

    def validate(self) -> "Config":
        d = self.decoder
        if d.layers < 1 or d.heads < 1 or d.queries < 1 or d.ffn < 1:
            raise ConfigError("decoder sizes must be positive")
        if d.d < 6 or d.d % d.heads != 0:
            raise ConfigError("decoder.d must be >= 6 and divisible by decoder.heads")
        if self.rpe.s <= 0:
            raise ConfigError("rpe.s must be positive")
        if self.rpe.length <= 0 or self.rpe.length % 2 != 0:
            raise ConfigError("rpe.length must be even and positive")
        if self.ape.temperature <= 0:
            raise ConfigError("ape.temperature must be positive")
        ls = self.loss
        if min(ls.lambda_cls, ls.lambda_bce, ls.lambda_dice, ls.lambda_center) < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0 < ls.no_object_weight <= 1:
            raise ConfigError("loss.no_object_weight must lie in (0, 1]")
        if self.optim.lr <= 0 or self.optim.weight_decay < 0 or self.optim.poly_power <= 0:
            raise ConfigError("optim values out of range")
        if self.data.voxel_size <= 0 or self.data.max_points < 1:
            raise ConfigError("data.voxel_size and data.max_points must be positive")
        if self.data.classes < 1 or self.data.knn < 1:
            raise ConfigError("data.classes and data.knn must be positive")
        g = self.gen
        if min(g.extent_x, g.extent_y, g.extent_z) <= 0:
            raise ConfigError("gen extents must be positive")
        if not 1 <= g.n_inst_min <= g.n_inst_max:
            raise ConfigError("gen.n_inst range must satisfy 1 <= min <= max")
        if g.inst_points_min < 50 or g.inst_points_min > g.inst_points_max:
            raise ConfigError("gen.inst_points range must satisfy 50 <= min <= max")
        if not 0 <= g.clutter_fraction < 1:
            raise ConfigError("gen.clutter_fraction must lie in [0, 1)")
        if g.noise_sigma < 0 or g.min_separation < 0:
            raise ConfigError("gen.noise_sigma and gen.min_separation must be >= 0")
        if self.train.epochs < 0 or self.train.batch_size < 1 or self.train.checkpoint_every < 1:
            raise ConfigError("train values out of range")
        if not 1 <= self.train.workers <= 64:
            raise ConfigError("train.workers must lie in [1, 64]")
        if self.eval.top_k < 1 or self.eval.min_tokens < 0:
            raise ConfigError("eval values out of range")
        if self.mode not in ("rpe", "mask_attention", "none"):
            raise ConfigError(f"mode must be rpe|mask_attention|none, got {self.mode!r}")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        return self


def _flatten(cfg: Config) -> dict[str, object]:
    out: dict[str, object] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            out[f.name] = value
    return out


def to_text(cfg: Config) -> str:
    lines = []
    for key, value in _flatten(cfg).items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _convert(key: str, raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def apply_overrides(cfg: Config, items: dict[str, str]) -> Config:
    for key, raw in items.items():
        parts = key.split(".")
        if len(parts) == 1:
            if not hasattr(cfg, key) or dataclasses.is_dataclass(getattr(cfg, key)):
                raise ConfigError(f"unknown configuration key {key!r}")
            setattr(cfg, key, _convert(key, raw, getattr(cfg, key)))
        elif len(parts) == 2:
            section, name = parts
            if not hasattr(cfg, section) or not dataclasses.is_dataclass(getattr(cfg, section)):
                raise ConfigError(f"unknown configuration section {section!r}")
            sec = getattr(cfg, section)
            if not hasattr(sec, name):
                raise ConfigError(f"unknown configuration key {key!r}")
            setattr(sec, name, _convert(key, raw, getattr(sec, name)))
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    return cfg


def from_text(text: str, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        items[key.strip()] = raw.strip()
    apply_overrides(cfg, items)
    return cfg.validate()


def load(path) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return from_text(fh.read())
