"""Configuration dataclasses and the flat ``key = value`` config format.

Every field of every section is addressable by its bare name, so the
namespace is flat: ``gamma = 700`` sets :attr:`AttackConfig.gamma`.
Precedence is command-line override > file > dataclass default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

INTENT = "intent-corrected"
LITERAL = "paper-literal"
SIGN_RULES = (INTENT, LITERAL)


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 5  # level blocks owned by the network (N_pl upper bound)
    convs_per_block: int = 4
    feature_channels: int = 32
    group_count: int = 4
    spatial_kernel: int = 7
    use_rse: bool = True

    def __post_init__(self):
        if not 1 <= self.levels <= 5:
            raise ConfigError(f"levels must be in [1, 5], got {self.levels}")
        if self.convs_per_block < 1:
            raise ConfigError("convs_per_block must be >= 1")
        if self.feature_channels < 1 or self.group_count < 1:
            raise ConfigError("feature_channels and group_count must be positive")
        if self.feature_channels % self.group_count:
            raise ConfigError("feature_channels must be divisible by group_count")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError("spatial_kernel must be a positive odd integer")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.5
    phi: float = 1.0
    alpha: float = 1.0
    beta: float = 10.0
    gamma: float = 700.0
    tau_b: float = -5.0
    tau_c: float = 10.0
    background_sign: str = INTENT
    mask_rule: str = INTENT

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        for name in ("phi", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("background_sign", "mask_rule"):
            if getattr(self, name) not in SIGN_RULES:
                raise ConfigError(f"{name} must be one of {SIGN_RULES}")


@dataclass(frozen=True)
class TrackerConfig:
    tracker: str = "toy"
    search_size: int = 127
    template_size: int = 63
    context_search: float = 2.0
    context_template: float = 1.0
    backbone_width: int = 32
    template_crop: int = 8  # centre crop of template features, gives a 25x25 grid

    def __post_init__(self):
        if self.search_size < 16 or self.template_size < 8:
            raise ConfigError("search_size/template_size too small")
        if self.context_search <= 0 or self.context_template <= 0:
            raise ConfigError("context factors must be positive")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 2e-4
    cadence: int = 10
    workers: int = 1
    log_every: int = 50
    victim_steps: int = 1500
    victim_batch_size: int = 16
    victim_lr: float = 1e-3


@dataclass(frozen=True)
class DataConfig:
    train_dir: str = "data/train"
    eval_dir: str = "data/eval"
    n_sequences: int = 30
    frames_each: int = 40
    frame_height: int = 320
    frame_width: int = 480
    min_target: int = 16
    max_target: int = 32


@dataclass(frozen=True)
class PathConfig:
    out_dir: str = "runs/out"
    victim_ckpt: str = ""
    sru_ckpt: str = ""
    norse_ckpt: str = ""
    modes: str = "clean,down-up,no-rse,attack"
    bench_frames: int = 200
    dump_frames: bool = False


SECTIONS = {
    "pyramid": PyramidConfig,
    "attack": AttackConfig,
    "tracker": TrackerConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "paths": PathConfig,
}


def _key_index() -> dict[str, tuple[str, dataclasses.Field]]:
    index: dict[str, tuple[str, dataclasses.Field]] = {}
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            if f.name in index:
                raise RuntimeError(f"duplicate config key {f.name!r}")
            index[f.name] = (section, f)
    return index


KEYS = _key_index()


@dataclass(frozen=True)
class Config:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section in SECTIONS:
            out.update(dataclasses.asdict(getattr(self, section)))
        return out

    def replace(self, **overrides: Any) -> "Config":
        return from_mapping({**self.flat(), **overrides})


def _coerce(key: str, raw: Any, typ: Any) -> Any:
    typ = typ if isinstance(typ, str) else typ.__name__
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ})") from None
    return raw


def from_mapping(values: dict[str, Any]) -> Config:
    """Build a Config from flat keys. Unknown keys are a hard error."""
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    per_section: dict[str, dict[str, Any]] = {s: {} for s in SECTIONS}
    for key, raw in values.items():
        section, f = KEYS[key]
        per_section[section][key] = _coerce(key, raw, f.type)
    try:
        return Config(**{s: SECTIONS[s](**kw) for s, kw in per_section.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_flat(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else (":" if ":" in line else None)
        if sep is None:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split(sep, 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def dump_flat(cfg: Config) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"# {section}")
        for key, value in dataclasses.asdict(getattr(cfg, section)).items():
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


def load(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> Config:
    values: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        values.update(parse_flat(text))
    values.update(overrides or {})
    return from_mapping(values)
