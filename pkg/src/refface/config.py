"""YAML run configuration with strict validation.

Every field is checked before any work starts. Unknown keys are rejected and
errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .degrade import PRESETS


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


@dataclass
class DataSection:
    identities: int = 16
    refs: int = 5
    hq_per_identity: int = 3
    split: float = 0.75
    size: int = 32
    seed: int = 0


@dataclass
class DegradeSection:
    presets: list = field(default_factory=lambda: ["moderate", "severe"])
    seed: int = 0


@dataclass
class EncodersSection:
    embedding_dim: int = 64
    token_dim: int = 32
    identity_steps: int = 400
    general_steps: int = 1500
    pool_identities: int = 160
    pool_images: int = 3
    min_gap: float = 0.3
    seed: int = 0


@dataclass
class TrainSection:
    lam: float = 0.6
    w_hid: float = 0.1
    dropout_p: float = 0.1
    T: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.04
    batch: int = 32
    lr: float = 5e-4
    lr_decay: bool = False
    steps: int = 3000
    lq_variants: int = 8
    extra_identities: int = 0
    channels: list = field(default_factory=lambda: [32, 64, 64])
    seed: int = 0


@dataclass
class GuidanceSection:
    s_i: float = 1.2
    s_c: float = 1.2
    num_steps: int | None = None
    mask: list = field(default_factory=lambda: [True, True])
    n_refs: int = 1
    seed: int = 0


@dataclass
class EvalSection:
    presets: list = field(default_factory=lambda: ["moderate", "severe"])
    color_fix: bool = True
    n_max: int = 5
    lambdas: list = field(default_factory=lambda: [0.0, 0.6, 1.0])
    s_i_values: list = field(default_factory=lambda: [1.0, 1.2, 1.5])
    s_c_values: list = field(default_factory=lambda: [0.0, 1.0, 1.2, 1.5])


@dataclass
class RunConfig:
    name: str = "desk"
    data: DataSection = field(default_factory=DataSection)
    degrade: DegradeSection = field(default_factory=DegradeSection)
    encoders: EncodersSection = field(default_factory=EncodersSection)
    train: TrainSection = field(default_factory=TrainSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def set_seed(self, seed: int) -> None:
        for sec in (self.data, self.degrade, self.encoders, self.train, self.guidance):
            sec.seed = seed


_SECTION_TYPES = {
    "data": DataSection,
    "degrade": DegradeSection,
    "encoders": EncodersSection,
    "train": TrainSection,
    "guidance": GuidanceSection,
    "eval": EvalSection,
}


def _check_type(path: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    return value


def _section(name: str, raw) -> object:
    cls = _SECTION_TYPES[name]
    sec = cls()
    if raw is None:
        return sec
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if key not in known:
            raise ConfigError(path, "unknown key")
        default = getattr(sec, key)
        if default is None:  # optional integer
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(path, f"expected an integer or null, got {value!r}")
        else:
            value = _check_type(path, value, default)
        setattr(sec, key, value)
    return sec


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


def validate(cfg: RunConfig) -> RunConfig:
    d, g, e, t, gu, ev = cfg.data, cfg.degrade, cfg.encoders, cfg.train, cfg.guidance, cfg.eval
    _require(isinstance(cfg.name, str) and cfg.name.replace("-", "").replace("_", "").isalnum(),
             "name", "must be a non-empty alphanumeric name (- and _ allowed)")
    _require(d.identities >= 4, "data.identities", "need at least 4 identities")
    _require(d.refs >= 1, "data.refs", "must be >= 1")
    _require(d.hq_per_identity >= 1, "data.hq_per_identity", "must be >= 1")
    _require(0.0 < d.split < 1.0, "data.split", "must lie in (0, 1)")
    _require(d.size in (32, 48, 64), "data.size", "must be 32, 48 or 64")
    for i, p in enumerate(g.presets):
        _require(p in PRESETS, f"degrade.presets[{i}]", f"unknown preset {p!r}")
    _require(len(g.presets) > 0, "degrade.presets", "must not be empty")
    for key in ("embedding_dim", "token_dim", "identity_steps", "general_steps", "pool_identities", "pool_images"):
        _require(getattr(e, key) >= 1, f"encoders.{key}", "must be >= 1")
    _require(e.embedding_dim % 2 == 0, "encoders.embedding_dim", "must be even")
    _require(0.0 <= t.lam <= 1.0, "train.lam", "must lie in [0, 1]")
    _require(t.w_hid >= 0.0, "train.w_hid", "must be >= 0")
    _require(0.0 <= t.dropout_p < 1.0, "train.dropout_p", "must lie in [0, 1)")
    _require(t.T >= 2, "train.T", "must be >= 2")
    _require(0.0 < t.beta_min <= t.beta_max < 1.0, "train.beta_max", "need 0 < beta_min <= beta_max < 1")
    _require(t.batch >= 1, "train.batch", "must be >= 1")
    _require(t.lr > 0.0, "train.lr", "must be > 0")
    _require(t.steps >= 1, "train.steps", "must be >= 1")
    _require(t.lq_variants >= 0, "train.lq_variants", "must be >= 0")
    _require(t.extra_identities >= 0, "train.extra_identities", "must be >= 0")
    _require(t.extra_identities == 0 or t.lq_variants >= 1, "train.lq_variants",
             "extra identities need at least one LQ variant")
    _require(len(t.channels) >= 2 and all(isinstance(c, int) and c % 8 == 0 and c > 0 for c in t.channels),
             "train.channels", "need at least 2 positive multiples of 8")
    if gu.num_steps is not None:
        _require(1 <= gu.num_steps <= t.T, "guidance.num_steps", f"must lie in [1, train.T={t.T}]")
    _require(len(gu.mask) == 2 and all(isinstance(m, bool) for m in gu.mask), "guidance.mask",
             "must be two booleans [use_identity, use_general]")
    _require(1 <= gu.n_refs <= d.refs, "guidance.n_refs", f"must lie in [1, data.refs={d.refs}]")
    for i, p in enumerate(ev.presets):
        _require(p in g.presets, f"eval.presets[{i}]", f"preset {p!r} is not produced by degrade.presets")
    _require(1 <= ev.n_max <= d.refs, "eval.n_max", f"must lie in [1, data.refs={d.refs}]")
    for i, lam in enumerate(ev.lambdas):
        _require(isinstance(lam, (int, float)) and 0.0 <= lam <= 1.0, f"eval.lambdas[{i}]", "must lie in [0, 1]")
    for key in ("s_i_values", "s_c_values"):
        vals = getattr(ev, key)
        _require(len(vals) > 0 and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals),
                 f"eval.{key}", "must be a non-empty list of numbers")
    return cfg


def from_dict(raw) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping")
    cfg = RunConfig()
    for key, value in raw.items():
        if key == "name":
            cfg.name = value
        elif key in _SECTION_TYPES:
            setattr(cfg, key, _section(key, value))
        else:
            raise ConfigError(key, "unknown key")
    return validate(cfg)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"invalid YAML: {exc}") from exc
    return from_dict(raw)
