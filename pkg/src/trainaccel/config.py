"""Experiment configuration and the flat ``key = value`` config format.

Keys are dotted paths into :class:`ExperimentConfig`, e.g.::

    # synthetic workload
    dataset.source = synthetic
    dataset.dims = 32
    optimizer.kind = adamw
    optimizer.learning_rate = 2e-5
    ga_steps = 15

Unknown keys are errors. ``--config`` also accepts the name of a bundled
preset (see :func:`list_presets`).
"""

from __future__ import annotations

import dataclasses
import enum
import types
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .amp import DEFAULT_HALF_OPS
from .datapipe import DatasetSpec, TransferModel
from .errors import ConfigError
from .optim import OptimizerConfig
from .pinpolicy import PolicyParams


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"  # mlp | cnn
    hidden: tuple[int, ...] = (32,)
    channels: tuple[int, ...] = (8, 16)

    def __post_init__(self):
        if self.kind not in ("mlp", "cnn"):
            raise ConfigError(f"model.kind must be mlp or cnn, got {self.kind!r}")


@dataclass(frozen=True)
class AmpParams:
    base_scale: float = 2.0 ** 16
    beta: float = 1.0
    growth_interval: int = 200
    min_scale: float = 1.0
    max_scale: float = 2.0 ** 24
    use_formula: bool = True
    half_ops: tuple[str, ...] = tuple(sorted(DEFAULT_HALF_OPS))


@dataclass(frozen=True)
class PrefetchConfig:
    k_buffers: int = 1
    pinned: bool = False
    pin_policy: bool = False
    transfer: TransferModel = field(default_factory=TransferModel)
    policy: PolicyParams = field(default_factory=PolicyParams)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    epochs: int = 5
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ga_steps: int = 1
    amp_enabled: bool = False
    amp: AmpParams = field(default_factory=AmpParams)
    prefetch: PrefetchConfig = field(default_factory=PrefetchConfig)
    seed: int = 0
    val_fraction: float = 0.1
    eval_batch_size: int = 512
    name: str = ""

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.ga_steps < 1:
            raise ConfigError("batch_size and ga_steps must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.prefetch.k_buffers < 1:
            raise ConfigError("prefetch.k_buffers must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.ga_steps

    def to_flat(self) -> dict[str, str]:
        return to_flat(self)

    def with_overrides(self, flat: dict) -> "ExperimentConfig":
        merged = self.to_flat()
        for k, v in flat.items():
            if k not in merged:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = v if isinstance(v, str) else format_value(v)
        return from_flat(merged)


# -- flat encoding ------------------------------------------------------------

def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, (tuple, list, frozenset)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_flat(obj, prefix="") -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(to_flat(v, key + "."))
        else:
            out[key] = format_value(v)
    return out


_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def _parse(text: str, tp, key: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() in ("none", "null", ""):
            return None
        return _parse(text, args[0], key)
    if origin is tuple:
        elem = typing.get_args(tp)[0]
        if not text:
            return ()
        parts = text.replace("x", ",").split(",") if elem is int else text.split(",")
        return tuple(_parse(p, elem, key) for p in parts if p.strip())
    try:
        if tp is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if isinstance(tp, type) and issubclass(tp, enum.Enum):
            return tp(text.lower())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _build(cls, flat: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        key = prefix + f.name
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, flat, key + ".")
        elif key in flat:
            kwargs[f.name] = _parse(flat[key], tp, key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None


def known_keys() -> set[str]:
    return set(to_flat(ExperimentConfig()))


def from_flat(flat: dict) -> ExperimentConfig:
    unknown = set(flat) - known_keys()
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return _build(ExperimentConfig, flat, "")


def parse_config_text(text: str, origin: str = "<config>") -> ExperimentConfig:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in flat:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        flat[key] = value
    try:
        return from_flat(flat)
    except ConfigError as exc:
        raise ConfigError(f"{origin}: {exc}") from None


def list_presets() -> list[str]:
    root = resources.files("trainaccel") / "presets"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_config(path_or_preset) -> ExperimentConfig:
    path = Path(path_or_preset)
    if path.is_file():
        return parse_config_text(path.read_text(), str(path))
    name = str(path_or_preset)
    preset = resources.files("trainaccel") / "presets" / f"{name}.cfg"
    if preset.is_file():
        return parse_config_text(preset.read_text(), f"preset:{name}")
    raise ConfigError(f"no config file or preset named {name!r} (presets: {', '.join(list_presets())})")


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_flat().items())
