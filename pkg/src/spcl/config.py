"""Run configuration: schema, flat key-value parsing, and seeded rng streams.

The config file is a flat text document of ``key = value`` lines. Nested
fields use dotted keys (``optimizer.base_lr``, ``augmentation.p_flip``,
``loss_weights.alpha``). CLI flags override file values under the same names.
"""

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HEAD_NAMES = ("g_c", "g_m", "g_p")
SAMPLING_MODES = ("single_q", "mixed_q")
OPTIMIZER_FALLBACKS = ("lars", "sgd_momentum")


class ConfigError(ValueError):
    """Schema violation; the message names the offending key."""


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def as_tuple(self):
        return (self.alpha, self.beta, self.gamma)


@dataclass
class OptimizerConfig:
    base_lr: float = 1.0
    weight_decay: float = 1e-6
    warmup_epochs: int = 10
    trust_coefficient: float = 0.001
    momentum: float = 0.9
    fallback: str = "lars"


@dataclass
class AugmentationSpec:
    """Ordered stochastic transform pipeline: crop-resize, horizontal flip,
    color jitter, grayscale, blur. Two independent draws on one sample yield
    two views of identical spatial shape (crop-resize emits the input size).
    """

    crop_scale_min: float = 0.4
    crop_scale_max: float = 1.0
    crop_ratio_min: float = 0.75
    crop_ratio_max: float = 4.0 / 3.0
    p_flip: float = 0.5
    p_jitter: float = 0.8
    jitter_brightness: float = 0.4
    jitter_contrast: float = 0.4
    jitter_saturation: float = 0.4
    jitter_hue: float = 0.1
    p_grayscale: float = 0.2
    p_blur: float = 0.0
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0


@dataclass
class TrainConfig:
    dataset_path: str = ""
    num_prototypes: int = 512
    batch_size: int = 512
    epochs: int = 1000
    temperature: float = 0.5
    loss_weights: LossWeights = field(default_factory=LossWeights)
    embed_dim: int = 128
    proj_dim: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    exclude_positive_in_denominator: bool = True
    reinit_scope: tuple = HEAD_NAMES
    proto_sampling_mode: str = "single_q"
    symmetric_ce: bool = False
    symmetric_ce_a: float = 1.0
    symmetric_ce_b: float = 1.0
    symmetric_ce_clamp: float = -4.0
    seed: int = 0

    @property
    def samples_per_side(self):
        """N, the per-prototype half of a step batch."""
        return self.batch_size // 2

    def validate(self):
        if not self.dataset_path:
            raise ConfigError("dataset_path is required")
        if self.num_prototypes < 2:
            raise ConfigError("num_prototypes must be >= 2")
        if self.batch_size < 4:
            raise ConfigError("batch_size must be >= 4")
        if self.batch_size % 2 != 0:
            raise ConfigError("batch_size must be even")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        w = self.loss_weights
        for name in ("alpha", "beta", "gamma"):
            if getattr(w, name) < 0:
                raise ConfigError(f"loss_weights.{name} must be >= 0")
        if w.alpha == 0 and w.beta == 0 and w.gamma == 0:
            raise ConfigError("loss_weights must not all be zero")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.proj_dim < 1:
            raise ConfigError("proj_dim must be >= 1")
        o = self.optimizer
        if not o.base_lr > 0:
            raise ConfigError("optimizer.base_lr must be > 0")
        if o.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay must be >= 0")
        if o.warmup_epochs < 0:
            raise ConfigError("optimizer.warmup_epochs must be >= 0")
        if o.warmup_epochs >= self.epochs:
            raise ConfigError("optimizer.warmup_epochs must be < epochs")
        if not o.trust_coefficient > 0:
            raise ConfigError("optimizer.trust_coefficient must be > 0")
        if o.momentum < 0:
            raise ConfigError("optimizer.momentum must be >= 0")
        if o.fallback not in OPTIMIZER_FALLBACKS:
            raise ConfigError(
                f"optimizer.fallback must be one of {OPTIMIZER_FALLBACKS}"
            )
        a = self.augmentation
        if not 0 < a.crop_scale_min <= a.crop_scale_max <= 1.0:
            raise ConfigError("augmentation.crop_scale_min/max must satisfy 0 < min <= max <= 1")
        if not 0 < a.crop_ratio_min <= a.crop_ratio_max:
            raise ConfigError("augmentation.crop_ratio_min/max must satisfy 0 < min <= max")
        for name in ("p_flip", "p_jitter", "p_grayscale", "p_blur"):
            v = getattr(a, name)
            if not 0 <= v <= 1:
                raise ConfigError(f"augmentation.{name} must be in [0, 1]")
        for name in ("jitter_brightness", "jitter_contrast", "jitter_saturation"):
            if getattr(a, name) < 0:
                raise ConfigError(f"augmentation.{name} must be >= 0")
        if not 0 <= a.jitter_hue <= 0.5:
            raise ConfigError("augmentation.jitter_hue must be in [0, 0.5]")
        if not 0 < a.blur_sigma_min <= a.blur_sigma_max:
            raise ConfigError("augmentation.blur_sigma_min/max must satisfy 0 < min <= max")
        for name in self.reinit_scope:
            if name not in HEAD_NAMES:
                raise ConfigError(f"reinit_scope entries must be in {HEAD_NAMES}")
        if self.proto_sampling_mode not in SAMPLING_MODES:
            raise ConfigError(
                f"proto_sampling_mode must be one of {SAMPLING_MODES}"
            )
        if not self.symmetric_ce_clamp < 0:
            raise ConfigError("symmetric_ce_clamp must be < 0")
        return self


def _parse_bool(key, raw):
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_int(key, raw):
    try:
        return int(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def _parse_float(key, raw):
    try:
        v = float(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: must be finite, got {raw!r}")
    return v


def _parse_str(key, raw):
    return raw.strip()


def _parse_scope(key, raw):
    items = [s.strip() for s in raw.split(",") if s.strip()]
    for s in items:
        if s not in HEAD_NAMES:
            raise ConfigError(f"{key}: unknown head {s!r}, expected subset of {HEAD_NAMES}")
    # canonical order, duplicates dropped
    return tuple(h for h in HEAD_NAMES if h in items)


_SCALAR_PARSERS = {int: _parse_int, float: _parse_float, bool: _parse_bool, str: _parse_str}


def _schema():
    """Dotted key -> (path through the dataclass tree, parser)."""
    out = {}

    def add(prefix, cls, path):
        for f in dataclasses.fields(cls):
            if dataclasses.is_dataclass(f.type) or f.type in (LossWeights, OptimizerConfig, AugmentationSpec):
                add(f"{prefix}{f.name}.", f.type, path + (f.name,))
            elif f.name == "reinit_scope":
                out[f"{prefix}{f.name}"] = (path + (f.name,), _parse_scope)
            else:
                out[f"{prefix}{f.name}"] = (path + (f.name,), _SCALAR_PARSERS[f.type])

    add("", TrainConfig, ())
    return out


_SCHEMA = _schema()


def _set_path(obj, path, value):
    for name in path[:-1]:
        obj = getattr(obj, name)
    setattr(obj, path[-1], value)


def _get_path(obj, path):
    for name in path:
        obj = getattr(obj, name)
    return obj


def apply_entries(config, entries):
    """Apply {dotted key: raw string} entries onto a TrainConfig in place.

    Unknown keys are rejected. ``loss_weights = a,b,c`` is accepted as a
    shorthand for the three dotted weight keys.
    """
    for key, raw in entries.items():
        if key == "loss_weights":
            parts = [p.strip() for p in str(raw).split(",")]
            if len(parts) != 3:
                raise ConfigError("loss_weights: expected three comma-separated numbers")
            for name, part in zip(("alpha", "beta", "gamma"), parts):
                _set_path(config, ("loss_weights", name), _parse_float(f"loss_weights.{name}", part))
            continue
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        path, parser = _SCHEMA[key]
        _set_path(config, path, parser(key, str(raw)))
    return config


def parse_entries(text):
    """Parse the flat key-value document into {key: raw string}."""
    entries = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in entries:
            raise ConfigError(f"duplicate config key {key!r}")
        entries[key] = raw.strip()
    return entries


def load_config(path, overrides=None):
    """Load a TrainConfig from a flat key-value file, then apply overrides.

    Overrides (e.g. from CLI flags) use the same dotted key names and take
    precedence over file values.
    """
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    config = TrainConfig()
    apply_entries(config, parse_entries(p.read_text()))
    if overrides:
        apply_entries(config, {k: str(v) for k, v in overrides.items()})
    return config.validate()


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def serialize_config(config):
    """Canonical flat key-value text; reparses to a structurally equal config."""
    lines = []
    for key, (path, _) in _SCHEMA.items():
        lines.append(f"{key} = {_format_value(_get_path(config, path))}")
    return "\n".join(lines) + "\n"


def config_hash(config):
    return hashlib.sha256(serialize_config(config).encode()).hexdigest()


def _label_entropy(seed, stream_label):
    digest = hashlib.sha256(f"{seed}\x1f{stream_label}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def derive_rng(seed, stream_label):
    """Deterministic, stream-independent random source.

    Same (seed, label) always yields identical draws; different labels (or
    seeds) yield independent streams.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_label_entropy(seed, stream_label))))


def derive_torch_seed(seed, stream_label):
    """63-bit seed for torch.Generator on the same (seed, label) contract."""
    return _label_entropy(seed, stream_label) & ((1 << 63) - 1)
