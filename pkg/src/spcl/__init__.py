"""Siamese prototypical contrastive pretraining.

Epoch-start k-means prototypes, prototype-pair batch sampling, a three-term
loss (contrastive + siamese metric + prototypical cross-entropy), LARS
training, linear-probe evaluation and TP/FN distance diagnostics.
"""

__version__ = "0.1.0"

from .config import (
    AugmentationSpec,
    ConfigError,
    LossWeights,
    OptimizerConfig,
    TrainConfig,
    derive_rng,
    derive_torch_seed,
    load_config,
    serialize_config,
)

__all__ = [
    "AugmentationSpec",
    "ConfigError",
    "LossWeights",
    "OptimizerConfig",
    "TrainConfig",
    "derive_rng",
    "derive_torch_seed",
    "load_config",
    "serialize_config",
]
