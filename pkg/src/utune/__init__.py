"""Parallel tuners attached to a frozen miniature transformer, with numeric verification."""

__version__ = "0.1.0"

from .backbone import Backbone, BackboneConfig, PRESETS
from .composer import (ComposedModel, ConfigError, OpSite, TunerKind, TunerSpec, UTuningConfig, compose,
                       count_trainable_params, default_config, enumerate_ablation_grid)
from .tensor import Tensor, Variable

__all__ = [
    "Backbone", "BackboneConfig", "PRESETS", "ComposedModel", "ConfigError", "OpSite", "TunerKind", "TunerSpec",
    "UTuningConfig", "compose", "count_trainable_params", "default_config", "enumerate_ablation_grid", "Tensor",
    "Variable", "__version__",
]
