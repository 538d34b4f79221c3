"""Conformer encoders, losses and a training harness on a small numpy autodiff core."""

from .errors import (CheckpointError, ConfigError, ConformerKitError, ContractError,
                     CTCInfeasibleError, DimensionError, InputTooShortError, NumericFault)
from .model import ModelConfig, build_model, preset
from .params import ParamStore, count_params
from .rng import RNG
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad", "RNG", "ParamStore", "count_params",
    "ModelConfig", "preset", "build_model",
    "ConformerKitError", "DimensionError", "NumericFault", "ContractError", "ConfigError",
    "InputTooShortError", "CTCInfeasibleError", "CheckpointError",
]
