"""Multi-view vision transformer with random token fusion (RTF).

Built on a small numpy reverse-mode autodiff engine (:mod:`rtfvit.tensor`).
"""

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    GenerationError,
    MetricError,
    NumericalError,
    StateError,
    ValidationError,
)
from .fusion import FusionStrategy, RtfMask, fuse, rtf_fuse, sample_rtf_mask
from .model import MultiViewModel, combined_loss, forward_infer, forward_train
from .tensor import Tape, Tensor, backward
from .vit import ModelConfig, TokenSet

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "DivergenceError", "FusionStrategy",
    "GenerationError", "MetricError", "ModelConfig", "MultiViewModel", "NumericalError",
    "RtfMask", "StateError", "Tape", "Tensor", "TokenSet", "ValidationError", "backward",
    "combined_loss", "forward_infer", "forward_train", "fuse", "rtf_fuse", "sample_rtf_mask",
]
