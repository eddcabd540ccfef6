"""Context-aware transducer with a self-consistent recursive joiner:
training on synthetic data, contextual shallow-fusion decoding, and
WER/WERR/OOV evaluation."""

from .tensor import GradTape, Tensor, backward, finite_diff_grad
from .model import ModelConfig, ModelParams, init_params

__all__ = [
    "GradTape",
    "Tensor",
    "backward",
    "finite_diff_grad",
    "ModelConfig",
    "ModelParams",
    "init_params",
]

__version__ = "0.1.0"
