"""CLIP-guided cross-domain cross-modal video question answering at desk scale."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .config import ModelConfig, TrainConfig
from .errors import ConfigError, ContractError, IngestionError, ShapeError
from .fusion import CCVQA, Batch, FusionTokens, decode_answer, forward_ccvqa, fuse, qa_loss
from .tensor import Parameter, Tensor, backward, default_dtype, finite_diff_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "CCVQA",
    "Batch",
    "ConfigError",
    "ContractError",
    "FusionTokens",
    "IngestionError",
    "KERNEL_BACKEND",
    "ModelConfig",
    "Parameter",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "backward",
    "decode_answer",
    "default_dtype",
    "finite_diff_check",
    "forward_ccvqa",
    "fuse",
    "no_grad",
    "qa_loss",
]
