"""Goal-conditioned score-diffusion policies learned from sparsely annotated play data."""

from .diffusion import ContractError, NoiseDist, Preconditioner
from .model import ImageGoal, LanguageGoal, ModelConfig, PolicyNetwork
from .tensor import DimensionError, GraphError, Tensor

__all__ = [
    "ContractError",
    "DimensionError",
    "GraphError",
    "ImageGoal",
    "LanguageGoal",
    "ModelConfig",
    "NoiseDist",
    "PolicyNetwork",
    "Preconditioner",
    "Tensor",
]
__version__ = "0.1.0"
