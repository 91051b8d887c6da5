from .autodiff import GradientTape, Var, backward
from .gradcheck import GradCheckReport, finite_diff_check
from .layers import DenseLayer, Network, forward
from .linalg import PCAResult, pca
from .optim import NonFiniteGradientError, OptimizerState, adam_step
from .rng import derive_seed, rng

__all__ = [
    "DenseLayer",
    "GradCheckReport",
    "GradientTape",
    "Network",
    "NonFiniteGradientError",
    "OptimizerState",
    "PCAResult",
    "Var",
    "adam_step",
    "backward",
    "derive_seed",
    "finite_diff_check",
    "forward",
    "pca",
    "rng",
]
