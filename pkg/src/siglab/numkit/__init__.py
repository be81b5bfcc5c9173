"""Dense float64 matrix kernel: reverse-mode autodiff, layers, momentum SGD, RNG."""

from . import autodiff as ad
from .autodiff import Tape, Var, backward
from .gradcheck import check_gradients
from .layers import LAYER_KINDS, layer_forward
from .matrix import as_matrix, matmul
from .optim import OptimState, sgd_momentum_step
from .rng import Rng


def kl_diag_gaussian(mu, logvar) -> float:
    """Batch-mean KL(N(mu, e^logvar) || N(0, I)) for plain arrays."""
    return float(ad.kl_diag_gaussian(ad.Var(mu), ad.Var(logvar)).value)


__all__ = [
    "LAYER_KINDS", "OptimState", "Rng", "Tape", "Var", "ad", "as_matrix", "backward", "check_gradients",
    "kl_diag_gaussian", "layer_forward", "matmul", "sgd_momentum_step",
]
