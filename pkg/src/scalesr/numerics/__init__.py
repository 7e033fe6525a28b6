from .rng import Rng
from .tensor import Tensor, no_grad
from . import ops
from .optim import AdamW

__all__ = ["Rng", "Tensor", "no_grad", "ops", "AdamW"]
