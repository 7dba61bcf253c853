"""Dense numerics: autodiff, MLPs, Adam and seeded randomness."""

from . import autodiff
from .autodiff import NonFiniteError, Tensor, grad, tree_flatten, tree_map, tree_unflatten, value_and_grad
from .nn import (
    MlpParams,
    init_mlp,
    load_checkpoint,
    load_mlp,
    mlp_forward,
    save_checkpoint,
    save_mlp,
)
from .optim import AdamState, adam_init, adam_step
from .rng import Rng

__all__ = [
    "AdamState",
    "MlpParams",
    "NonFiniteError",
    "Rng",
    "Tensor",
    "adam_init",
    "adam_step",
    "autodiff",
    "grad",
    "init_mlp",
    "load_checkpoint",
    "load_mlp",
    "mlp_forward",
    "save_checkpoint",
    "save_mlp",
    "tree_flatten",
    "tree_map",
    "tree_unflatten",
    "value_and_grad",
]
