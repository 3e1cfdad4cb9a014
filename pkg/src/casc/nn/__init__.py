from .autodiff import Tensor, no_grad
from .layers import Conv2d, GroupNorm, Linear, Module, ModuleList, sinusoidal_time_embedding
from .optim import Adam

__all__ = [
    "Tensor",
    "no_grad",
    "Module",
    "ModuleList",
    "Linear",
    "Conv2d",
    "GroupNorm",
    "Adam",
    "sinusoidal_time_embedding",
]
