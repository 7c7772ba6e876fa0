from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import check_gradients
from .layers import MLP, BatchNorm, Block, Linear, Module, pool, shared_mlp
from .optim import SGD, sgd_step
from .tensor import (
    Tensor,
    affine,
    batch_norm,
    concat,
    global_avg_pool,
    global_max_pool,
    matmul,
    relu,
    repeat_rows,
    smooth_l1,
    square,
)

__all__ = [
    "BatchNorm", "Block", "Linear", "MLP", "Module", "SGD", "Tensor", "affine", "batch_norm",
    "check_gradients", "concat", "global_avg_pool", "global_max_pool", "load_checkpoint",
    "matmul", "pool", "relu", "repeat_rows", "save_checkpoint", "sgd_step", "shared_mlp",
    "smooth_l1", "square",
]
