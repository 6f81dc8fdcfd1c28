from .core import (
    Dual,
    Tape,
    Var,
    concat,
    cos,
    exp,
    grad,
    gmean,
    gsum,
    jacobian,
    log,
    matmul,
    moveaxis_first_last,
    posdef_solve,
    primal_of,
    relu,
    reshape,
    shape_of,
    sigmoid,
    sin,
    softplus,
    sqrt,
    stack,
    swapaxes,
    tanh,
    value_of,
)
from .mlp import (
    ACTIVATIONS,
    MlpParams,
    mlp_flatten,
    mlp_forward,
    mlp_init,
    mlp_lift,
    mlp_unflatten,
)

__all__ = [name for name in dir() if not name.startswith("_")]
