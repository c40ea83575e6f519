from . import hctf
from .core import (
    ComputationTape,
    OpRecord,
    Tensor,
    abs_,
    add,
    as_tensor,
    backward,
    bce_with_logits,
    binary_cross_entropy,
    clamp,
    concat,
    cross_entropy,
    div,
    exp,
    expand_leading,
    get_default_dtype,
    getitem,
    grad_enabled,
    l2_normalize,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    sigmoid_focal_loss,
    softmax,
    sub,
    sum_,
    topk_indices,
    topk_select,
    transpose,
)
from .gradcheck import finite_diff_check

__all__ = [name for name in dir() if not name.startswith("_")]
