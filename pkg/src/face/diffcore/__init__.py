"""Minimal dense-tensor engine with reverse-mode (and reverse-over-reverse) differentiation."""
from .graph import CompGraph, GraphError, InnerUpdate, OpRecord, forward, grad, grad_through_update, numeric_grad
from .optim import Adam
from .params import BASE, META, ParamSet
from .tensor import (
    RunningStats,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward_grads,
    batch_norm,
    bilinear_matrix,
    clamp_min,
    col2im,
    concat,
    conv2d,
    div,
    enable_grad,
    exp,
    getitem,
    im2col,
    index_put,
    linear,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    mean,
    mul,
    no_grad,
    pow_scalar,
    precision,
    relu,
    reshape,
    resize_bilinear,
    sigmoid,
    softmax,
    sub,
    sum_,
    tanh,
    trace_branches,
    transpose,
)
