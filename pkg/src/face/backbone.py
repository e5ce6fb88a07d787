"""View encoders (dynamic GCN over channels, Conv-3 over the electrode grid), head and losses."""
from __future__ import annotations

import logging

import numpy as np

from .diffcore import (
    BASE,
    ParamSet,
    Tensor,
    add,
    clamp_min,
    conv2d,
    div,
    linear,
    log,
    matmul,
    max_pool2d,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    sum_,
)
from .nn import ACTIVATIONS, Params, add_bn, bn, glorot, he

log_ = logging.getLogger(__name__)

# BN axes for the graph branch, for inputs shaped (N, C, B)
GCN_BN_AXES = {"feature": (0,), "band": (0, 1), "node": (0, 2)}


class SingularDegreeError(ArithmeticError):
    pass


def _bn_shape(kind: str, C: int, B: int) -> tuple[int, ...]:
    return {"feature": (1, C, B), "band": (1, 1, B), "node": (1, C, 1)}[kind]


def init_dgcn(params: ParamSet, stats: dict, rng, C: int, B: int, reduction: int = 2, kernel: int = 5,
              bn_axes: str = "feature", prefix: str = "gcn") -> None:
    if C % reduction:
        raise ValueError(f"channel count {C} not divisible by reduction ratio {reduction}")
    if kernel < 1:
        raise ValueError("kernel width must be >= 1")
    h = C // reduction
    params.add(f"{prefix}.A0", rng.uniform(0, 1, (C, C)) * 0.01 + 0.01, BASE)
    params.add(f"{prefix}.W1", glorot(rng, C, h), BASE)
    params.add(f"{prefix}.W2", glorot(rng, h, C), BASE)
    params.add(f"{prefix}.theta1", he(rng, kernel, (1, 1, 1, kernel)), BASE)
    params.add(f"{prefix}.theta2", he(rng, kernel, (1, 1, 1, kernel)), BASE)
    shape = _bn_shape(bn_axes, C, B)
    for i in (1, 2, 3):
        add_bn(params, stats, f"{prefix}.bn{i}", shape, BASE)


def dynamic_adjacency(a0: Tensor, w1: Tensor, w2: Tensor, sigma1: str = "sigmoid", sigma2: str = "relu") -> Tensor:
    """A_d = sigma1(sigma2(A0 W1) W2), shape C x C.

    W1 is C x C/r and W2 is C/r x C, so the reduction acts on the right of A0.
    """
    return ACTIVATIONS[sigma1](matmul(ACTIVATIONS[sigma2](matmul(a0, w1)), w2))


def laplacian(ad: Tensor) -> Tensor:
    """Row-normalised adjacency D^-1 A_d."""
    deg = sum_(ad, axis=1, keepdims=True)
    if np.any(deg.data == 0):
        rows = np.flatnonzero(deg.data.reshape(-1) == 0).tolist()
        raise SingularDegreeError(f"adjacency rows {rows} sum to zero; degree matrix is singular")
    return div(ad, deg)


def _band_conv(x: Tensor, kernel: Tensor) -> Tensor:
    # 1 x K kernel sliding along the band axis, same padding
    n, c, b = x.shape
    k = kernel.shape[-1]
    y = conv2d(reshape(x, (n, 1, c, b)), kernel, padding=(0, k // 2))
    return reshape(y, (n, c, y.shape[-1]))


def dgcn_encode(x: Tensor, p: Params, stats, mode: str, bn_axes: str = "feature", sigma1: str = "sigmoid",
                sigma2: str = "relu", prefix: str = "gcn", adjacency: Tensor | None = None) -> Tensor:
    """(N, C, B) -> (N, C*B) graph-view features Z_g.

    ``adjacency`` replaces the learned A_d (used to probe the aggregation).
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    axes = GCN_BN_AXES[bn_axes]
    if adjacency is None:
        ad = dynamic_adjacency(p[f"{prefix}.A0"], p[f"{prefix}.W1"], p[f"{prefix}.W2"], sigma1, sigma2)
    else:
        ad = adjacency
    lap = laplacian(ad)
    h = relu(bn(_band_conv(x, p[f"{prefix}.theta1"]), p, stats, f"{prefix}.bn1", axes, mode))
    h = bn(_band_conv(h, p[f"{prefix}.theta2"]), p, stats, f"{prefix}.bn2", axes, mode)
    if h.shape != x.shape:
        raise ValueError(f"band convolution changed extents {x.shape} -> {h.shape}; use an odd kernel")
    zg = bn(add(matmul(lap, h), x), p, stats, f"{prefix}.bn3", axes, mode)
    return reshape(zg, (x.shape[0], -1))


def init_conv3(params: ParamSet, stats: dict, rng, in_channels: int, filters: int = 32, prefix: str = "cnn") -> None:
    cin = in_channels
    for i in (1, 2, 3):
        params.add(f"{prefix}.conv{i}.w", he(rng, cin * 9, (filters, cin, 3, 3)), BASE)
        params.add(f"{prefix}.conv{i}.b", np.zeros(filters), BASE)
        add_bn(params, stats, f"{prefix}.bn{i}", (1, filters, 1, 1), BASE)
        cin = filters


def conv3_feature_dim(filters: int, size: int = 32) -> int:
    return filters * (size // 4) ** 2


def conv3_encode(s: Tensor, p: Params, stats, mode: str, prefix: str = "cnn", size: int = 32) -> Tensor:
    """(N, B, size, size) -> (N, D) spatial-view features; no pooling after the last block."""
    s = s if isinstance(s, Tensor) else Tensor(s)
    if s.ndim != 4 or s.shape[-2:] != (size, size):
        raise ValueError(f"conv3_encode expects N x B x {size} x {size} input, got {s.shape}")
    h = s
    for i in (1, 2, 3):
        w, b = p[f"{prefix}.conv{i}.w"], p[f"{prefix}.conv{i}.b"]
        h = relu(bn(conv2d(h, w, b, padding=(1, 1)), p, stats, f"{prefix}.bn{i}", (0, 2, 3), mode))
        if i < 3:
            h = max_pool2d(h)
    return reshape(h, (h.shape[0], -1))


def classify(z: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return softmax(linear(z, w, b), axis=-1)


def smooth_cross_entropy(probs: Tensor, labels, eps: float = 0.0, diagnostics: dict | None = None) -> Tensor:
    """Mean cross-entropy against (1-eps)*onehot + eps/c targets; eps=0 is the plain loss."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    row_sums = probs.data.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-5):
        raise ValueError(f"probability rows must sum to 1 (max deviation {np.abs(row_sums - 1).max():.2e})")
    target = np.full((n, c), eps / c)
    target[np.arange(n), labels] += 1.0 - eps
    clamped = int(np.sum((probs.data < 1e-12) & (target > 0)))
    if clamped:
        log_.debug("smooth_cross_entropy: %d target probabilities clamped at 1e-12", clamped)
    if diagnostics is not None:
        diagnostics["clamped"] = diagnostics.get("clamped", 0) + clamped
    logp = log(clamp_min(probs, 1e-12))
    return mul(mean(sum_(mul(logp, Tensor(target)), axis=1)), -1.0)
