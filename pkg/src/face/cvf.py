"""Cross-view fusion: align the spatial view, attend across the two views, refine, concatenate."""
from __future__ import annotations

import numpy as np

from .diffcore import BASE, META, ParamSet, Tensor, add, concat, getitem, linear, matmul, mul, reshape, softmax, transpose
from .nn import Params, glorot


def init_fusion(params: ParamSet, rng, spatial_dim: int, graph_dim: int, heads: int = 2, prefix: str = "cvf") -> None:
    if heads < 1 or graph_dim % heads:
        raise ValueError(f"feature width {graph_dim} must split evenly over {heads} heads")
    params.add(f"{prefix}.W_sg", glorot(rng, spatial_dim, graph_dim), BASE)
    params.add(f"{prefix}.b_sg", np.zeros(graph_dim), BASE)
    for k in ("q", "k", "v"):
        params.add(f"{prefix}.attn.W{k}", glorot(rng, graph_dim, graph_dim), META)
    params.add(f"{prefix}.attn.Wo", glorot(rng, graph_dim, graph_dim), META)


def align_view(zs: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Project spatial features into the graph-feature space."""
    return linear(zs, w, b)


def multi_head_attention(tokens: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int):
    """Scaled dot-product self-attention over (N, T, F) tokens.

    Returns the projected output (N, T, F) and the attention weights (N, heads, T, T).
    """
    n, t, f = tokens.shape
    dh = wq.shape[1] // heads

    def split(z):
        return transpose(reshape(z, (n, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(matmul(tokens, wq)), split(matmul(tokens, wk)), split(matmul(tokens, wv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)
    heads_out = transpose(matmul(weights, v), (0, 2, 1, 3))
    return matmul(reshape(heads_out, (n, t, heads * dh)), wo), weights


def _attn(p: Params, prefix: str):
    return tuple(p[f"{prefix}.attn.W{k}"] for k in ("q", "k", "v", "o"))


def cross_view_attention(zs_aligned: Tensor, zg: Tensor, p: Params, heads: int, prefix: str = "cvf",
                         return_weights: bool = False):
    """Z_delta: attention output at the spatial token of the 2-token sequence [Z~s, Zg]."""
    n, f = zg.shape
    tokens = concat([reshape(zs_aligned, (n, 1, f)), reshape(zg, (n, 1, f))], axis=1)
    out, weights = multi_head_attention(tokens, *_attn(p, prefix), heads)
    delta = getitem(out, (slice(None), 0))
    return (delta, weights) if return_weights else delta


def fuse(zs_aligned: Tensor, zg: Tensor, p: Params, heads: int, prefix: str = "cvf") -> Tensor:
    """Z_u = [Z~s + Z_delta ; Z_g], width 2F."""
    refined = add(zs_aligned, cross_view_attention(zs_aligned, zg, p, heads, prefix))
    return concat([refined, zg], axis=-1)
