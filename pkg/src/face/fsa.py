"""Few-shot adapter: bottlenecked residual transform with interleaved batch norm, and the prediction head."""
from __future__ import annotations

import numpy as np

from .diffcore import META, ParamSet, Tensor, add, linear, relu
from .backbone import classify
from .nn import Params, add_bn, bn, glorot


def init_adapter(params: ParamSet, stats: dict, rng, width: int, bottleneck: int = 64, prefix: str = "fsa") -> None:
    if not 0 < bottleneck < width:
        raise ValueError(f"bottleneck {bottleneck} must be smaller than feature width {width}")
    params.add(f"{prefix}.W_down", rng.standard_normal((width, bottleneck)) * 0.01, META)
    params.add(f"{prefix}.b_down", np.zeros(bottleneck), META)
    add_bn(params, stats, f"{prefix}.bn1", (1, bottleneck), META)
    params.add(f"{prefix}.W_up", np.zeros((bottleneck, width)), META)
    params.add(f"{prefix}.b_up", np.zeros(width), META)
    add_bn(params, stats, f"{prefix}.bn2", (1, width), META)


def init_head(params: ParamSet, rng, width: int, num_classes: int, prefix: str = "head") -> None:
    params.add(f"{prefix}.W", glorot(rng, width, num_classes), META)
    params.add(f"{prefix}.b", np.zeros(num_classes), META)


def adapt(zu: Tensor, p: Params, stats, mode: str, prefix: str = "fsa") -> Tensor:
    """relu(BN(W_up relu(BN(W_down z)))) + z."""
    h = relu(bn(linear(zu, p[f"{prefix}.W_down"], p[f"{prefix}.b_down"]), p, stats, f"{prefix}.bn1", (0,), mode))
    h = relu(bn(linear(h, p[f"{prefix}.W_up"], p[f"{prefix}.b_up"]), p, stats, f"{prefix}.bn2", (0,), mode))
    return add(h, zu)


def predict(za: Tensor, p: Params, prefix: str = "head") -> Tensor:
    return classify(za, p[f"{prefix}.W"], p[f"{prefix}.b"])
