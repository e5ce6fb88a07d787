"""Shared layer helpers: batch-norm modes and parameter initialisation."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .diffcore import ParamSet, RunningStats, Tensor, batch_norm, relu, sigmoid, tanh

# BN modes: "train" = batch stats + running update, "batch" = batch stats only,
# "running" = stored statistics (pure inference).
BN_MODES = ("train", "batch", "running")

ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}

Params = Mapping[str, Tensor]


def add_bn(params: ParamSet, stats: dict, name: str, shape, tag: str) -> None:
    params.add(f"{name}.gamma", np.ones(shape), tag)
    params.add(f"{name}.beta", np.zeros(shape), tag)
    stats[name] = RunningStats(shape)


def bn(x: Tensor, p: Params, stats: Mapping[str, RunningStats], name: str, axes, mode: str) -> Tensor:
    if mode not in BN_MODES:
        raise ValueError(f"unknown batch-norm mode {mode!r}")
    return batch_norm(
        x,
        p[f"{name}.gamma"],
        p[f"{name}.beta"],
        axes,
        stats=stats.get(name),
        training=mode != "running",
        update_stats=mode == "train",
    )


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def he(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
