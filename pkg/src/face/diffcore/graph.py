"""Graph-level entry points: build, evaluate and differentiate a computation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tensor, _topo, backward_grads


class GraphError(RuntimeError):
    pass


@dataclass
class OpRecord:
    op: str
    inputs: tuple[int, ...]
    output: Tensor


@dataclass
class CompGraph:
    """A named-input computation recorded in evaluation order.

    ``fn`` receives the bound input tensors as keyword arguments and returns
    the output tensor. After ``forward`` the ``records`` list holds the op
    records in a valid topological order, and ``leaves`` maps input names to
    their tensors.
    """

    fn: Callable[..., Tensor]
    input_names: tuple[str, ...]
    records: list[OpRecord] = field(default_factory=list)
    leaves: dict[str, Tensor] = field(default_factory=dict)
    output: Tensor | None = None

    def __post_init__(self):
        self.input_names = tuple(self.input_names)


def forward(graph: CompGraph, inputs: Mapping[str, object]) -> Tensor:
    missing = [n for n in graph.input_names if n not in inputs]
    if missing:
        raise GraphError(f"unbound leaf inputs: {missing}")
    leaves = {}
    for name in graph.input_names:
        v = inputs[name]
        t = Tensor(v.data if isinstance(v, Tensor) else v, requires_grad=True, name=name)
        leaves[name] = t
    out = graph.fn(**leaves)
    graph.leaves = leaves
    graph.output = out
    graph.records = [
        OpRecord(node.op, tuple(p.id for p in node.parents), node) for node in _topo(out) if not node.is_leaf
    ]
    return out


def grad(graph: CompGraph, wrt: Sequence[str], create_graph: bool = True) -> dict[str, Tensor]:
    if graph.output is None:
        raise GraphError("forward() has not been evaluated on this graph")
    unknown = [n for n in wrt if n not in graph.leaves]
    if unknown:
        raise GraphError(f"unknown parameter names: {unknown}")
    gs = backward_grads(graph.output, [graph.leaves[n] for n in wrt], create_graph=create_graph)
    return dict(zip(wrt, gs))


@dataclass(frozen=True)
class InnerUpdate:
    """One recorded substitution ``param -> param - alpha * grad``."""

    name: str
    original: Tensor
    adapted: Tensor


def _depends_on(node: Tensor, target: Tensor) -> bool:
    # depth-first with early exit; first parents are visited first, which follows
    # the chain of "p - alpha * g" updates straight back to the original
    seen, stack = set(), [node]
    while stack:
        n = stack.pop()
        if n is target:
            return True
        if n.id in seen or not n.requires_grad:
            continue
        seen.add(n.id)
        stack.extend(reversed(n.parents))
    return False


def grad_through_update(
    loss_outer: Tensor,
    inner_updates: Sequence[InnerUpdate],
    wrt: Mapping[str, Tensor],
) -> dict[str, Tensor]:
    """d(loss_outer)/d(wrt), including the paths through the inner updates.

    Each adapted tensor must still be connected to its original parameter;
    a detached update (first-order shortcut or numpy arithmetic) is an error.
    """
    for upd in inner_updates:
        if upd.adapted is upd.original:
            continue
        if not _depends_on(upd.adapted, upd.original):
            raise GraphError(f"inner update for {upd.name!r} is not recorded on the graph")
    if loss_outer.size != 1:
        raise GraphError(f"outer loss must be scalar, got shape {loss_outer.shape}")
    names = list(wrt)
    gs = backward_grads(loss_outer, [wrt[n] for n in names], create_graph=False)
    return dict(zip(names, gs))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. ``arr`` (mutated in place and restored)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g
