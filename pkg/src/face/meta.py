"""Two-stage optimisation: supervised pretraining, then episodic bi-level meta-training.

The inner loop takes plain gradient steps on the META parameters only (on a
differentiable graph unless first-order mode is selected); the outer loop
differentiates the summed query losses w.r.t. every parameter through those
inner steps and applies an Adam update.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import smooth_cross_entropy
from .config import MetaConfig
from .data import sample_episode
from .diffcore import Adam, InnerUpdate, Tensor, backward_grads, grad_through_update, mul, no_grad, sub
from .model import Batch, FaceModel, SubjectData

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class MetaState:
    model: FaceModel
    optimizer: Adam
    episode: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list = field(default_factory=list)


def _check_finite(where: str, values: dict[str, np.ndarray]) -> None:
    bad = [n for n, v in values.items() if not np.all(np.isfinite(v))]
    if bad:
        raise TrainingDiverged(f"{where}: non-finite values in {bad[:5]}{'...' if len(bad) > 5 else ''}")


def pretrain(model: FaceModel, sources: Sequence[SubjectData], cfg: MetaConfig, epochs: int | None = None,
             rate: float | None = None, seed: int | None = None, on_batch=None) -> MetaState:
    """Supervised training on the pooled source subjects (smoothed cross-entropy, Adam).

    ``on_batch`` is called with every training batch (used by protocol audits).
    """
    if not sources:
        raise ValueError("pretraining needs at least one source subject")
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    opt = Adam(cfg.pretrain_lr if rate is None else rate)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    pool = [(sd, i) for sd in sources for i in range(sd.fs.n)]
    names = list(model.params)
    for epoch in range(epochs):
        order = rng.permutation(len(pool))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            chunk = order[lo : lo + cfg.batch_size]
            if len(chunk) < 2:
                continue  # batch statistics need two samples
            batch = _pooled_batch(pool, chunk)
            if on_batch is not None:
                on_batch(batch)
            p = model.p()
            loss = smooth_cross_entropy(model.forward(batch, p, "train"), batch.y, cfg.label_smoothing)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"pretraining loss became {loss.item()} in epoch {epoch}")
            gs = backward_grads(loss, [p[n] for n in names])
            new = opt.step(model.params.snapshot(), {n: g.data for n, g in zip(names, gs)})
            _check_finite("pretrain", new)
            model.params.assign(new)
            losses.append(loss.item())
        log.info("pretrain epoch %d/%d loss %.4f", epoch + 1, epochs, float(np.mean(losses)) if losses else np.nan)
    return MetaState(model, Adam(cfg.beta), rng=np.random.default_rng(rng.integers(2**63)))


def _pooled_batch(pool, chunk) -> Batch:
    by_subject: dict[int, tuple[SubjectData, list]] = {}
    order = []
    for j in chunk:
        sd, i = pool[j]
        by_subject.setdefault(id(sd), (sd, []))[1].append(i)
        order.append((id(sd), i))
    xs, gs, ys = [], [], []
    for sd, idx in by_subject.values():
        b = sd.batch(idx)
        xs.append(b.x)
        gs.append(b.grid)
        ys.append(b.y)
    return Batch(np.concatenate(xs), None if gs[0] is None else np.concatenate(gs), np.concatenate(ys))


def inner_update(model: FaceModel, support: Batch, alpha: float, steps: int, params=None,
                 create_graph: bool = True, eps: float = 0.1, feats=None):
    """``steps`` gradient-descent steps on the META parameters over the support batch.

    Returns the full parameter mapping (BASE entries are the untouched
    originals), the support features, and one ``InnerUpdate`` per META name.
    """
    if len(support) == 0:
        raise ValueError("support set is empty")
    p = dict(params or model.p())
    start = {n: p[n] for n in model.meta_names()}
    if feats is None:
        feats = model.encode(support.x, support.grid, p, "batch")
    names = model.meta_names()
    for _ in range(steps):
        loss = smooth_cross_entropy(model.head(feats, p, "batch"), support.y, eps)
        gs = backward_grads(loss, [p[n] for n in names], create_graph=create_graph, independent=True)
        for n, g in zip(names, gs):
            p[n] = sub(p[n], mul(g, alpha))
    updates = [InnerUpdate(n, start[n], p[n]) for n in names]
    return p, feats, updates


def outer_gradients(model: FaceModel, episodes: Sequence[tuple[Batch, Batch]], cfg: MetaConfig) -> dict[str, np.ndarray]:
    """Gradient of the summed post-adaptation query losses w.r.t. all parameters."""
    base = model.p()
    total, updates = None, []
    for support, query in episodes:
        adapted, _, ups = inner_update(model, support, cfg.alpha, cfg.inner_steps, base,
                                       create_graph=cfg.second_order, eps=cfg.label_smoothing)
        updates.extend(ups)
        qfeats = model.encode(query.x, query.grid, adapted, "batch")
        loss = smooth_cross_entropy(model.head(qfeats, adapted, "batch"), query.y, cfg.label_smoothing)
        total = loss if total is None else total + loss
    if not cfg.second_order:
        updates = []
    gs = grad_through_update(total, updates, base)
    out = {n: g.data for n, g in gs.items()}
    _check_finite("outer gradient", out)
    return out


def outer_update(state: MetaState, episodes: Sequence[tuple[Batch, Batch]], cfg: MetaConfig) -> dict[str, np.ndarray]:
    grads = outer_gradients(state.model, episodes, cfg)
    state.optimizer.lr = cfg.beta
    new = state.optimizer.step(state.model.params.snapshot(), grads)
    _check_finite("outer update", new)
    state.model.params.assign(new)
    return grads


def sample_task(sd: SubjectData, shots: int, query: int, rng: np.random.Generator) -> tuple[Batch, Batch]:
    ep = sample_episode(sd.fs, shots, query, int(rng.integers(2**63)))
    return sd.batch(ep.support), sd.batch(ep.query)


def meta_train(state: MetaState, sources: Sequence[SubjectData], cfg: MetaConfig, episodes: int | None = None,
               on_episode=None) -> MetaState:
    """Bi-level meta-training for ``cfg.episodes`` episodes of ``cfg.subjects_per_episode`` subjects."""
    n_ep = cfg.episodes if episodes is None else episodes
    n = min(cfg.subjects_per_episode, len(sources))
    log.info("meta-train: alpha=%g beta=%g steps=%d subjects/episode=%d episodes=%d shots=%d query=%d",
             cfg.alpha, cfg.beta, cfg.inner_steps, n, n_ep, cfg.shots, cfg.query)
    for _ in range(n_ep):
        picks = state.rng.choice(len(sources), size=n, replace=False)
        tasks = []
        for i in picks:
            support, query = sample_task(sources[i], cfg.shots, cfg.query, state.rng)
            tasks.append((support, query))
            if on_episode is not None:
                on_episode(sources[i].subject, support, query)
        outer_update(state, tasks, cfg)
        state.episode += 1
    return state


@dataclass
class AdaptedModel:
    model: FaceModel
    params: dict[str, Tensor]

    def predict_proba(self, batch: Batch, bn_mode: str = "batch") -> np.ndarray:
        with no_grad():
            return self.model.forward(batch, self.params, bn_mode).data

    def accuracy(self, batch: Batch, bn_mode: str = "batch") -> float:
        return float(np.mean(self.predict_proba(batch, bn_mode).argmax(axis=1) == batch.y))


def test_adapt(model: FaceModel, support: Batch, alpha: float, steps: int, eps: float = 0.1) -> AdaptedModel:
    """Target-subject adaptation: inner-loop steps on the support set, no outer step."""
    if len(support) == 0:
        raise ValueError("support set is empty")
    with no_grad():
        feats = model.encode(support.x, support.grid, model.p(), "batch")
    p, _, _ = inner_update(model, support, alpha, steps, create_graph=False, eps=eps, feats=feats)
    return AdaptedModel(model, {n: Tensor(t.data) for n, t in p.items()})
