"""The assembled network: graph + spatial encoders, fusion, adapter and head.

The forward pass is split at the META/BASE boundary. ``encode`` runs the
BASE part (encoders and view alignment) and ``head`` the META part
(attention, adapter, classifier), so an inner loop can re-run only ``head``
on fixed encoder features.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import backbone, cvf, fsa
from .config import ModelConfig
from .data import ElectrodeMap, FeatureSet, spatial_view
from .diffcore import BASE, META, ParamSet, RunningStats, Tensor

Features = tuple  # (zs_aligned, zg) with fusion, (zg,) without


@dataclass
class SubjectData:
    """A subject's features plus the precomputed conv-branch grids."""

    fs: FeatureSet
    grid: np.ndarray | None

    @property
    def subject(self) -> str:
        return self.fs.subject

    def batch(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.fs.x[idx], None if self.grid is None else self.grid[idx], self.fs.y[idx])


@dataclass
class Batch:
    x: np.ndarray
    grid: np.ndarray | None
    y: np.ndarray

    def __len__(self):
        return len(self.y)


def prepare(subjects, cfg: ModelConfig, emap: ElectrodeMap | None = None) -> list[SubjectData]:
    return [SubjectData(fs, spatial_view(fs, emap) if cfg.cvf else None) for fs in subjects]


class FaceModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ParamSet()
        self.stats: dict[str, RunningStats] = {}
        rng = np.random.default_rng(seed)
        backbone.init_dgcn(self.params, self.stats, rng, cfg.channels, cfg.bands, cfg.reduction, cfg.kernel,
                           cfg.gcn_bn_axes)
        if cfg.cvf:
            backbone.init_conv3(self.params, self.stats, rng, cfg.bands, cfg.conv_filters)
            cvf.init_fusion(self.params, rng, backbone.conv3_feature_dim(cfg.conv_filters), cfg.graph_dim, cfg.heads)
        if cfg.fsa:
            fsa.init_adapter(self.params, self.stats, rng, cfg.fused_dim, cfg.bottleneck)
        fsa.init_head(self.params, rng, cfg.fused_dim, cfg.classes)

    def meta_names(self) -> list[str]:
        return self.params.names(META)

    def base_names(self) -> list[str]:
        return self.params.names(BASE)

    def p(self, overrides: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
        out = self.params.as_dict()
        if overrides:
            out.update(overrides)
        return out

    def encode(self, x, grid, p: Mapping[str, Tensor], mode: str) -> Features:
        c = self.cfg
        zg = backbone.dgcn_encode(Tensor(x), p, self.stats, mode, c.gcn_bn_axes, c.sigma1, c.sigma2)
        if not c.cvf:
            return (zg,)
        zs = backbone.conv3_encode(Tensor(grid), p, self.stats, mode)
        return (cvf.align_view(zs, p["cvf.W_sg"], p["cvf.b_sg"]), zg)

    def head(self, feats: Features, p: Mapping[str, Tensor], mode: str) -> Tensor:
        c = self.cfg
        zu = cvf.fuse(feats[0], feats[1], p, c.heads) if c.cvf else feats[0]
        if c.fsa:
            zu = fsa.adapt(zu, p, self.stats, mode)
        return fsa.predict(zu, p)

    def forward(self, batch: Batch, p: Mapping[str, Tensor] | None = None, mode: str = "running") -> Tensor:
        p = p or self.p()
        return self.head(self.encode(batch.x, batch.grid, p, mode), p, mode)

    def clone(self) -> "FaceModel":
        out = FaceModel.__new__(FaceModel)
        out.cfg = self.cfg
        out.params = self.params.clone()
        out.stats = {k: v.copy() for k, v in self.stats.items()}
        return out

    # checkpoint: checkpoint.json plus one raw little-endian float32 file per array
    def save(self, path) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        entries, buffers = [], []
        for name, t in self.params.items():
            fname = f"param.{name}.f32"
            t.data.astype("<f4").tofile(root / fname)
            entries.append({"name": name, "shape": list(t.shape), "partition": self.params.tag(name), "file": fname})
        for name, st in self.stats.items():
            for part in ("mean", "var"):
                fname = f"stat.{name}.{part}.f32"
                getattr(st, part).astype("<f4").tofile(root / fname)
                buffers.append({"name": name, "part": part, "shape": list(st.mean.shape), "file": fname})
        doc = {"model": asdict(self.cfg), "params": entries, "buffers": buffers}
        (root / "checkpoint.json").write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, path) -> "FaceModel":
        root = Path(path)
        doc = json.loads((root / "checkpoint.json").read_text())
        model = cls(ModelConfig(**doc["model"]))
        values = {}
        for e in doc["params"]:
            arr = np.fromfile(root / e["file"], dtype="<f4")
            values[e["name"]] = arr.reshape(e["shape"])
            if model.params.tag(e["name"]) != e["partition"]:
                raise ValueError(f"{e['name']}: partition mismatch in checkpoint")
        model.params.assign(values)
        for b in doc["buffers"]:
            arr = np.fromfile(root / b["file"], dtype="<f4").astype(np.float64).reshape(b["shape"])
            setattr(model.stats[b["name"]], b["part"], arr)
        return model
