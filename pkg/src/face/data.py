"""DE-feature datasets: loading, synthesis, spatial projection and episode sampling.

Dataset directory layout::

    manifest.json
    <subject>.f32    little-endian float32, row-major N x C x B
    <subject>.u8     one label byte per sample

``manifest.json`` holds ``num_channels``, ``num_bands``, ``num_classes``,
``channels`` (channel-name order) and ``subjects``, a list of
``{"id", "num_samples", "features", "labels"}`` entries.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore.tensor import bilinear_matrix

GRID_SIZE = 32


class DataError(ValueError):
    """Malformed dataset, manifest or electrode map."""


class EpisodeError(ValueError):
    """Not enough samples to draw the requested support/query split."""


@dataclass
class FeatureSet:
    subject: str
    x: np.ndarray  # (N, C, B) float32
    y: np.ndarray  # (N,) int64
    num_classes: int
    channels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.x.ndim != 3:
            raise DataError(f"subject {self.subject}: features must be N x C x B, got {self.x.shape}")
        if len(self.y) != len(self.x) or len(self.y) < 1:
            raise DataError(f"subject {self.subject}: {len(self.x)} samples but {len(self.y)} labels")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise DataError(f"subject {self.subject}: labels outside [0, {self.num_classes})")
        if not np.all(np.isfinite(self.x)):
            bad = int(np.flatnonzero(~np.isfinite(self.x.reshape(-1)))[0])
            raise DataError(f"subject {self.subject}: non-finite value at flat offset {bad}")

    @property
    def n(self) -> int:
        return len(self.y)

    def class_indices(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.y == k)


@dataclass(frozen=True)
class ElectrodeMap:
    names: tuple[str, ...]
    rows: tuple[int, ...]
    cols: tuple[int, ...]
    height: int = 9
    width: int = 9

    def __post_init__(self):
        if not (len(self.names) == len(self.rows) == len(self.cols)):
            raise DataError("electrode map: ragged name/row/col lists")
        if len(set(self.names)) != len(self.names):
            raise DataError("electrode map: duplicate channel names")
        cells = list(zip(self.rows, self.cols))
        if len(set(cells)) != len(cells):
            raise DataError("electrode map: two channels share a grid cell")
        for n, r, c in zip(self.names, self.rows, self.cols):
            if not (0 <= r < self.height and 0 <= c < self.width):
                raise DataError(f"electrode map: {n} at ({r},{c}) outside {self.height}x{self.width}")

    def __len__(self):
        return len(self.names)

    @classmethod
    def from_json(cls, path_or_doc) -> "ElectrodeMap":
        doc = path_or_doc if isinstance(path_or_doc, dict) else json.loads(Path(path_or_doc).read_text())
        chans = doc["channels"]
        return cls(
            tuple(c["name"] for c in chans),
            tuple(int(c["row"]) for c in chans),
            tuple(int(c["col"]) for c in chans),
            int(doc.get("height", 9)),
            int(doc.get("width", 9)),
        )

    @classmethod
    def default(cls) -> "ElectrodeMap":
        text = resources.files("face").joinpath("resources/electrodes_62.json").read_text()
        return cls.from_json(json.loads(text))

    def subset(self, names: Sequence[str]) -> "ElectrodeMap":
        pos = {n: i for i, n in enumerate(self.names)}
        unknown = [n for n in names if n not in pos]
        if unknown:
            raise DataError(f"unknown channel names: {unknown}")
        idx = [pos[n] for n in names]
        return ElectrodeMap(
            tuple(names), tuple(self.rows[i] for i in idx), tuple(self.cols[i] for i in idx), self.height, self.width
        )

    def to_json(self) -> dict:
        return {
            "height": self.height,
            "width": self.width,
            "channels": [{"name": n, "row": r, "col": c} for n, r, c in zip(self.names, self.rows, self.cols)],
        }


def default_channels(c: int) -> tuple[str, ...]:
    """``c`` channel names spread evenly over the default 62-channel cap."""
    names = ElectrodeMap.default().names
    if c > len(names):
        raise DataError(f"at most {len(names)} channels have default positions, asked for {c}")
    idx = np.round(np.linspace(0, len(names) - 1, c)).astype(int)
    return tuple(names[i] for i in idx)


# ---------------------------------------------------------------------------
# dataset I/O


def load_features(path, electrode_map: ElectrodeMap | None = None) -> list[FeatureSet]:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"{root}: cannot read manifest.json ({e})") from None
    try:
        c, b, ncls = int(manifest["num_channels"]), int(manifest["num_bands"]), int(manifest["num_classes"])
        channels = tuple(manifest["channels"])
        subjects = manifest["subjects"]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{root}/manifest.json: missing or malformed field {e}") from None
    if len(channels) != c:
        raise DataError(f"manifest lists {len(channels)} channel names but num_channels={c}")
    emap = electrode_map or ElectrodeMap.default()
    unknown = [n for n in channels if n not in emap.names]
    if unknown:
        raise DataError(f"unknown channel names: {unknown}")

    out = []
    for entry in subjects:
        sid = str(entry["id"])
        n = int(entry["num_samples"])
        raw = np.fromfile(root / entry["features"], dtype="<f4")
        if raw.size != n * c * b:
            raise DataError(f"subject {sid}: expected {n}x{c}x{b}={n * c * b} values, file has {raw.size}")
        labels = np.fromfile(root / entry["labels"], dtype=np.uint8)
        if labels.size != n:
            raise DataError(f"subject {sid}: expected {n} labels, file has {labels.size}")
        bad = np.flatnonzero(~np.isfinite(raw))
        if bad.size:
            raise DataError(f"subject {sid}: non-finite value at flat offset {int(bad[0])}")
        out.append(FeatureSet(sid, raw.reshape(n, c, b).astype(np.float32), labels.astype(np.int64), ncls, channels))
    return out


def save_features(path, subjects: Sequence[FeatureSet]) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if not subjects:
        raise DataError("nothing to save")
    first = subjects[0]
    entries = []
    for fs in subjects:
        fs.x.astype("<f4").tofile(root / f"{fs.subject}.f32")
        fs.y.astype(np.uint8).tofile(root / f"{fs.subject}.u8")
        entries.append(
            {"id": fs.subject, "num_samples": fs.n, "features": f"{fs.subject}.f32", "labels": f"{fs.subject}.u8"}
        )
    manifest = {
        "num_channels": first.x.shape[1],
        "num_bands": first.x.shape[2],
        "num_classes": first.num_classes,
        "channels": list(first.channels),
        "subjects": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))


# ---------------------------------------------------------------------------
# synthetic data


def synth_generate(
    num_subjects: int,
    samples_per_class: int,
    c: int,
    C: int,
    B: int,
    shift_strength: float,
    seed: int,
    separation: float = 0.15,
    noise: float = 1.0,
    mixing: float = 1.0,
) -> list[FeatureSet]:
    """Multi-subject DE-like features with a controllable subject shift.

    All subjects share the class prototypes. A subject maps a clean sample
    ``z`` (prototype plus isotropic noise) to ``A_s z + s*b_s`` with
    ``A_s = diag(exp(0.3*s*g_s)) + s*mixing*G_s P``, where ``P`` projects onto
    the prototype subspace, ``G_s`` scatters that subspace along random
    subject-specific directions and ``s`` is ``shift_strength``. The shift is
    therefore class-dependent but low-rank, and at ``s = 0`` every subject
    shares one distribution.
    """
    if min(num_subjects, samples_per_class, c, C, B) < 1:
        raise ValueError("all counts must be positive")
    if shift_strength < 0:
        raise ValueError("shift_strength must be >= 0")
    f = C * B
    root = np.random.default_rng(seed)
    protos = root.standard_normal((c, f)) * separation
    basis = np.linalg.qr(protos.T)[0]  # f x c
    channels = default_channels(C)
    s = float(shift_strength)
    out = []
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(num_subjects)):
        rng = np.random.default_rng(child)
        gain = np.exp(s * 0.3 * rng.standard_normal(f))
        scatter = rng.standard_normal((f, c)) / np.sqrt(c)
        offset = rng.standard_normal(f)
        y = np.repeat(np.arange(c), samples_per_class)
        z = protos[y] + noise * rng.standard_normal((len(y), f))
        x = z * gain + s * mixing * (z @ basis) @ scatter.T + s * offset
        order = rng.permutation(len(y))
        out.append(
            FeatureSet(f"s{i:02d}", x[order].reshape(-1, C, B).astype(np.float32), y[order].astype(np.int64), c, channels)
        )
    return out


# ---------------------------------------------------------------------------
# spatial view


def spatial_project(x: np.ndarray, emap: ElectrodeMap) -> np.ndarray:
    """(..., C, B) channel features -> (..., B, H, W) grids; unmapped cells are zero."""
    if x.shape[-2] != len(emap):
        raise DataError(f"features have {x.shape[-2]} channels, electrode map has {len(emap)}")
    lead = x.shape[:-2]
    out = np.zeros(lead + (x.shape[-1], emap.height, emap.width), dtype=x.dtype)
    out[..., np.asarray(emap.rows), np.asarray(emap.cols)] = np.swapaxes(x, -1, -2)
    return out


def unproject(grid: np.ndarray, emap: ElectrodeMap) -> np.ndarray:
    """Inverse lookup of ``spatial_project``: (..., B, H, W) -> (..., C, B)."""
    return np.swapaxes(grid[..., np.asarray(emap.rows), np.asarray(emap.cols)], -1, -2)


def resize_grid(g: np.ndarray, size: int = GRID_SIZE) -> np.ndarray:
    """Corner-aligned bilinear resize of (..., 9, 9) grids to (..., size, size)."""
    if g.shape[-2:] != (9, 9):
        raise DataError(f"resize_grid expects 9x9 grids, got {g.shape[-2:]}")
    m = bilinear_matrix(9, size)
    return (m @ g.astype(np.float64) @ m.T).astype(g.dtype)


def spatial_view(fs: FeatureSet, emap: ElectrodeMap | None = None) -> np.ndarray:
    """Conv-branch input for every sample: (N, B, 32, 32)."""
    emap = emap or ElectrodeMap.default()
    if fs.channels:
        emap = emap.subset(fs.channels)
    return resize_grid(spatial_project(fs.x, emap))


# ---------------------------------------------------------------------------
# episodes and splits


@dataclass(frozen=True)
class Episode:
    subject: str
    support: np.ndarray
    query: np.ndarray


@dataclass(frozen=True)
class LosoSplit:
    target: str
    sources: tuple[str, ...]


def _balanced_quota(avail: list[int], q: int) -> list[int]:
    c = len(avail)
    quota = [q // c + (1 if k < q % c else 0) for k in range(c)]
    quota = [min(a, t) for a, t in zip(avail, quota)]
    short = q - sum(quota)
    while short > 0:
        moved = False
        for k in range(c):
            if short and quota[k] < avail[k]:
                quota[k] += 1
                short -= 1
                moved = True
        if not moved:
            break
    return quota


def sample_episode(fs: FeatureSet, K: int, Q: int | None, seed) -> Episode:
    """K support samples per class plus Q query samples (None = all remaining)."""
    if K < 1:
        raise EpisodeError("support needs K >= 1 samples per class")
    rng = np.random.default_rng(seed)
    support, pools = [], []
    for k in range(fs.num_classes):
        idx = fs.class_indices(k)
        if len(idx) < K:
            raise EpisodeError(f"subject {fs.subject}: class {k} has {len(idx)} samples, need K={K}")
        idx = rng.permutation(idx)
        support.append(idx[:K])
        pools.append(idx[K:])
    remaining = sum(len(p) for p in pools)
    if Q is None:
        query = np.concatenate(pools)
    else:
        if remaining < Q:
            raise EpisodeError(f"subject {fs.subject}: {remaining} samples left after support, need Q={Q}")
        quota = _balanced_quota([len(p) for p in pools], Q)
        query = np.concatenate([p[:t] for p, t in zip(pools, quota)])
    return Episode(fs.subject, np.sort(np.concatenate(support)), np.sort(query))


def loso_splits(subject_ids: Sequence[str]) -> list[LosoSplit]:
    ids = list(subject_ids)
    if len(ids) < 2:
        raise ValueError(f"leave-one-subject-out needs >= 2 subjects, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")
    return [LosoSplit(t, tuple(s for s in ids if s != t)) for t in ids]
