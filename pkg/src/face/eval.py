"""Leave-one-subject-out evaluation, repeated-trial statistics and significance tests."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import betainc

from .config import RunConfig
from .data import ElectrodeMap, FeatureSet, loso_splits, sample_episode
from .diffcore import Adam
from .meta import AdaptedModel, MetaState, meta_train, pretrain, test_adapt
from .model import FaceModel, prepare

log = logging.getLogger(__name__)


class ProtocolError(AssertionError):
    """Support/query overlap or target-subject leakage."""


class LosoAborted(RuntimeError):
    """A LOSO run failed part-way; ``reports`` holds every trial completed so far."""

    def __init__(self, message: str, reports: dict):
        super().__init__(message)
        self.reports = reports


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class TrialResult:
    subject: str
    seed: int
    shots: int
    accuracy: float
    correct: int
    total: int
    baseline_accuracy: float | None = None


@dataclass
class RunReport:
    shots: int
    config: dict
    trials: list[TrialResult] = field(default_factory=list)
    label: str = "face"

    def subjects(self) -> list[str]:
        seen = []
        for t in self.trials:
            if t.subject not in seen:
                seen.append(t.subject)
        return seen

    def per_subject(self, key: str = "accuracy") -> dict[str, tuple[float, float]]:
        out = {}
        for s in self.subjects():
            v = np.array([getattr(t, key) for t in self.trials if t.subject == s], dtype=np.float64)
            out[s] = (float(v.mean()), float(v.std()))
        return out

    def subject_means(self, key: str = "accuracy") -> np.ndarray:
        return np.array([m for m, _ in self.per_subject(key).values()])

    @property
    def grand_mean(self) -> float:
        m = self.subject_means()
        return float(m.mean()) if m.size else float("nan")

    @property
    def grand_std(self) -> float:
        m = self.subject_means()
        return float(m.std()) if m.size else float("nan")

    @property
    def pooled_mean(self) -> float:
        return float(np.mean([t.accuracy for t in self.trials])) if self.trials else float("nan")

    @property
    def baseline_mean(self) -> float | None:
        if not self.trials or any(t.baseline_accuracy is None for t in self.trials):
            return None
        return float(self.subject_means("baseline_accuracy").mean())

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "shots": self.shots,
            "summary": {
                "grand_mean": _num(self.grand_mean),
                "grand_std": _num(self.grand_std),
                "pooled_mean": _num(self.pooled_mean),
                "baseline_mean": self.baseline_mean,
                "per_subject": {s: {"mean": m, "std": sd} for s, (m, sd) in self.per_subject().items()},
            },
            "config": self.config,
            "trials": [asdict(t) for t in self.trials],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunReport":
        return cls(int(doc["shots"]), doc.get("config", {}), [TrialResult(**t) for t in doc["trials"]],
                   doc.get("label", "face"))


def _num(x: float):
    return None if x != x else x


# ---------------------------------------------------------------------------
# protocol audit


@dataclass
class ProtocolAudit:
    """Records which subjects and samples fed training for each split, and every trial's split.

    Leakage is checked both by subject id and by content: every training
    sample row is fingerprinted and compared against the held-out subject's rows.
    """

    training: dict[str, set] = field(default_factory=dict)
    trials: int = 0
    overlaps: int = 0
    leaks: list = field(default_factory=list)
    rows_seen: int = 0
    _targets: dict[str, set] = field(default_factory=dict, repr=False)

    @staticmethod
    def _fingerprints(x: np.ndarray) -> set:
        x = np.ascontiguousarray(x)
        return {r.tobytes() for r in x.reshape(len(x), int(np.prod(x.shape[1:])))}

    def register_target(self, target: str, x: np.ndarray) -> None:
        self._targets[target] = self._fingerprints(x)

    def record_training(self, target: str, subject: str) -> None:
        self.training.setdefault(target, set()).add(subject)
        if subject == target:
            self.leaks.append((target, subject))

    def record_batch(self, target: str, x: np.ndarray) -> None:
        self.rows_seen += len(x)
        hits = self._fingerprints(x) & self._targets.get(target, set())
        if hits:
            self.leaks.append((target, f"{len(hits)} sample rows"))

    def record_trial(self, target: str, support: np.ndarray, query: np.ndarray) -> None:
        self.trials += 1
        if np.intersect1d(support, query).size:
            self.overlaps += 1

    @property
    def clean(self) -> bool:
        return self.overlaps == 0 and not self.leaks


# ---------------------------------------------------------------------------
# LOSO


def _trial(model, pre_model, target, k: int, seed: int, cfg: RunConfig, audit) -> TrialResult:
    ep = sample_episode(target.fs, k, None, seed)
    if np.intersect1d(ep.support, ep.query).size:
        raise ProtocolError(f"subject {target.subject}: support and query overlap")
    if audit is not None:
        audit.record_trial(target.subject, ep.support, ep.query)
    query = target.batch(ep.query)
    adapted = test_adapt(model, target.batch(ep.support), cfg.meta.alpha, cfg.meta.inner_steps,
                         cfg.meta.label_smoothing)
    pred = adapted.predict_proba(query, cfg.eval.query_bn).argmax(axis=1)
    correct = int(np.sum(pred == query.y))
    baseline = None
    if pre_model is not None:
        baseline = AdaptedModel(pre_model, pre_model.p()).accuracy(query, cfg.eval.query_bn)
    return TrialResult(target.subject, seed, k, correct / len(query), correct, len(query), baseline)


def run_loso_sweep(dataset: Sequence[FeatureSet], cfg: RunConfig, shots: Sequence[int] | None = None,
                   audit: ProtocolAudit | None = None, label: str = "face", emap: ElectrodeMap | None = None,
                   retrain_per_shot: bool = True, baseline_shots: Sequence[int] | None = None) -> dict[int, RunReport]:
    """LOSO over every subject for each K in ``shots``; pretraining is shared across K.

    With ``retrain_per_shot`` meta-training is repeated with K-shot episodes
    for every K, otherwise one meta-trained model (at ``cfg.meta.shots``) is
    evaluated at every K. The pretrain-only baseline is scored on the same
    query sets for the K values in ``baseline_shots`` (default: all).
    """
    shots = list(shots or [cfg.eval.shots])
    subjects = prepare(dataset, cfg.model, emap)
    ids = [s.subject for s in subjects]
    by_id = dict(zip(ids, subjects))
    reports = {k: RunReport(k, cfg.to_dict() | {"shots": k}, label=label) for k in shots}
    for si, split in enumerate(loso_splits(ids)):
        try:
            _run_split(si, split, by_id, shots, reports, cfg, audit, retrain_per_shot, baseline_shots)
        except Exception as e:
            raise LosoAborted(f"LOSO aborted at target {split.target}: {e}", reports) from e
    return reports


def _run_split(si, split, by_id, shots, reports, cfg: RunConfig, audit, retrain_per_shot, baseline_shots):
    base = cfg.eval.seed
    target = by_id[split.target]
    sources = [by_id[s] for s in split.sources]
    on_batch = None
    if audit is not None:
        audit.register_target(split.target, target.fs.x)
        for s in split.sources:
            audit.record_training(split.target, s)
        on_batch = lambda b, _t=split.target: audit.record_batch(_t, b.x)  # noqa: E731
    model = FaceModel(cfg.model, seed=derive_seed(base, si, 1_000_001))
    state = pretrain(model, sources, cfg.meta, seed=derive_seed(base, si, 1_000_002), on_batch=on_batch)
    pre_model = model.clone()
    trained = {}
    for k in shots:
        meta_shots = k if retrain_per_shot else cfg.meta.shots
        if meta_shots not in trained:
            st = _fresh_state(state, pre_model)
            hook = None
            if audit is not None:
                def hook(subject, support, query, _t=split.target):
                    audit.record_training(_t, subject)
                    audit.record_batch(_t, support.x)
                    audit.record_batch(_t, query.x)
            meta_train(st, sources, _replace_shots(cfg.meta, meta_shots), on_episode=hook)
            trained[meta_shots] = st.model
        meta_model = trained[meta_shots]
        seeds = [derive_seed(base, si, t) for t in range(cfg.eval.repeats)]
        ref = pre_model if baseline_shots is None or k in baseline_shots else None
        run = lambda sd: _trial(meta_model, ref, target, k, sd, cfg, audit)  # noqa: E731
        if cfg.eval.workers > 1:
            with ThreadPoolExecutor(cfg.eval.workers) as pool:
                results = list(pool.map(run, seeds))
        else:
            results = [run(sd) for sd in seeds]
        reports[k].trials.extend(results)
        log.info("split %s K=%d: mean acc %.4f", split.target, k, np.mean([r.accuracy for r in results]))


def _fresh_state(state, pre_model):
    return MetaState(pre_model.clone(), Adam(state.optimizer.lr), rng=np.random.default_rng(state.rng.integers(2**63)))


def _replace_shots(meta, k):
    return replace(meta, shots=k)


def run_loso(dataset: Sequence[FeatureSet], cfg: RunConfig, audit: ProtocolAudit | None = None,
             label: str = "face", emap: ElectrodeMap | None = None, baseline: bool = True) -> RunReport:
    k = cfg.eval.shots
    return run_loso_sweep(dataset, cfg, [k], audit, label, emap, baseline_shots=None if baseline else ())[k]


ABLATIONS = ((True, True), (True, False), (False, True), (False, False))


def switch_label(cvf: bool, fsa: bool) -> str:
    return f"cvf={'on' if cvf else 'off'},fsa={'on' if fsa else 'off'}"


def ablation_run(dataset, cfg: RunConfig, switches=ABLATIONS, audit=None, emap=None) -> dict[str, RunReport]:
    """One LOSO report per (cvf, fsa) switch combination."""
    out = {}
    for cvf_on, fsa_on in switches:
        name = switch_label(cvf_on, fsa_on)
        out[name] = run_loso(dataset, cfg.with_(model={"cvf": cvf_on, "fsa": fsa_on}), audit, name, emap,
                             baseline=False)
    return out


def sweep_heads(dataset, cfg: RunConfig, heads=(1, 2, 5), emap=None) -> dict[str, RunReport]:
    out = {}
    for h in heads:
        out[f"heads={h}"] = run_loso(dataset, cfg.with_(model={"heads": h}), label=f"heads={h}", emap=emap)
    return out


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    mean_diff: float


def t_sf_two_sided(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test over subject-paired accuracies.

    Zero-variance differences give p = 0 when the mean difference is nonzero
    and p = 1 otherwise.
    """
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    md = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if md == 0.0:
            return TTestResult(0.0, 1.0, n - 1, md)
        return TTestResult(math.copysign(math.inf, md), 0.0, n - 1, md)
    t = md / (sd / math.sqrt(n))
    return TTestResult(t, t_sf_two_sided(t, n - 1), n - 1, md)


def compare_reports(a: RunReport, b: RunReport) -> TTestResult:
    pa, pb = a.per_subject(), b.per_subject()
    common = [s for s in pa if s in pb]
    return paired_ttest([pa[s][0] for s in common], [pb[s][0] for s in common])


# ---------------------------------------------------------------------------
# serialisation

CSV_FIELDS = ["row", "subject", "seed", "shots", "accuracy", "correct", "total", "baseline_accuracy", "std"]


def emit_report(report: RunReport, path, fmt: str = "json") -> None:
    path = Path(path)
    try:
        if fmt == "json":
            path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        elif fmt == "csv":
            path.write_text(report_csv(report))
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e.strerror or e}") from e


def report_csv(report: RunReport) -> str:
    buf = io.StringIO()
    buf.write(f"# label={report.label} shots={report.shots}\n")
    w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for t in report.trials:
        w.writerow({"row": "trial", **asdict(t)})
    for s, (m, sd) in report.per_subject().items():
        w.writerow({"row": "subject", "subject": s, "shots": report.shots, "accuracy": m, "std": sd})
    if report.trials:
        w.writerow({"row": "grand", "shots": report.shots, "accuracy": report.grand_mean, "std": report.grand_std})
    return buf.getvalue()


def load_report(path) -> RunReport:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".csv":
        lines = text.splitlines()
        meta = dict(kv.split("=", 1) for kv in lines[0].lstrip("# ").split())
        trials = []
        for row in csv.DictReader(lines[1:]):
            if row["row"] != "trial":
                continue
            base = row["baseline_accuracy"]
            trials.append(TrialResult(row["subject"], int(row["seed"]), int(row["shots"]), float(row["accuracy"]),
                                      int(row["correct"]), int(row["total"]), float(base) if base else None))
        return RunReport(int(meta["shots"]), {}, trials, meta.get("label", "face"))
    return RunReport.from_dict(json.loads(text))
