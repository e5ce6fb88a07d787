"""Command-line entry point: ``face <subcommand> ...``.

Every failure is reported as one JSON object on stderr
(``{"error": <kind>, "message": <text>}``) with a nonzero exit status.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import FULL_RUN_REPEATS, RunConfig
from .data import DataError, ElectrodeMap, load_features, save_features, synth_generate
from .eval import (LosoAborted, ProtocolAudit, RunReport, ablation_run, compare_reports, emit_report, load_report,
                   run_loso, sweep_heads)
from .meta import MetaState, meta_train, pretrain
from .diffcore import Adam
from .model import FaceModel, prepare

log = logging.getLogger("face")

EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 2, 3, 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_RUNTIME):
        super().__init__(message)
        self.kind, self.code = kind, code


def _on_off(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected 'on' or 'off', got {v!r}")
    return v == "on"


def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="face", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-subject dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--subjects", type=_positive, default=6)
    p.add_argument("--samples", type=_positive, default=200, help="samples per class per subject")
    p.add_argument("--classes", type=_positive, default=3)
    p.add_argument("--channels", type=_positive, default=62)
    p.add_argument("--bands", type=_positive, default=5)
    p.add_argument("--shift", type=float, default=1.0, help="subject shift strength")
    p.add_argument("--seed", type=int, default=0)

    def run_opts(p, out_help):
        p.add_argument("--data", required=True, help="dataset directory (manifest.json + raw arrays)")
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--electrode-map", help="JSON electrode map (default: bundled 62-channel map)")
        p.add_argument("--seed", type=int, help="base seed for model init, training and trials")
        p.add_argument("--cvf", type=_on_off, help="cross-view fusion on/off")
        p.add_argument("--fsa", type=_on_off, help="feature-space adapter on/off")
        p.add_argument("--second-order", type=_on_off, help="exact second-order outer gradients on/off")
        p.add_argument("--out", required=True, help=out_help)

    for name, helptext in (("pretrain", "supervised pretraining on pooled subjects"),
                           ("meta-train", "episodic meta-training from a checkpoint")):
        p = sub.add_parser(name, help=helptext)
        run_opts(p, "checkpoint directory to write")
        p.add_argument("--holdout", action="append", default=[], help="subject id to exclude (repeatable)")
        if name == "meta-train":
            p.add_argument("--checkpoint", required=True, help="pretrained checkpoint directory")

    for name, helptext, out_help in (
        ("evaluate", "leave-one-subject-out evaluation", "report file"),
        ("ablate", "LOSO for every cvf/fsa combination", "directory for one report per combination"),
        ("sweep-heads", "LOSO for 1, 2 and 5 attention heads", "directory for one report per head count"),
    ):
        p = sub.add_parser(name, help=helptext)
        run_opts(p, out_help)
        p.add_argument("--shots", type=_positive, help="support samples per class (K)")
        p.add_argument("--repeats", type=_positive, help="trials per target subject (R)")
        p.add_argument("--full-run", action="store_true", help=f"R = {FULL_RUN_REPEATS} unless --repeats is given")
        p.add_argument("--format", choices=("json", "csv"), default="json")

    p = sub.add_parser("report", help="summarise reports; two reports also get a paired t-test")
    p.add_argument("reports", nargs="+", help="report files (json or csv)")
    p.add_argument("--format", choices=("json", "csv"), default="json", help="format for --out")
    p.add_argument("--out", help="write the (first) report re-serialised here")
    return ap


# ---------------------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    model, meta, ev = {}, {}, {}
    if args.seed is not None:
        meta["seed"] = ev["seed"] = args.seed
    if args.cvf is not None:
        model["cvf"] = args.cvf
    if args.fsa is not None:
        model["fsa"] = args.fsa
    if args.second_order is not None:
        meta["second_order"] = args.second_order
    if getattr(args, "shots", None) is not None:
        ev["shots"] = args.shots
    if getattr(args, "repeats", None) is not None:
        ev["repeats"] = args.repeats
    elif getattr(args, "full_run", False):
        ev["repeats"] = FULL_RUN_REPEATS
    return cfg.with_(model=model, meta=meta, eval=ev)


def _dataset(args):
    emap = ElectrodeMap.from_json(args.electrode_map) if args.electrode_map else None
    subjects = load_features(args.data, emap)
    return subjects, emap


def _check_dims(cfg: RunConfig, subjects) -> RunConfig:
    x = subjects[0].x
    fix = {"channels": x.shape[1], "bands": x.shape[2], "classes": subjects[0].num_classes}
    changed = {k: v for k, v in fix.items() if getattr(cfg.model, k) != v}
    if changed:
        log.info("taking model dimensions from the dataset: %s", changed)
    return cfg.with_(model=changed)


def _select(subjects, holdout):
    ids = [s.subject for s in subjects]
    missing = [h for h in holdout if h not in ids]
    if missing:
        raise CliError("DataError", f"unknown --holdout subject(s): {missing}", EXIT_DATA)
    kept = [s for s in subjects if s.subject not in holdout]
    if not kept:
        raise CliError("DataError", "no training subjects left after --holdout", EXIT_DATA)
    return kept


def _write_many(reports: dict[str, RunReport], out, fmt):
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    for name, rep in reports.items():
        emit_report(rep, root / f"{name.replace(',', '_').replace('=', '-')}.{fmt}", fmt)


def _summary(rep: RunReport) -> dict:
    return {"label": rep.label, "shots": rep.shots, "trials": len(rep.trials),
            "grand_mean": rep.grand_mean, "grand_std": rep.grand_std, "baseline_mean": rep.baseline_mean}


def cmd_synth(args):
    subjects = synth_generate(args.subjects, args.samples, args.classes, args.channels, args.bands, args.shift,
                              args.seed)
    save_features(args.out, subjects)
    return {"subjects": len(subjects), "out": args.out}


def cmd_pretrain(args):
    subjects, emap = _dataset(args)
    cfg = _check_dims(_config(args), subjects)
    sources = prepare(_select(subjects, args.holdout), cfg.model, emap)
    model = FaceModel(cfg.model, seed=cfg.meta.seed)
    pretrain(model, sources, cfg.meta)
    model.save(args.out)
    return {"checkpoint": args.out, "subjects": [s.subject for s in sources]}


def cmd_meta_train(args):
    subjects, emap = _dataset(args)
    cfg = _config(args)
    model = FaceModel.load(args.checkpoint)
    sources = prepare(_select(subjects, args.holdout), model.cfg, emap)
    state = MetaState(model, Adam(cfg.meta.beta), rng=np.random.default_rng(cfg.meta.seed))
    meta_train(state, sources, cfg.meta)
    model.save(args.out)
    return {"checkpoint": args.out, "episodes": state.episode}


def _flush_partial(e: LosoAborted, out, fmt, many: bool):
    done = {str(k): r for k, r in e.reports.items() if r.trials}
    if not done:
        return
    if many:
        _write_many(done, out, fmt)
    else:
        emit_report(next(iter(done.values())), out, fmt)
    log.error("wrote partial report(s) to %s", out)


def cmd_evaluate(args):
    subjects, emap = _dataset(args)
    cfg = _check_dims(_config(args), subjects)
    audit = ProtocolAudit()
    try:
        rep = run_loso(subjects, cfg, audit, emap=emap)
    except LosoAborted as e:
        _flush_partial(e, args.out, args.format, many=False)
        raise
    if not audit.clean:
        raise CliError("ProtocolError", f"protocol audit failed: {audit.overlaps} overlaps, leaks {audit.leaks[:3]}")
    emit_report(rep, args.out, args.format)
    return _summary(rep)


def cmd_ablate(args):
    subjects, emap = _dataset(args)
    cfg = _check_dims(_config(args), subjects)
    reps = ablation_run(subjects, cfg, emap=emap)
    _write_many(reps, args.out, args.format)
    full = reps.get("cvf=on,fsa=on")
    out = {name: _summary(r) for name, r in reps.items()}
    if full is not None:
        for name, r in reps.items():
            if r is not full:
                t = compare_reports(full, r)
                out[name]["ttest_vs_full"] = {"t": t.t, "p": t.p, "df": t.df}
    return out


def cmd_sweep_heads(args):
    subjects, emap = _dataset(args)
    cfg = _check_dims(_config(args), subjects)
    reps = sweep_heads(subjects, cfg, emap=emap)
    _write_many(reps, args.out, args.format)
    return {name: _summary(r) for name, r in reps.items()}


def cmd_report(args):
    reps = [load_report(p) for p in args.reports]
    out = {"reports": [_summary(r) | {"path": p} for r, p in zip(reps, args.reports)]}
    if len(reps) == 2:
        t = compare_reports(reps[0], reps[1])
        out["ttest"] = {"t": t.t, "p": t.p, "df": t.df, "mean_diff": t.mean_diff}
    if args.out:
        emit_report(reps[0], args.out, args.format)
    return out


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "meta-train": cmd_meta_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "sweep-heads": cmd_sweep_heads, "report": cmd_report}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except CliError as e:
        return _fail(e.kind, str(e), e.code)
    except DataError as e:
        return _fail("DataError", str(e), EXIT_DATA)
    except (ValueError, OSError) as e:
        return _fail(type(e).__name__, str(e), EXIT_USAGE if isinstance(e, ValueError) else EXIT_RUNTIME)
    except LosoAborted as e:
        return _fail("LosoAborted", str(e), EXIT_RUNTIME)
    except Exception as e:  # noqa: BLE001 - last-resort structured report
        return _fail(type(e).__name__, str(e), EXIT_RUNTIME)
    sys.stdout.write(json.dumps(result, indent=2, sort_keys=True, default=float) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
