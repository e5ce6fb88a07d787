import csv
import json
import math

import mpmath
import numpy as np
import pytest

from face import cli
from face import eval as ev
from face.config import FULL_RUN_REPEATS, EvalConfig, RunConfig
from face.data import Episode, save_features, synth_generate
from face.eval import (LosoAborted, ProtocolAudit, ProtocolError, RunReport, TrialResult, ablation_run,
                       compare_reports, derive_seed, emit_report, load_report, paired_ttest, run_loso,
                       run_loso_sweep, sweep_heads, t_sf_two_sided)
from face.model import FaceModel

SMALL = RunConfig().with_(
    model=dict(channels=8, conv_filters=4, bottleneck=16),
    meta=dict(pretrain_epochs=1, episodes=2, inner_steps=2, query=5, batch_size=32),
    eval=dict(repeats=5, shots=1),
)


@pytest.fixture(scope="module")
def three():
    return synth_generate(3, 10, 3, 8, 5, 1.0, 0)


# ---------------------------------------------------------------------------
# paired t-test


def _mp_two_sided(t, df):
    """Two-sided tail of Student's t by direct quadrature of its density."""
    mpmath.mp.dps = 30
    nu = mpmath.mpf(df)
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    pdf = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)  # noqa: E731
    return float(2 * mpmath.quad(pdf, [abs(t), mpmath.inf]))


def _pairs():
    rng = np.random.default_rng(2024)
    out = []
    for i in range(10):
        n = 3 + i
        a = rng.uniform(0.4, 0.95, n)
        out.append((a, a - rng.normal(0.02 * (i - 4), 0.05, n)))
    return out


@pytest.mark.parametrize("i", range(10))
def test_ttest_matches_quadrature_reference(i):
    a, b = _pairs()[i]
    r = paired_ttest(a, b)
    d = a - b
    t = d.mean() / (d.std(ddof=1) / math.sqrt(len(d)))
    assert r.df == len(a) - 1
    assert r.t == pytest.approx(t, rel=1e-12)
    assert abs(r.p - _mp_two_sided(t, len(a) - 1)) < 1e-6


def test_ttest_textbook_sleep_data():
    # extra hours of sleep under two drugs, ten patients; paired t = -4.0621, df = 9, p = 0.002833
    drug1 = [0.7, -1.6, -0.2, -1.2, -0.1, 3.4, 3.7, 0.8, 0.0, 2.0]
    drug2 = [1.9, 0.8, 1.1, 0.1, -0.1, 4.4, 5.5, 1.6, 4.6, 3.4]
    r = paired_ttest(drug1, drug2)
    assert r.t == pytest.approx(-4.0621, abs=1e-4)
    assert r.p == pytest.approx(0.002833, abs=1e-3)
    assert r.p == pytest.approx(0.002833, abs=1e-6)


def test_t_table_critical_values():
    # two-sided 5% critical values from a standard t table
    for df, crit in ((1, 12.706), (5, 2.571), (9, 2.262), (30, 2.042)):
        assert t_sf_two_sided(crit, df) == pytest.approx(0.05, abs=1e-3)


def test_ttest_degenerate_cases():
    r = paired_ttest([0.5, 0.6, 0.7], [0.5, 0.6, 0.7])
    assert (r.t, r.p) == (0.0, 1.0)
    r = paired_ttest([2.0, 3.0, 4.0, 5.0], [1.0, 2.0, 3.0, 4.0])
    assert r.p == 0.0 and r.t == math.inf and r.mean_diff == 1.0
    assert paired_ttest([1.0, 2.0], [2.0, 3.0]).t == -math.inf


def test_ttest_validation():
    with pytest.raises(ValueError):
        paired_ttest([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        paired_ttest([1.0], [2.0])


def test_compare_reports_pairs_by_subject():
    a = RunReport(1, {}, [TrialResult(s, 0, 1, acc, 0, 1) for s, acc in (("x", 0.9), ("y", 0.7), ("z", 0.8))])
    b = RunReport(1, {}, [TrialResult(s, 0, 1, acc, 0, 1) for s, acc in (("z", 0.6), ("x", 0.8), ("y", 0.65))])
    r = compare_reports(a, b)
    ref = paired_ttest([0.9, 0.7, 0.8], [0.8, 0.65, 0.6])
    assert (r.t, r.p) == (ref.t, ref.p)


# ---------------------------------------------------------------------------
# reports


def _report():
    rng = np.random.default_rng(0)
    trials = []
    for s, n in (("s00", 3), ("s01", 5), ("s02", 1)):
        for t in range(n):
            c = int(rng.integers(0, 50))
            trials.append(TrialResult(s, derive_seed(0, t), 5, c / 50, c, 50, float(rng.uniform())))
    return RunReport(5, {"note": "x"}, trials, "face")


def test_grand_mean_is_subject_balanced():
    rep = _report()
    per = {}
    for t in rep.trials:
        per.setdefault(t.subject, []).append(t.correct / t.total)
    expect = sum(sum(v) / len(v) for v in per.values()) / len(per)
    assert abs(rep.grand_mean - expect) < 1e-9
    assert abs(rep.pooled_mean - np.mean([t.accuracy for t in rep.trials])) < 1e-12
    assert abs(rep.grand_mean - rep.pooled_mean) > 1e-3


def test_json_round_trip(tmp_path):
    rep = _report()
    emit_report(rep, tmp_path / "r.json")
    back = load_report(tmp_path / "r.json")
    assert back == rep
    emit_report(back, tmp_path / "r2.json")
    assert (tmp_path / "r.json").read_bytes() == (tmp_path / "r2.json").read_bytes()
    doc = json.loads((tmp_path / "r.json").read_text())
    assert abs(doc["summary"]["grand_mean"] - rep.grand_mean) < 1e-12


def test_csv_round_trip_and_layout(tmp_path):
    rep = _report()
    emit_report(rep, tmp_path / "r.csv", "csv")
    back = load_report(tmp_path / "r.csv")
    assert back.trials == rep.trials and back.shots == 5
    rows = list(csv.DictReader((tmp_path / "r.csv").read_text().splitlines()[1:]))
    kinds = [r["row"] for r in rows]
    assert kinds.count("trial") == len(rep.trials)
    assert kinds.count("subject") == 3 and kinds[-1] == "grand"
    assert float(rows[-1]["accuracy"]) == rep.grand_mean


def test_empty_report_writes_headers_only(tmp_path):
    rep = RunReport(1, {})
    emit_report(rep, tmp_path / "e.csv", "csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("row,subject")
    emit_report(rep, tmp_path / "e.json")
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["trials"] == [] and doc["summary"]["grand_mean"] is None
    assert load_report(tmp_path / "e.json") == rep
    assert load_report(tmp_path / "e.csv").trials == []


def test_emit_errors(tmp_path):
    with pytest.raises(ValueError):
        emit_report(_report(), tmp_path / "r.txt", "xml")
    with pytest.raises(OSError, match="no_such_dir"):
        emit_report(_report(), tmp_path / "no_such_dir" / "r.json")


def test_seed_derivation():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    seeds = {derive_seed(7, s, t) for s in range(10) for t in range(200)}
    assert len(seeds) == 2000
    assert all(0 <= s < 2**63 for s in seeds)


def test_eval_defaults():
    assert FULL_RUN_REPEATS == 200
    assert EvalConfig().repeats == 20
    with pytest.raises(ValueError):
        EvalConfig(query_bn="sometimes")


# ---------------------------------------------------------------------------
# LOSO protocol


def test_loso_counting_and_audit(three):
    audit = ProtocolAudit()
    rep = run_loso(three, SMALL, audit)
    assert len(rep.trials) == 15
    assert rep.subjects() == ["s00", "s01", "s02"]
    assert all(t.total == 30 - 3 and t.accuracy == t.correct / t.total for t in rep.trials)
    assert all(t.baseline_accuracy is not None for t in rep.trials)
    assert audit.clean and audit.trials == 15
    assert audit.training == {"s00": {"s01", "s02"}, "s01": {"s00", "s02"}, "s02": {"s00", "s01"}}
    assert audit.rows_seen > 0


def test_loso_is_deterministic_and_thread_count_independent(three):
    a = run_loso(three, SMALL)
    b = run_loso(three, SMALL.with_(eval={"workers": 2}))
    assert [t.seed for t in a.trials] == [t.seed for t in b.trials]
    assert [t.correct for t in a.trials] == [t.correct for t in b.trials]


def test_loso_needs_two_subjects(three):
    with pytest.raises(ValueError):
        run_loso(three[:1], SMALL)


def test_sweep_shares_pretraining_and_reports_every_k(three):
    reps = run_loso_sweep(three, SMALL, [1, 2], retrain_per_shot=False, baseline_shots=[2])
    assert sorted(reps) == [1, 2]
    assert all(len(r.trials) == 15 for r in reps.values())
    assert reps[1].baseline_mean is None and reps[2].baseline_mean is not None
    assert {t.total for t in reps[2].trials} == {30 - 6}


def test_overlapping_episode_aborts(three, monkeypatch):
    def overlapping(fs, k, q, seed):
        return Episode(fs.subject, np.array([0, 1, 2]), np.array([2, 3]))

    monkeypatch.setattr(ev, "sample_episode", overlapping)
    with pytest.raises(LosoAborted) as info:
        run_loso(three, SMALL)
    assert isinstance(info.value.__cause__, ProtocolError)


def test_abort_keeps_completed_trials(three, monkeypatch):
    real = ev.test_adapt
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] > 7:
            raise FloatingPointError("boom")
        return real(*a, **k)

    monkeypatch.setattr(ev, "test_adapt", flaky)
    with pytest.raises(LosoAborted, match="s01.*boom") as info:
        run_loso(three, SMALL)
    part = info.value.reports[1]
    assert len(part.trials) == 5 and part.subjects() == ["s00"]


def test_audit_detects_leaks():
    audit = ProtocolAudit()
    x = np.arange(24, dtype=np.float32).reshape(4, 3, 2)
    audit.register_target("t", x)
    audit.record_batch("t", x[:0] + 100)
    assert audit.clean
    audit.record_batch("t", np.concatenate([x[2:3] + 50, x[1:2]]))
    assert not audit.clean and audit.leaks == [("t", "1 sample rows")]
    audit = ProtocolAudit()
    audit.record_training("t", "t")
    audit.record_trial("t", np.array([1, 2]), np.array([3]))
    assert audit.leaks == [("t", "t")] and audit.overlaps == 0
    audit.record_trial("t", np.array([1, 2]), np.array([2]))
    assert audit.overlaps == 1


# ---------------------------------------------------------------------------
# ablations and sweeps


def test_switch_semantics():
    full = FaceModel(SMALL.model)
    no_fsa = FaceModel(SMALL.with_(model={"fsa": False}).model)
    bare = FaceModel(SMALL.with_(model={"cvf": False, "fsa": False}).model)
    assert {n.split(".")[0] for n in full.params.names()} == {"gcn", "cnn", "cvf", "fsa", "head"}
    assert set(no_fsa.meta_names()) == {n for n in no_fsa.params.names() if n.startswith(("cvf.attn", "head"))}
    assert {n.split(".")[0] for n in bare.params.names()} == {"gcn", "head"}
    assert bare.params["head.W"].shape == (8 * 5, 3)


def test_ablation_counting(three):
    reps = ablation_run(three, SMALL)
    assert list(reps) == ["cvf=on,fsa=on", "cvf=on,fsa=off", "cvf=off,fsa=on", "cvf=off,fsa=off"]
    for name, r in reps.items():
        assert r.label == name and len(r.trials) == 15
        assert r.config["model"]["cvf"] == name.startswith("cvf=on")
        assert r.baseline_mean is None


def test_head_sweep_labels(three):
    reps = sweep_heads(three, SMALL.with_(eval={"repeats": 1}))
    assert list(reps) == ["heads=1", "heads=2", "heads=5"]
    assert [r.config["model"]["heads"] for r in reps.values()] == [1, 2, 5]


# ---------------------------------------------------------------------------
# command line


@pytest.fixture
def cli_data(tmp_path, three):
    save_features(tmp_path / "data", three)
    SMALL.dump(tmp_path / "cfg.json")
    return tmp_path


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_synth(tmp_path, capsys):
    code, out, _ = _run(capsys, "synth", "--out", tmp_path / "d", "--subjects", 2, "--samples", 4, "--channels", 8)
    assert code == 0 and json.loads(out)["subjects"] == 2
    assert (tmp_path / "d" / "manifest.json").exists()


def test_cli_evaluate_is_byte_deterministic(cli_data, capsys):
    d = cli_data
    for name in ("a.json", "b.json"):
        code, _, err = _run(capsys, "evaluate", "--data", d / "data", "--config", d / "cfg.json", "--seed", 3,
                            "--shots", 1, "--repeats", 2, "--out", d / name)
        assert code == 0, err
    assert (d / "a.json").read_bytes() == (d / "b.json").read_bytes()
    rep = load_report(d / "a.json")
    assert len(rep.trials) == 6 and rep.config["eval"]["seed"] == 3


def test_cli_flags_reach_config(cli_data):
    args = cli.build_parser().parse_args(["evaluate", "--data", "x", "--out", "y", "--cvf", "off", "--fsa", "on",
                                          "--second-order", "off", "--full-run", "--shots", "10"])
    cfg = cli._config(args)
    assert (cfg.model.cvf, cfg.model.fsa, cfg.meta.second_order) == (False, True, False)
    assert (cfg.eval.repeats, cfg.eval.shots) == (200, 10)
    args = cli.build_parser().parse_args(["evaluate", "--data", "x", "--out", "y", "--full-run", "--repeats", "3"])
    assert cli._config(args).eval.repeats == 3


def test_cli_csv_report_and_summary(cli_data, capsys):
    d = cli_data
    code, _, _ = _run(capsys, "evaluate", "--data", d / "data", "--config", d / "cfg.json", "--repeats", 1,
                      "--format", "csv", "--out", d / "r.csv")
    assert code == 0
    code, _, _ = _run(capsys, "evaluate", "--data", d / "data", "--config", d / "cfg.json", "--repeats", 1,
                      "--fsa", "off", "--out", d / "r.json")
    assert code == 0
    code, out, _ = _run(capsys, "report", d / "r.csv", d / "r.json")
    doc = json.loads(out)
    assert code == 0 and len(doc["reports"]) == 2 and doc["ttest"]["df"] == 2


def test_cli_pretrain_then_meta_train(cli_data, capsys):
    d = cli_data
    code, out, err = _run(capsys, "pretrain", "--data", d / "data", "--config", d / "cfg.json", "--holdout", "s02",
                          "--out", d / "ck")
    assert code == 0, err
    assert json.loads(out)["subjects"] == ["s00", "s01"]
    code, out, err = _run(capsys, "meta-train", "--data", d / "data", "--config", d / "cfg.json", "--holdout", "s02",
                          "--checkpoint", d / "ck", "--out", d / "ck2")
    assert code == 0, err
    assert json.loads(out)["episodes"] == 2
    assert FaceModel.load(d / "ck2").params.names() == FaceModel.load(d / "ck").params.names()


def test_cli_ablate_writes_one_report_per_combination(cli_data, capsys):
    d = cli_data
    code, out, err = _run(capsys, "ablate", "--data", d / "data", "--config", d / "cfg.json", "--repeats", 1,
                          "--out", d / "abl")
    assert code == 0, err
    assert len(list((d / "abl").glob("*.json"))) == 4
    assert "ttest_vs_full" in json.loads(out)["cvf=off,fsa=off"]


@pytest.mark.parametrize("argv,kind,code", [
    (["evaluate", "--data", "/nonexistent", "--out", "x.json"], "DataError", 3),
    (["pretrain", "--data", "{data}", "--holdout", "zz", "--out", "x"], "DataError", 3),
    (["evaluate", "--data", "{data}", "--config", "{bad}", "--out", "x.json"], "ValueError", 2),
])
def test_cli_structured_errors(cli_data, capsys, argv, kind, code):
    (cli_data / "bad.json").write_text(json.dumps({"meta": {"nonsense": 1}}))
    argv = [a.format(data=cli_data / "data", bad=cli_data / "bad.json") for a in argv]
    got, _, err = _run(capsys, *argv)
    assert got == code
    doc = json.loads(err.strip().splitlines()[-1])
    assert doc["error"] == kind and doc["message"]


def test_cli_usage_error_exit_code(capsys):
    assert cli.main(["evaluate", "--shots", "0"]) == 2
    assert cli.main(["bogus"]) == 2


def test_cli_abort_flushes_partial_report(cli_data, capsys, monkeypatch):
    real = ev.test_adapt
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] > 2:
            raise FloatingPointError("boom")
        return real(*a, **k)

    monkeypatch.setattr(ev, "test_adapt", flaky)
    d = cli_data
    code, _, err = _run(capsys, "evaluate", "--data", d / "data", "--config", d / "cfg.json", "--repeats", 2,
                        "--out", d / "p.json")
    assert code == 1 and json.loads(err.strip().splitlines()[-1])["error"] == "LosoAborted"
    assert len(load_report(d / "p.json").trials) == 2
