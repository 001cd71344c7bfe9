import csv
import json
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from robust_funreg.cli import main, parse_experiment
from robust_funreg.data import Curve, LongitudinalSample, write_long_csv
from robust_funreg.fpca import ReducedRankModel
from robust_funreg.simulation import TABLE_COLUMNS, SimDesign, align_signs, generate_replicate, rise


def _write_rep(tmp, design, idx=0):
    rep = generate_replicate(design, idx)
    write_long_csv(rep.sample_x, tmp / "x.csv")
    write_long_csv(rep.sample_y, tmp / "y.csv")
    return rep


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipe")
    rep = _write_rep(tmp, SimDesign(seed=3), 0)
    out = tmp / "out"
    assert main(["fpca", "--x", str(tmp / "x.csv"), "--y", str(tmp / "y.csv"), "--out", str(out)]) == 0
    assert main(["regress", "--dir", str(out)]) == 0
    return tmp, out, rep


def test_fpca_outputs(pipeline):
    _, out, _ = pipeline
    for name in ("model_x.json", "model_y.json", "scores.csv", "explained_variance.csv",
                 "d2_histogram.csv", "fpca_report.json"):
        assert (out / name).exists()
    rows = _read_csv(out / "scores.csv")
    assert rows[0] == ["curve_id", "U1", "U2", "V1", "V2", "D2"]
    assert len(rows) == 51
    hist = _read_csv(out / "d2_histogram.csv")
    assert hist[0] == ["bin_lo", "bin_hi", "count"]
    assert sum(int(r[2]) for r in hist[1:]) == 50
    ev = _read_csv(out / "explained_variance.csv")
    assert ev[0] == ["model", "component", "lambda", "fraction", "cumulative"]


def test_regress_outputs(pipeline):
    _, out, rep = pipeline
    fit = json.loads((out / "fit.json").read_text())
    assert fit["converged"] is True
    assert len(fit["theta"]) == 4
    beta = _read_csv(out / "beta.csv")
    assert beta[0] == ["s", "t", "beta"] and len(beta) == 1 + 51 * 51
    trimmed = _read_csv(out / "trimmed_ids.csv")
    assert trimmed[0] == ["curve_id", "D2"]
    assert len(trimmed) - 1 == fit["n_trimmed"]


def test_signal_is_significant(pipeline):
    _, out, _ = pipeline
    assert main(["test", "--dir", str(out), "--method", "wald"]) == 0
    t = json.loads((out / "test.json").read_text())
    assert t["p_value"] < 0.01 and t["df"] == 4
    assert {"method", "Q", "df", "p_value", "n_resamples", "n_failed", "omega"} <= set(t)


def test_bootstrap_and_permutation_commands(pipeline, tmp_path):
    _, out, _ = pipeline
    assert main(["test", "--dir", str(out), "--out", str(tmp_path / "b"), "--method", "bootstrap",
                 "--n-resamples", "60", "--seed", "1"]) == 0
    b = json.loads((tmp_path / "b" / "test.json").read_text())
    assert b["method"] == "wald_bootstrap" and b["n_resamples"] == 60 and b["seed"] == 1
    assert main(["test", "--dir", str(out), "--out", str(tmp_path / "p"), "--method", "permutation",
                 "--n-resamples", "99", "--seed", "1"]) == 0
    p = json.loads((tmp_path / "p" / "test.json").read_text())
    assert p["p_value"] == pytest.approx(0.01)


def test_predict_outputs(pipeline, tmp_path):
    _, out, _ = pipeline
    assert main(["predict", "--dir", str(out), "--out", str(tmp_path), "--grid", "11"]) == 0
    rows = _read_csv(tmp_path / "predicted.csv")
    assert rows[0] == ["curve_id", "t", "value"] and len(rows) == 1 + 50 * 11
    summary = json.loads((tmp_path / "prediction_summary.json").read_text())
    assert summary["root_median_squared_error"] > 0
    assert len(summary["per_curve_mse"]) == 50


def test_least_squares_recovers_the_slope(tmp_path):
    rep = _write_rep(tmp_path, SimDesign(seed=4))
    out = tmp_path / "o"
    assert main(["fpca", "--x", str(tmp_path / "x.csv"), "--y", str(tmp_path / "y.csv"),
                 "--out", str(out), "--nu", "inf",
                 "--domain-x", "0", "1", "--domain-y", "0", "1"]) == 0
    assert main(["regress", "--dir", str(out), "--estimator", "ls"]) == 0
    fit = json.loads((out / "fit.json").read_text())
    mx = ReducedRankModel.from_dict(json.loads((out / "model_x.json").read_text()))
    my = ReducedRankModel.from_dict(json.loads((out / "model_y.json").read_text()))
    theta = np.array(fit["theta"]).reshape(2, 2)
    err = rise(theta, mx, my, rep.true_theta, rep.true_components_x, rep.true_components_y)
    # the clean-design mean is about 0.3
    assert err < 1.0
    assert align_signs(theta, mx, my, rep.true_components_x, rep.true_components_y)[0, 0] > 2


def test_untrimmed_gmt_smoke_path(pipeline, tmp_path):
    _, out, _ = pipeline
    assert main(["regress", "--dir", str(out), "--out", str(tmp_path), "--trim", "none", "--nu-rho", "1e9"]) == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["converged"] is True and fit["n_trimmed"] == 0


def test_planted_leverage_outliers_are_trimmed(tmp_path):
    hits = 0
    seeds = range(10)
    for s in seeds:
        d = tmp_path / str(s)
        d.mkdir()
        _write_rep(d, SimDesign(seed=100 + s, epsilon=0.1))
        assert main(["fpca", "--x", str(d / "x.csv"), "--y", str(d / "y.csv"), "--out", str(d)]) == 0
        assert main(["regress", "--dir", str(d), "--trim", "metric", "--alpha", "0.1"]) == 0
        hits += json.loads((d / "fit.json").read_text())["n_trimmed"] >= 5
    assert hits >= 0.9 * len(seeds)


def test_small_sample_warning(tmp_path, capsys):
    _write_rep(tmp_path, SimDesign(p=3, q=3, seed=5))
    assert main(["fpca", "--x", str(tmp_path / "x.csv"), "--y", str(tmp_path / "y.csv"), "--out", str(tmp_path),
                 "--p", "3", "--q", "3"]) == 0
    assert main(["regress", "--dir", str(tmp_path)]) == 0
    capsys.readouterr()
    assert main(["test", "--dir", str(tmp_path), "--method", "wald"]) == 0
    assert "n/(p*q)" in capsys.readouterr().err


def test_constant_curves_fit_with_warning(tmp_path, capsys):
    t = np.linspace(0, 1, 15)
    s = LongitudinalSample((Curve("a", t, np.full(15, 2.0)), Curve("b", t, np.full(15, 2.0))), (0.0, 1.0))
    write_long_csv(s, tmp_path / "c.csv")
    code = main(["fpca", "--x", str(tmp_path / "c.csv"), "--y", str(tmp_path / "c.csv"), "--out", str(tmp_path),
                 "--n-knots", "0", "--p", "1", "--q", "1", "--nu", "inf"])
    assert code == 0
    assert "degenerate_variance" in capsys.readouterr().err
    model = json.loads((tmp_path / "model_x.json").read_text())
    assert model["xi"] == pytest.approx([2.0] * 4)


def test_config_file_supplies_options(pipeline, tmp_path):
    _, out, _ = pipeline
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dir": str(out), "out": str(tmp_path), "estimator": "ls"}))
    assert main(["regress", "--config", str(cfg)]) == 0
    assert json.loads((tmp_path / "fit.json").read_text())["method"] == "ls"
    cfg.write_text(json.dumps({"dir": str(out), "bogus": 1}))
    assert main(["regress", "--config", str(cfg)]) == 2


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 2
    assert main(["fpca", "--y", "y.csv", "--out", str(tmp_path)]) == 2
    assert main(["fpca", "--x", str(tmp_path / "nope.csv"), "--y", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path)]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("curve_id,time,value\na,0.1,1\na,zz,2\n")
    capsys.readouterr()
    assert main(["fpca", "--x", str(bad), "--y", str(bad), "--out", str(tmp_path)]) == 3
    assert ":3:" in capsys.readouterr().err
    one = tmp_path / "one.csv"
    one.write_text("curve_id,time,value\n" + "".join(f"a,{t},{t}\n" for t in np.linspace(0, 1, 30)))
    assert main(["fpca", "--x", str(one), "--y", str(one), "--out", str(tmp_path), "--p", "1", "--q", "1"]) == 4
    assert main(["test", "--dir", str(tmp_path), "--method", "bootstrap"]) == 2
    assert main(["regress", "--dir", str(tmp_path), "--alpha", "1.5"]) == 2


def _experiment(tmp_path, **over):
    spec = {
        "table": "table1",
        "n_reps": 3,
        "designs": [{"n": 30, "m": 10, "p": 2, "q": 2}],
        "epsilons": [0.0, 0.1],
        "estimators": [{"estimator": "ls"}, {"estimator": "gmt", "nu": 5, "alpha": 0.1, "trim": "metric"}],
    }
    spec.update(over)
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(spec))
    return path


def test_simulate_is_byte_deterministic(tmp_path):
    exp = _experiment(tmp_path)
    for tag, jobs in (("a", "1"), ("b", "1"), ("c", "2")):
        assert main(["simulate", "--experiment", str(exp), "--out", str(tmp_path / tag), "--seed", "7", "--jobs", jobs]) == 0
    for name in ("exp.csv", "exp.json"):
        ref = (tmp_path / "a" / name).read_bytes()
        assert (tmp_path / "b" / name).read_bytes() == ref
        assert (tmp_path / "c" / name).read_bytes() == ref
    rows = _read_csv(tmp_path / "a" / "exp.csv")
    assert rows[0] == TABLE_COLUMNS and len(rows) == 5


def test_simulate_skips_invalid_cells(tmp_path, capsys):
    exp = _experiment(tmp_path, designs=[{"n": 30, "m": 10}, {"n": -1}], epsilons=[0.0, 1.5])
    assert main(["simulate", "--experiment", str(exp), "--out", str(tmp_path), "--seed", "1"]) == 0
    err = capsys.readouterr().err
    assert "designs[1]" in err and "epsilons[1]" in err
    report = json.loads((tmp_path / "exp.json").read_text())
    assert len(report["invalid"]) == 2 and len(report["rows"]) == 2


def test_simulate_empty_grid_fails(tmp_path):
    exp = _experiment(tmp_path, designs=[])
    assert main(["simulate", "--experiment", str(exp), "--out", str(tmp_path), "--seed", "1"]) == 2
    assert main(["simulate", "--experiment", str(exp), "--out", str(tmp_path)]) == 2


def test_bundled_experiment_schema(tmp_path):
    ref = resources.files("robust_funreg") / "experiments" / "table1_small.json"
    spec = json.loads(ref.read_text())
    table, designs, estimators, extras, invalid = parse_experiment(spec)
    assert table == "table1" and not invalid
    assert extras["n_reps"] == 200
    assert (designs[0].n, designs[0].m, designs[0].p, designs[0].q) == (50, 20, 2, 2)
    path = tmp_path / "table1_small.json"
    path.write_text(ref.read_text())
    assert main(["simulate", "--experiment", str(path), "--out", str(tmp_path), "--seed", "1", "--n-reps", "2"]) == 0
    out = json.loads((tmp_path / "table1_small.json").read_text())
    assert out["columns"] == TABLE_COLUMNS
    assert {r["estimator"] for r in out["rows"]} == {"ls", "gmt"}
