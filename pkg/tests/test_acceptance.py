"""Acceptance criteria, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines inline;
they are also collected in the terminal summary.
"""

import json
import math
import warnings

import numpy as np
import pytest

from conftest import gaussian_sample, random_scores
from robust_funreg.cli import main
from robust_funreg.data import write_long_csv
from robust_funreg.fpca import ScoreSet, fit_reduced_rank, score_curves
from robust_funreg.inference import (
    mean_objective,
    objective_gradient,
    objective_hessian,
    unvec,
    vec,
)
from robust_funreg.regression import (
    GmtConfig,
    LinearRho,
    TRho,
    WeightScheme,
    fixed_point_map,
    gmt_fit,
    least_squares,
    metric_weights,
    n_rank_trimmed,
    rank_weights,
)
from robust_funreg.simulation import GMT5_METRIC10, LS, SimDesign, generate_replicate, run_table1, run_table2
from robust_funreg.splines import build_basis, evaluate_basis, gram_matrix

SEED = 1
TABLE1_REPS = 200
TABLE2_REPS = 2000

# target mean root ISE and its Monte Carlo SE at 1000 replicates
TABLE1_TARGETS = {
    ("ls", 0.0): (0.293, 0.004),
    ("ls", 0.1): (2.241, 0.006),
    ("gmt", 0.0): (0.379, 0.005),
    ("gmt", 0.1): (0.396, 0.005),
}
# target tail probabilities at nominal .10, .05, .01
TABLE2_TARGETS = {
    "ls": (0.1117, 0.0561, 0.0123),
    "gmt": (0.1392, 0.0824, 0.0258),
}


@pytest.fixture(scope="module")
def table1():
    cells = run_table1(SimDesign(), [0.0, 0.1], [LS, GMT5_METRIC10], n_reps=TABLE1_REPS, seed=SEED)
    return {(c.spec.estimator, c.epsilon): c for c in cells}


def test_criterion_1_table1_reproduction(table1, acceptance_log):
    ok = True
    for (est, eps), (target, se_pub) in TABLE1_TARGETS.items():
        cell = table1[(est, eps)]
        tol = 3 * se_pub * math.sqrt(1000 / TABLE1_REPS)
        passed = abs(cell.value - target) <= tol
        ok &= acceptance_log(
            f"criterion 1 {est.upper()} eps={eps:.2f}",
            passed,
            f"mean rise {cell.value:.4f} (se {cell.se:.4f}, n_fail {cell.n_fail}) vs {target} +/- {tol:.4f}",
        )
    assert ok


def test_criterion_2_table1_ordering(table1, acceptance_log):
    ls1, gmt1 = table1[("ls", 0.1)].value, table1[("gmt", 0.1)].value
    ls0, gmt0 = table1[("ls", 0.0)].value, table1[("gmt", 0.0)].value
    a = acceptance_log("criterion 2 eps=0.10 GMt < LS/3", gmt1 < ls1 / 3, f"{gmt1:.4f} < {ls1 / 3:.4f}")
    b = acceptance_log("criterion 2 eps=0 LS < GMt", ls0 < gmt0, f"{ls0:.4f} < {gmt0:.4f}")
    assert a and b


def test_criterion_3_table2_reproduction(acceptance_log):
    cells = run_table2([SimDesign(n=150, m=10)], [LS, GMT5_METRIC10], n_reps=TABLE2_REPS, seed=SEED)
    ok = True
    for est, targets in TABLE2_TARGETS.items():
        mine = [c for c in cells if c.spec.estimator == est]
        for cell, target in zip(mine, targets):
            tol = 3 * math.sqrt(target * (1 - target) / TABLE2_REPS)
            passed = abs(cell.value - target) <= tol
            ok &= acceptance_log(
                f"criterion 3 {est.upper()} nominal={cell.nominal:.2f}",
                passed,
                f"tail prob {cell.value:.4f} (n_ok {cell.n_ok}) vs {target} +/- {tol:.4f}",
            )
    assert ok


def test_criterion_4_fixed_point_suite(acceptance_log):
    rng = np.random.default_rng(SEED)
    worst_step, worst_rise, n_bad = 0.0, -math.inf, 0
    for k in range(100):
        nu = float(rng.choice([1.0, 3.0, 5.0, 10.0]))
        kind = ["metric", "rank", "unit"][k % 3]
        alpha = float(rng.choice([0.05, 0.1, 0.2, 0.5])) if kind != "unit" else 0.0
        p, q = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        s = random_scores(rng, int(rng.integers(40, 120)), p, q, df=float(rng.choice([1, 3, 30])))
        cfg = GmtConfig(nu_rho=nu, weights=WeightScheme(kind, alpha))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = gmt_fit(s, cfg)
        T, S = fixed_point_map(s, fit.weights, fit.Theta_hat, fit.Sigma_hat, cfg)
        step = max(np.abs(T - fit.Theta_hat).max(), np.abs(S - fit.Sigma_hat).max())
        rise_ = float(np.max(np.diff(fit.objective_trace), initial=-math.inf))
        worst_step, worst_rise = max(worst_step, step), max(worst_rise, rise_)
        n_bad += not (fit.converged and step < cfg.tol and rise_ <= 1e-8)
    a = acceptance_log(
        "criterion 4 self-consistency and monotone objective", n_bad == 0,
        f"{100 - n_bad}/100 fits ok, max residual {worst_step:.2e}, max objective increase {worst_rise:.2e}",
    )
    gap = 0.0
    for _ in range(20):
        s = random_scores(rng, 50, 3, 2, df=3)
        fit = gmt_fit(s, GmtConfig(weights=WeightScheme("unit"), rho_override=LinearRho()))
        gap = max(gap, float(np.abs(fit.Theta_hat - least_squares(s).Theta_hat).max()))
    b = acceptance_log("criterion 4 linear-loss reduction to LS", gap <= 1e-10, f"max |dTheta| {gap:.2e}")
    assert a and b


def test_criterion_5_derivative_identities(acceptance_log):
    rng = np.random.default_rng(SEED)
    worst_g, worst_h = 0.0, 0.0
    for _ in range(50):
        p, q, n = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(20, 80))
        Theta = rng.standard_normal((p, q))
        M = rng.standard_normal((q, q))
        Sigma = M @ M.T + 0.5 * q * np.eye(q)
        U = rng.standard_normal((n, p))
        V = U @ Theta + rng.standard_t(3, (n, q))
        w = (rng.uniform(size=n) > 0.1).astype(float)
        loss = TRho(float(rng.uniform(0.5, 20)), q)
        v0 = vec(Theta)
        g = objective_gradient(Theta, Sigma, U, V, w, loss)
        H = objective_hessian(Theta, Sigma, U, V, w, loss)
        fd_g = np.empty_like(v0)
        fd_h = np.empty((v0.size, v0.size))
        for k in range(v0.size):
            d = np.zeros_like(v0)
            d[k] = 1e-6
            fd_g[k] = (mean_objective(unvec(v0 + d, p, q), Sigma, U, V, w, loss)
                       - mean_objective(unvec(v0 - d, p, q), Sigma, U, V, w, loss)) / 2e-6
            d[k] = 1e-5
            fd_h[:, k] = (objective_gradient(unvec(v0 + d, p, q), Sigma, U, V, w, loss)
                          - objective_gradient(unvec(v0 - d, p, q), Sigma, U, V, w, loss)) / 2e-5
        worst_g = max(worst_g, np.linalg.norm(fd_g - g) / np.linalg.norm(g))
        worst_h = max(worst_h, np.linalg.norm(fd_h - H) / np.linalg.norm(H))
    a = acceptance_log("criterion 5 gradient vs finite differences", worst_g < 1e-6, f"max rel err {worst_g:.2e} < 1e-6")
    b = acceptance_log("criterion 5 Hessian vs finite differences", worst_h < 1e-4, f"max rel err {worst_h:.2e} < 1e-4")
    assert a and b


def test_criterion_6_pca_oracle(acceptance_log):
    rng = np.random.default_rng(SEED)
    basis = build_basis((0, 1), 7, 3)
    grid = np.linspace(0, 1, 50)
    sample, _ = gaussian_sample(rng, 200, 0, grid=grid, mean=lambda t: np.cos(2 * t))
    model = fit_reduced_rank(sample, basis, 2, math.inf)
    # classical PCA of least-squares coefficients on the common grid
    B = evaluate_basis(basis, grid)
    X = np.array([c.values for c in sample])
    C = np.linalg.lstsq(B, X.T, rcond=None)[0].T
    J = gram_matrix(basis)
    L = np.linalg.cholesky(J)
    ev, vecs = np.linalg.eigh(L.T @ np.cov(C, rowvar=False, ddof=0) @ L)
    H = np.linalg.solve(L.T, vecs[:, np.argsort(ev)[::-1][:2]])
    inner = np.diag(model.H.T @ J @ H)
    H = H * np.sign(inner)
    fine = evaluate_basis(basis, np.linspace(0, 1, 1001))
    sup = np.abs(fine @ (model.H - H)).max(axis=0)
    a = acceptance_log("criterion 6 component inner products", np.abs(inner).min() > 0.99,
                       f"min |<phi, phi_pca>| {np.abs(inner).min():.6f} > 0.99")
    b = acceptance_log("criterion 6 mean sup-error", sup.mean() < 0.05, f"mean sup-error {sup.mean():.2e} < 0.05")
    assert a and b


def test_criterion_7_distributional_checks(acceptance_log):
    rng = np.random.default_rng(SEED)
    basis = build_basis((0, 1), 7, 3)
    sample, _ = gaussian_sample(rng, 1000, 20)
    model = fit_reduced_rank(sample, basis, 2, math.inf)
    scores = score_curves(model, sample)
    D2 = np.sum(scores**2 / model.lam, axis=1)
    se = D2.std(ddof=1) / math.sqrt(D2.size)
    a = acceptance_log("criterion 7 D2 mean", abs(D2.mean() - 2) < 3 * se,
                       f"mean {D2.mean():.4f} vs 2 +/- {3 * se:.4f}")
    n = 20000
    lam = np.array([1.0, 0.5, 0.25])
    Z = rng.standard_normal((n, 3)) * np.sqrt(lam)
    s = ScoreSet.from_scores(Z, Z[:, :1], lam, [str(i) for i in range(n)])
    rate = 1 - metric_weights(s, 0.1).mean()
    tol = 3 * math.sqrt(0.09 / n)
    b = acceptance_log("criterion 7 metric trimming rate", abs(rate - 0.1) < tol, f"rate {rate:.4f} vs 0.1 +/- {tol:.4f}")
    bad = 0
    for n_, alpha in [(10, 0.2), (50, 0.1), (37, 0.13), (30, 0.1), (200, 0.05), (7, 0.5), (99, 0.01)]:
        w = rank_weights(rng.standard_normal(n_) ** 2, alpha)
        bad += int(np.count_nonzero(w == 0) != n_rank_trimmed(n_, alpha) or n_rank_trimmed(n_, alpha) != math.ceil(round(alpha * n_, 9)))
    c = acceptance_log("criterion 7 rank trimming count", bad == 0, f"{7 - bad}/7 cases trim exactly ceil(alpha n)")
    assert a and b and c


def test_criterion_8_determinism(tmp_path, acceptance_log):
    exp = tmp_path / "exp.json"
    exp.write_text(json.dumps({
        "table": "table1", "n_reps": 4, "designs": [{"n": 30, "m": 10}], "epsilons": [0.0, 0.1],
        "estimators": [{"estimator": "ls"}, {"estimator": "gmt", "nu": 5, "alpha": 0.1, "trim": "metric"}],
    }))
    rep = generate_replicate(SimDesign(seed=SEED), 0)
    write_long_csv(rep.sample_x, tmp_path / "x.csv")
    write_long_csv(rep.sample_y, tmp_path / "y.csv")
    outputs = {}
    for tag, jobs in (("a", "1"), ("b", "1"), ("c", "2")):
        d = tmp_path / tag
        codes = [
            main(["simulate", "--experiment", str(exp), "--out", str(d), "--seed", "5", "--jobs", jobs]),
            main(["fpca", "--x", str(tmp_path / "x.csv"), "--y", str(tmp_path / "y.csv"), "--out", str(d)]),
            main(["regress", "--dir", str(d)]),
            main(["test", "--dir", str(d), "--out", str(d / "boot"), "--method", "bootstrap",
                  "--n-resamples", "60", "--seed", "5", "--jobs", jobs]),
            main(["test", "--dir", str(d), "--out", str(d / "perm"), "--method", "permutation",
                  "--n-resamples", "99", "--seed", "5", "--jobs", jobs]),
            main(["predict", "--dir", str(d)]),
        ]
        assert codes == [0] * 6
        outputs[tag] = {str(f.relative_to(d)): f.read_bytes() for f in sorted(d.rglob("*")) if f.is_file()}
    same = outputs["a"] == outputs["b"] == outputs["c"]
    assert acceptance_log("criterion 8 byte-identical reruns (serial and 2 jobs)", same,
                          f"{len(outputs['a'])} files compared across 3 runs")
