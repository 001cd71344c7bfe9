"""Monte Carlo harness for the estimation-error and Wald-calibration experiments.

Scores follow ``U ~ N(0, diag(1, 1/2, ..., 1/p))``, ``W ~ N(0, diag(1, ..., 1/q))``
and ``V = Theta0^T U + W``; curves are ``X_i(s) = sum_k U_ik sqrt(2) sin(k pi s)``
(likewise Y with the same grid) observed at ``m`` uniform points with
Normal measurement noise. Each replicate draws from its own stream
``default_rng([seed, rep_index])``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .chi2 import chi2_quantile
from .data import LongitudinalSample
from .fpca import FitError, FitOptions, ScoreSet, fit_reduced_rank, predict_scores
from .inference import InferenceError, analytic_test
from .parallel import map_indexed
from .regression import (
    FunctionComponents,
    GmtConfig,
    RegressionError,
    WeightScheme,
    fit_estimator,
)
from .splines import build_basis, span_quadrature


def sine_component(k: int):
    def phi(t):
        return math.sqrt(2.0) * np.sin(k * math.pi * np.asarray(t, dtype=float))

    phi.__name__ = f"sqrt2_sin_{k}pi"
    return phi


def sine_components(p: int) -> FunctionComponents:
    return FunctionComponents(tuple(sine_component(k) for k in range(1, p + 1)), (0.0, 1.0))


@dataclass(frozen=True)
class SimDesign:
    n: int = 50
    m: int = 20
    p: int = 2
    q: int = 2
    epsilon: float = 0.0
    theta_signal: float = 3.0
    noise_sd: float = 0.1
    seed: int = 0
    n_reps: int = 1000
    shift: float = 5.0

    def __post_init__(self):
        for name in ("n", "m", "p", "q", "n_reps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError("epsilon must lie in [0, 1)")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")

    @property
    def Lambda(self) -> np.ndarray:
        return 1.0 / np.arange(1, self.p + 1)

    @property
    def Sigma(self) -> np.ndarray:
        return 1.0 / np.arange(1, self.q + 1)

    @property
    def theta0(self) -> np.ndarray:
        T = np.zeros((self.p, self.q))
        T[0, 0] = self.theta_signal
        return T


@dataclass(frozen=True)
class SimReplicate:
    sample_x: LongitudinalSample
    sample_y: LongitudinalSample
    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    true_theta: np.ndarray
    true_components_x: FunctionComponents
    true_components_y: FunctionComponents
    contaminated_ids: Tuple[int, ...]
    times: np.ndarray = field(repr=False)
    noise_x: np.ndarray = field(repr=False)
    noise_y: np.ndarray = field(repr=False)
    order: np.ndarray = field(repr=False)


def curves_from_scores(scores: np.ndarray, components: FunctionComponents, times: np.ndarray, noise: np.ndarray):
    """``values[i, j] = sum_k scores[i, k] phi_k(times[i, j]) + noise[i, j]``."""
    n, m = times.shape
    Phi = components.components(times.ravel()).reshape(n, m, -1)
    return np.einsum("ijk,ik->ij", Phi, scores) + noise


def _sample(values: np.ndarray, times: np.ndarray) -> LongitudinalSample:
    return LongitudinalSample.from_arrays(list(times), list(values), (0.0, 1.0))


def generate_replicate(design: SimDesign, rep_index: int) -> SimReplicate:
    """Clean replicate ``rep_index`` of ``design``; deterministic in (seed, rep_index)."""
    rng = np.random.default_rng([int(design.seed), int(rep_index)])
    n, m, p, q = design.n, design.m, design.p, design.q
    U = rng.standard_normal((n, p)) * np.sqrt(design.Lambda)[None, :]
    W = rng.standard_normal((n, q)) * np.sqrt(design.Sigma)[None, :]
    times = rng.uniform(0.0, 1.0, (n, m))
    noise_x = design.noise_sd * rng.standard_normal((n, m))
    noise_y = design.noise_sd * rng.standard_normal((n, m))
    order = rng.permutation(n)
    theta0 = design.theta0
    V = U @ theta0 + W
    cx, cy = sine_components(p), sine_components(q)
    rep = SimReplicate(
        sample_x=_sample(curves_from_scores(U, cx, times, noise_x), times),
        sample_y=_sample(curves_from_scores(V, cy, times, noise_y), times),
        U=U, V=V, W=W, true_theta=theta0,
        true_components_x=cx, true_components_y=cy,
        contaminated_ids=(), times=times, noise_x=noise_x, noise_y=noise_y, order=order,
    )
    if design.epsilon > 0:
        rep = contaminate(rep, design.epsilon, design.shift)
    return rep


def n_contaminated(n: int, epsilon: float) -> int:
    return int(math.floor(round(epsilon * n, 9)))


def contaminate(rep: SimReplicate, epsilon: float, shift: float = 5.0) -> SimReplicate:
    """Replace ``floor(epsilon n)`` pairs by leverage outliers.

    The chosen curves get ``U*_1 = U_1 + shift`` and ``V* = W`` and are
    rebuilt on their original grids with their original noise.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError("epsilon must lie in [0, 1)")
    k = n_contaminated(rep.U.shape[0], epsilon)
    if k == 0:
        return rep
    ids = np.sort(rep.order[:k])
    U = rep.U.copy()
    V = rep.V.copy()
    U[ids, 0] += shift
    V[ids] = rep.W[ids]
    return replace(
        rep,
        sample_x=_sample(curves_from_scores(U, rep.true_components_x, rep.times, rep.noise_x), rep.times),
        sample_y=_sample(curves_from_scores(V, rep.true_components_y, rep.times, rep.noise_y), rep.times),
        U=U,
        V=V,
        contaminated_ids=tuple(int(i) for i in ids),
    )


# --------------------------------------------------------------------------
# error metric


def _breakpoints(obj) -> np.ndarray:
    if hasattr(obj, "basis"):
        return obj.basis.breakpoints
    return np.asarray(obj.domain, dtype=float)


def _axis_rule(*objs, min_nodes: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    bps = np.unique(np.concatenate([_breakpoints(o) for o in objs]))
    spans = bps.size - 1
    per_span = max(16, int(math.ceil(min_nodes / spans)))
    return span_quadrature(bps, per_span)


def rise(theta_hat, comps_x_hat, comps_y_hat, theta0, comps_x0, comps_y0) -> float:
    """Root integrated squared difference of two slope surfaces.

    Tensor Gauss-Legendre quadrature with at least 64 nodes per axis,
    placed piecewise between the knots of any spline components.
    """
    dom_x = {tuple(np.asarray(_breakpoints(c))[[0, -1]]) for c in (comps_x_hat, comps_x0)}
    dom_y = {tuple(np.asarray(_breakpoints(c))[[0, -1]]) for c in (comps_y_hat, comps_y0)}
    if len(dom_x) != 1 or len(dom_y) != 1:
        raise ValueError("surfaces are defined on different domains")
    s, ws = _axis_rule(comps_x_hat, comps_x0)
    t, wt = _axis_rule(comps_y_hat, comps_y0)
    diff = comps_x_hat.components(s) @ np.asarray(theta_hat) @ comps_y_hat.components(t).T
    diff -= comps_x0.components(s) @ np.asarray(theta0) @ comps_y0.components(t).T
    return float(math.sqrt(max(ws @ diff**2 @ wt, 0.0)))


def align_signs(theta_hat, comps_hat_x, comps_hat_y, comps_x0, comps_y0) -> np.ndarray:
    """Flip rows/columns of Theta so each estimated component has a nonnegative
    inner product with the true component of the same index."""
    T = np.array(theta_hat, dtype=float)
    for k, sign in enumerate(_inner_signs(comps_hat_x, comps_x0)):
        T[k] *= sign
    for l, sign in enumerate(_inner_signs(comps_hat_y, comps_y0)):
        T[:, l] *= sign
    return T


def _inner_signs(est, true):
    s, w = _axis_rule(est, true)
    A = est.components(s)
    B = true.components(s)
    k = min(A.shape[1], B.shape[1])
    ip = (A[:, :k] * w[:, None] * B[:, :k]).sum(axis=0)
    signs = np.where(ip < 0, -1.0, 1.0)
    return np.concatenate([signs, np.ones(A.shape[1] - k)])


# --------------------------------------------------------------------------
# estimator specifications and the two-step pipeline


@dataclass(frozen=True)
class EstimatorSpec:
    """Score model plus regression estimator.

    ``estimator='ls'`` pairs Normal-model scores with least squares;
    ``'gmt'`` pairs t-model scores (``nu``) with the GMt estimator whose
    loss uses the same ``nu``.
    """

    estimator: str = "ls"
    nu: float = math.inf
    alpha: float = 0.0
    trim: str = "none"

    def __post_init__(self):
        if self.estimator not in ("ls", "gmt"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.trim not in ("none", "metric", "rank"):
            raise ValueError(f"unknown trim {self.trim!r}")
        if self.estimator == "gmt" and math.isinf(self.nu):
            raise ValueError("GMt needs a finite nu")

    @property
    def label(self) -> str:
        if self.estimator == "ls":
            return "LS"
        return f"GMt(nu={self.nu:g},alpha={self.alpha:g},{self.trim})"

    @property
    def score_nu(self) -> float:
        return math.inf if self.estimator == "ls" else self.nu

    def gmt_config(self) -> Optional[GmtConfig]:
        if self.estimator == "ls":
            return None
        kind = "unit" if self.trim == "none" else self.trim
        return GmtConfig(nu_rho=self.nu, weights=WeightScheme(kind, self.alpha))

    @classmethod
    def from_dict(cls, d: Dict) -> "EstimatorSpec":
        est = d.get("estimator", "ls")
        nu = d.get("nu", "inf" if est == "ls" else 5)
        nu = math.inf if nu in ("inf", None) else float(nu)
        return cls(est, nu, float(d.get("alpha", 0.0)), d.get("trim", "none" if est == "ls" else "metric"))

    def to_dict(self) -> Dict:
        return {
            "estimator": self.estimator,
            "nu": "inf" if math.isinf(self.nu) else self.nu,
            "alpha": self.alpha,
            "trim": self.trim,
        }


LS = EstimatorSpec("ls")
GMT5_METRIC10 = EstimatorSpec("gmt", 5.0, 0.10, "metric")


@dataclass(frozen=True)
class BasisSpec:
    n_knots: int = 7
    degree: int = 3


def fit_scores(rep: SimReplicate, nu: float, design: SimDesign, basis_spec: BasisSpec, options=None) -> Tuple:
    basis = build_basis((0.0, 1.0), basis_spec.n_knots, basis_spec.degree)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mx = fit_reduced_rank(rep.sample_x, basis, design.p, nu, options)
        my = fit_reduced_rank(rep.sample_y, basis, design.q, nu, options)
    return mx, my, predict_scores(mx, my, rep.sample_x, rep.sample_y)


def _fit(scores: ScoreSet, spec: EstimatorSpec):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fit_estimator(scores, spec.estimator, spec.gmt_config())


def _table1_replicate(rep_index, design, epsilons, specs, basis_spec, options):
    """Rise and aligned theta_11 for every (epsilon, estimator) cell of one replicate."""
    base = generate_replicate(replace(design, epsilon=0.0), rep_index)
    out = {}
    for eps in epsilons:
        rep = contaminate(base, eps, design.shift)
        cache = {}
        for j, spec in enumerate(specs):
            try:
                if spec.score_nu not in cache:
                    cache[spec.score_nu] = fit_scores(rep, spec.score_nu, design, basis_spec, options)
                mx, my, scores = cache[spec.score_nu]
                fit = _fit(scores, spec)
                r = rise(fit.Theta_hat, mx, my, rep.true_theta, rep.true_components_x, rep.true_components_y)
                t11 = align_signs(fit.Theta_hat, mx, my, rep.true_components_x, rep.true_components_y)[0, 0]
                ok = bool(mx.converged and my.converged and fit.converged)
                out[(eps, j)] = (r, float(t11), ok)
            except (FitError, RegressionError, np.linalg.LinAlgError):
                out[(eps, j)] = None
    return out


@dataclass
class CellResult:
    table: str
    spec: EstimatorSpec
    design: SimDesign
    epsilon: float
    value: float
    se: float
    n_fail: int
    n_ok: int
    nominal: Optional[float] = None
    extra: Dict = field(default_factory=dict)

    def row(self) -> Dict:
        d = self.design
        return {
            "estimator": self.spec.estimator,
            "nu": "inf" if math.isinf(self.spec.nu) else self.spec.nu,
            "alpha": self.spec.alpha,
            "trim": self.spec.trim,
            "epsilon": self.epsilon,
            "n": d.n,
            "m": d.m,
            "p": d.p,
            "q": d.q,
            "mean_or_prob": self.value,
            "se": self.se,
            "n_fail": self.n_fail,
            "nominal": "" if self.nominal is None else self.nominal,
        }


TABLE_COLUMNS = ["estimator", "nu", "alpha", "trim", "epsilon", "n", "m", "p", "q", "mean_or_prob", "se", "n_fail", "nominal"]


def _mean_se(x: np.ndarray) -> Tuple[float, float]:
    if x.size == 0:
        return math.nan, math.nan
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.nan
    return float(np.mean(x)), se


def run_table1(
    design: SimDesign,
    epsilons: Sequence[float],
    specs: Sequence[EstimatorSpec],
    n_reps: Optional[int] = None,
    seed: Optional[int] = None,
    basis_spec: BasisSpec = BasisSpec(),
    options: Optional[FitOptions] = None,
    n_jobs: int = 1,
) -> List[CellResult]:
    """Mean root integrated squared error per (estimator, epsilon) cell.

    All cells of a replicate share the same clean draw; contamination is
    applied on top of it. Replicates whose EM or GMt fits fail or do not
    converge are excluded from the cell averages and counted in ``n_fail``.
    """
    n_reps = design.n_reps if n_reps is None else n_reps
    design = replace(design, n_reps=n_reps, seed=design.seed if seed is None else seed)
    task = partial(
        _table1_replicate, design=design, epsilons=tuple(epsilons), specs=tuple(specs),
        basis_spec=basis_spec, options=options,
    )
    reps = map_indexed(task, range(n_reps), n_jobs)
    cells = []
    for eps in epsilons:
        for j, spec in enumerate(specs):
            vals = [r[(eps, j)] for r in reps]
            good = [v for v in vals if v is not None and v[2]]
            rises = np.array([v[0] for v in good])
            t11 = np.array([v[1] for v in good])
            mean, se = _mean_se(rises)
            tmean, tse = _mean_se(t11)
            cells.append(CellResult(
                "table1", spec, replace(design, epsilon=eps), eps, mean, se,
                n_reps - len(good), len(good),
                extra={"theta11_mean": tmean, "theta11_se": tse, "rise": rises.tolist(), "theta11": t11.tolist()},
            ))
    return cells


NOMINAL_LEVELS = (0.10, 0.05, 0.01)


def _table2_replicate(rep_index, design, specs, basis_spec, options):
    rep = generate_replicate(design, rep_index)
    out = []
    cache = {}
    for spec in specs:
        try:
            if spec.score_nu not in cache:
                cache[spec.score_nu] = fit_scores(rep, spec.score_nu, design, basis_spec, options)
            mx, my, scores = cache[spec.score_nu]
            fit = _fit(scores, spec)
            test = analytic_test(fit, scores, spec.gmt_config())
            ok = bool(mx.converged and my.converged and fit.converged)
            out.append((test.Q, ok))
        except (FitError, RegressionError, InferenceError, np.linalg.LinAlgError):
            out.append(None)
    return out


def run_table2(
    designs: Sequence[SimDesign],
    specs: Sequence[EstimatorSpec] = (LS, GMT5_METRIC10),
    n_reps: Optional[int] = None,
    seed: Optional[int] = None,
    levels: Sequence[float] = NOMINAL_LEVELS,
    basis_spec: BasisSpec = BasisSpec(),
    options: Optional[FitOptions] = None,
    n_jobs: int = 1,
) -> List[CellResult]:
    """Empirical ``P(Q >= chi2_{pq, 1-level})`` under ``Theta0 = O``.

    LS uses the homoscedastic covariance ``E(RR^T) kron E(UU^T)^{-1}``;
    GMt uses the sandwich.
    """
    cells = []
    for design in designs:
        nr = design.n_reps if n_reps is None else n_reps
        design = replace(design, theta_signal=0.0, epsilon=0.0, n_reps=nr, seed=design.seed if seed is None else seed)
        task = partial(_table2_replicate, design=design, specs=tuple(specs), basis_spec=basis_spec, options=options)
        reps = map_indexed(task, range(nr), n_jobs)
        df = design.p * design.q
        for j, spec in enumerate(specs):
            Q = np.array([r[j][0] for r in reps if r[j] is not None and r[j][1]])
            n_fail = nr - Q.size
            for level in levels:
                crit = chi2_quantile(1.0 - level, df)
                prob = float(np.mean(Q >= crit)) if Q.size else math.nan
                se = math.sqrt(prob * (1 - prob) / Q.size) if Q.size else math.nan
                cells.append(CellResult(
                    "table2", spec, design, 0.0, prob, se, n_fail, int(Q.size), nominal=level,
                    extra={"Q_mean": float(Q.mean()) if Q.size else math.nan,
                           "Q_se": float(Q.std(ddof=1) / math.sqrt(Q.size)) if Q.size > 1 else math.nan},
                ))
    return cells
