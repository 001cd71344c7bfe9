"""Least-squares and robust GMt estimation of the score regression ``V = Theta^T U + W``.

The GMt estimator minimizes

    sum_i rho(w_i R_i^T Sigma^{-1} R_i) + n log|Sigma|,   R_i = V_i - Theta^T U_i,

with ``rho(x) = (nu + q) log(1 + x / nu)`` and hard leverage weights
``w_i`` computed from the Mahalanobis distances of the X-scores. It is
solved by alternating the two reweighted fixed-point updates; because
``rho`` is concave each pass is a majorize-minimize step, so the objective
never increases.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Protocol, Sequence, Tuple

import numpy as np

from .chi2 import chi2_quantile
from .fpca import ScoreSet


class RegressionError(RuntimeError):
    """The regression cannot be computed from the given scores."""


class SigmaRegularizedWarning(UserWarning):
    pass


class GmtConvergenceWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# loss functions


def rho(x, nu: float, q: int):
    return (nu + q) * np.log1p(np.asarray(x, dtype=float) / nu)


def rho_prime(x, nu: float, q: int):
    return (nu + q) / (nu + np.asarray(x, dtype=float))


def rho_second(x, nu: float, q: int):
    return -(nu + q) / (nu + np.asarray(x, dtype=float)) ** 2


@dataclass(frozen=True)
class TRho:
    """t-type loss ``(nu + q) log(1 + x / nu)``."""

    nu: float
    q: int

    def __call__(self, x):
        return rho(x, self.nu, self.q)

    def prime(self, x):
        return rho_prime(x, self.nu, self.q)

    def second(self, x):
        return rho_second(x, self.nu, self.q)


@dataclass(frozen=True)
class LinearRho:
    """``rho(x) = x``. Test hook under which GMt reduces to least squares."""

    def __call__(self, x):
        return np.asarray(x, dtype=float)

    def prime(self, x):
        return np.ones_like(np.asarray(x, dtype=float))

    def second(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


# --------------------------------------------------------------------------
# leverage weights


@dataclass(frozen=True)
class WeightScheme:
    kind: str = "metric"  # metric | rank | unit
    alpha: float = 0.10

    def __post_init__(self):
        if self.kind not in ("metric", "rank", "unit"):
            raise ValueError(f"unknown weight kind {self.kind!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")


def _distances(scores) -> np.ndarray:
    return np.asarray(scores.D2 if isinstance(scores, ScoreSet) else scores, dtype=float)


def metric_weights(scores, alpha: float, p: Optional[int] = None) -> np.ndarray:
    """Keep observations with ``D2 <= chi2_{p, 1-alpha}``.

    ``scores`` is a ScoreSet or an array of squared distances (then ``p``
    is required).
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    D2 = _distances(scores)
    if p is None:
        if not isinstance(scores, ScoreSet):
            raise ValueError("p is required when passing raw distances")
        p = scores.p
    cutoff = chi2_quantile(1.0 - alpha, p) if alpha > 0 else math.inf
    return (D2 <= cutoff).astype(float)


def n_rank_trimmed(n: int, alpha: float) -> int:
    # round first so that e.g. 0.1 * 30 counts as exactly 3
    return int(math.ceil(round(alpha * n, 9)))


def rank_weights(scores, alpha: float) -> np.ndarray:
    """Zero weight for the ``ceil(alpha n)`` largest distances.

    Among ties the observation with the higher index is trimmed first.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    D2 = _distances(scores)
    n = D2.size
    k = n_rank_trimmed(n, alpha)
    w = np.ones(n)
    if k:
        idx = np.arange(n)
        order = np.lexsort((-idx, -D2))
        w[order[:k]] = 0.0
    return w


def compute_weights(scores: ScoreSet, scheme: WeightScheme) -> np.ndarray:
    if scheme.kind == "unit":
        return np.ones(scores.n)
    if scheme.kind == "metric":
        return metric_weights(scores, scheme.alpha)
    return rank_weights(scores, scheme.alpha)


def distance_quantiles(scores: ScoreSet, probs: Sequence[float] = (0.5, 0.75, 0.9, 0.95, 0.99)) -> Dict:
    """Empirical D2 quantiles next to the chi2_p reference, to help choose alpha."""
    D2 = scores.D2
    return {
        "probs": list(probs),
        "empirical": [float(np.quantile(D2, pr)) for pr in probs],
        "chi2_reference": [chi2_quantile(pr, scores.p) for pr in probs],
        "fraction_above_cutoff": {
            str(a): float(np.mean(D2 > chi2_quantile(1 - a, scores.p))) for a in (0.01, 0.05, 0.1, 0.2)
        },
    }


# --------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class GmtConfig:
    nu_rho: float = 5.0
    weights: WeightScheme = field(default_factory=WeightScheme)
    tol: float = 1e-9
    max_iter: int = 1000
    # replaces the t-type loss; only LinearRho is meant to go here
    rho_override: Optional[object] = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.nu_rho > 0:
            raise ValueError("nu_rho must be positive")

    def loss(self, q: int):
        return self.rho_override if self.rho_override is not None else TRho(self.nu_rho, q)


@dataclass(frozen=True)
class GmtFit:
    Theta_hat: np.ndarray
    Sigma_hat: np.ndarray
    weights: np.ndarray
    e: np.ndarray
    residuals: np.ndarray
    n_trimmed: int
    converged: bool
    objective_trace: Tuple[float, ...] = ()
    n_iter: int = 0
    fixed_point_residual: float = 0.0
    method: str = "gmt"
    flags: Tuple[str, ...] = ()

    @property
    def p(self) -> int:
        return self.Theta_hat.shape[0]

    @property
    def q(self) -> int:
        return self.Theta_hat.shape[1]

    def to_dict(self) -> Dict:
        return {
            "method": self.method,
            "p": self.p,
            "q": self.q,
            "theta": self.Theta_hat.ravel().tolist(),
            "sigma": self.Sigma_hat.ravel().tolist(),
            "weights": self.weights.tolist(),
            "e": self.e.tolist(),
            "n_trimmed": self.n_trimmed,
            "converged": self.converged,
            "iterations": self.n_iter,
            "fixed_point_residual": self.fixed_point_residual,
            "objective_trace": list(self.objective_trace),
            "flags": list(self.flags),
        }


def _scaled_distances(U, V, Theta, Sigma, w):
    R = V - U @ Theta
    Sinv_R = np.linalg.solve(Sigma, R.T).T
    return R, w * np.einsum("ij,ij->i", R, Sinv_R)


def objective(scores: ScoreSet, Theta, Sigma, weights, config: GmtConfig) -> float:
    """GMt criterion ``sum rho(e_i) + n log|Sigma|``."""
    loss = config.loss(scores.q)
    _, e = _scaled_distances(scores.U_hat, scores.V_hat, Theta, Sigma, weights)
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        return math.inf
    return float(np.sum(loss(e)) + scores.n * logdet)


def _weighted_ls(U, V, c):
    keep = c > 0
    Uk, Vk, ck = U[keep], V[keep], c[keep]
    A = (Uk * ck[:, None]).T @ Uk
    b = (Uk * ck[:, None]).T @ Vk
    try:
        cond = np.linalg.cond(A)
    except np.linalg.LinAlgError:
        cond = math.inf
    if not np.isfinite(cond) or cond > 1e12:
        raise RegressionError("singular weighted score design")
    return np.linalg.solve(A, b)


def _guard_sigma(Sigma):
    Sigma = 0.5 * (Sigma + Sigma.T)
    q = Sigma.shape[0]
    tr = np.trace(Sigma)
    if not tr > 0:
        raise RegressionError("residual scatter collapsed to zero")
    if np.linalg.eigvalsh(Sigma)[0] < 1e-10 * tr:
        return Sigma + 1e-8 * tr / q * np.eye(q), True
    return Sigma, False


def fixed_point_map(scores: ScoreSet, weights, Theta, Sigma, config: GmtConfig):
    """One pass of the reweighted updates for Theta then Sigma.

    Both updates use ``e_i`` evaluated at the incoming ``(Theta, Sigma)``;
    observations with zero weight are left out of both sums.
    """
    U, V = scores.U_hat, scores.V_hat
    loss = config.loss(scores.q)
    _, e = _scaled_distances(U, V, Theta, Sigma, weights)
    c = loss.prime(e) * weights
    Theta_new = _weighted_ls(U, V, c)
    keep = c > 0
    R = V[keep] - U[keep] @ Theta_new
    Sigma_new = (R * c[keep, None]).T @ R / scores.n
    return Theta_new, 0.5 * (Sigma_new + Sigma_new.T)


def least_squares(scores: ScoreSet) -> GmtFit:
    """Ordinary least squares on the scores, with ``Sigma = (1/n) sum R R^T``."""
    U, V = scores.U_hat, scores.V_hat
    n = scores.n
    Theta = _weighted_ls(U, V, np.ones(n))
    R = V - U @ Theta
    Sigma = R.T @ R / n
    w = np.ones(n)
    try:
        _, e = _scaled_distances(U, V, Theta, Sigma, w)
    except np.linalg.LinAlgError:
        e = np.full(n, np.nan)
    return GmtFit(Theta, Sigma, w, e, R, 0, True, (), 1, 0.0, method="ls")


def gmt_fit(scores: ScoreSet, config: GmtConfig, weights: Optional[np.ndarray] = None) -> GmtFit:
    """Robust GMt fit by block-alternating fixed-point iteration.

    Parameters
    ----------
    scores : ScoreSet
        Predicted X and Y scores.
    config : GmtConfig
        Loss, weighting scheme and stopping rule.
    weights : array, optional
        Leverage weights to use instead of computing them from ``config.weights``.

    Returns
    -------
    GmtFit
        On convergence, the returned iterate moves by less than ``config.tol``
        (max-norm) under one more pass of the updates. Otherwise the
        iterate with the lowest objective is returned with ``converged=False``.

    Raises
    ------
    RegressionError
        Fewer than ``p + q`` untrimmed observations, or a singular weighted design.
    """
    U, V = scores.U_hat, scores.V_hat
    n, p, q = scores.n, scores.p, scores.q
    w = compute_weights(scores, config.weights) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValueError("weights must have one entry per observation")
    n_kept = int(np.count_nonzero(w))
    if n_kept < p + q:
        raise RegressionError(f"only {n_kept} untrimmed observations; need at least {p + q}")

    flags = set()
    Theta = _weighted_ls(U, V, w)
    keep = w > 0
    R = V[keep] - U[keep] @ Theta
    Sigma = (R * w[keep, None]).T @ R / n_kept
    Sigma, reg = _guard_sigma(Sigma)
    if reg:
        flags.add("sigma_regularized")

    trace = [objective(scores, Theta, Sigma, w, config)]
    best = (trace[0], Theta, Sigma)
    converged = False
    step = math.inf
    it = 0
    for it in range(1, config.max_iter + 1):
        Theta_new, Sigma_new = fixed_point_map(scores, w, Theta, Sigma, config)
        Sigma_new, reg = _guard_sigma(Sigma_new)
        if reg:
            flags.add("sigma_regularized")
        step = max(np.max(np.abs(Theta_new - Theta)), np.max(np.abs(Sigma_new - Sigma)))
        if step < config.tol:
            converged = True
            break
        Theta, Sigma = Theta_new, Sigma_new
        trace.append(objective(scores, Theta, Sigma, w, config))
        if trace[-1] < best[0]:
            best = (trace[-1], Theta, Sigma)

    if not converged:
        _, Theta, Sigma = best
        flags.add("not_converged")
        warnings.warn(f"GMt iteration did not converge in {config.max_iter} passes", GmtConvergenceWarning, stacklevel=2)
    if "sigma_regularized" in flags:
        warnings.warn("residual scatter was nearly singular and was regularized", SigmaRegularizedWarning, stacklevel=2)
    R, e = _scaled_distances(U, V, Theta, Sigma, w)
    return GmtFit(
        Theta_hat=Theta,
        Sigma_hat=Sigma,
        weights=w,
        e=e,
        residuals=R,
        n_trimmed=n - n_kept,
        converged=converged,
        objective_trace=tuple(trace),
        n_iter=it,
        fixed_point_residual=float(step),
        method="gmt",
        flags=tuple(sorted(flags)),
    )


def fit_estimator(scores: ScoreSet, estimator: str, config: Optional[GmtConfig] = None) -> GmtFit:
    if estimator == "ls":
        return least_squares(scores)
    if estimator == "gmt":
        return gmt_fit(scores, config or GmtConfig())
    raise ValueError(f"unknown estimator {estimator!r}")


# --------------------------------------------------------------------------
# slope surface and prediction


class Components(Protocol):
    domain: Tuple[float, float]

    def components(self, times) -> np.ndarray: ...


@dataclass(frozen=True)
class FunctionComponents:
    """Component functions given as Python callables (e.g. known truths)."""

    funcs: Tuple[Callable, ...]
    domain: Tuple[float, float] = (0.0, 1.0)

    def components(self, times) -> np.ndarray:
        t = np.asarray(times, dtype=float).ravel()
        return np.column_stack([f(t) for f in self.funcs]) if self.funcs else np.zeros((t.size, 0))


def _domain_of(obj) -> Tuple[float, float]:
    if hasattr(obj, "basis"):
        return tuple(obj.basis.domain)
    return tuple(obj.domain)


def _check_grid(grid, domain, name):
    g = np.asarray(grid, dtype=float).ravel()
    a, b = domain
    if g.size and (g.min() < a or g.max() > b):
        raise ValueError(f"{name} lies outside [{a}, {b}]")
    return g


@dataclass(frozen=True)
class SlopeSurface:
    s_grid: np.ndarray
    t_grid: np.ndarray
    values: np.ndarray
    Theta: np.ndarray
    components_x: object = field(repr=False)
    components_y: object = field(repr=False)

    def rows(self):
        """``(s, t, beta)`` triples, s varying slowest."""
        for i, s in enumerate(self.s_grid):
            for j, t in enumerate(self.t_grid):
                yield s, t, self.values[i, j]


def slope_surface(fit, model_x, model_y, s_grid, t_grid) -> SlopeSurface:
    """``beta(s, t) = phi(s)^T Theta psi(t)`` on a rectangular grid.

    ``fit`` may be a GmtFit or a bare ``p x q`` coefficient matrix.
    """
    Theta = np.asarray(fit.Theta_hat if isinstance(fit, GmtFit) else fit, dtype=float)
    s = _check_grid(s_grid, _domain_of(model_x), "s_grid")
    t = _check_grid(t_grid, _domain_of(model_y), "t_grid")
    Phi = model_x.components(s)
    Psi = model_y.components(t)
    if Phi.shape[1] != Theta.shape[0] or Psi.shape[1] != Theta.shape[1]:
        raise ValueError("Theta dimensions do not match the component counts")
    return SlopeSurface(s, t, Phi @ Theta @ Psi.T, Theta, model_x, model_y)


@dataclass(frozen=True)
class ResponsePrediction:
    t_grid: np.ndarray
    curves: np.ndarray  # (n, len(t_grid))
    ids: Tuple[str, ...]
    mse: Optional[np.ndarray] = None  # per-curve mean squared residual at observed times
    root_median_se: Optional[float] = None


def predict_response(fit, scores: ScoreSet, model_y, t_grid, sample_y=None) -> ResponsePrediction:
    """Predicted response curves ``mu_Y(t) + psi(t)^T Theta^T U_i``.

    With ``sample_y`` the per-curve mean squared residual at the observed
    times and the root of its median over curves are also returned.
    """
    Theta = np.asarray(fit.Theta_hat if isinstance(fit, GmtFit) else fit, dtype=float)
    if Theta.shape[0] != scores.p or Theta.shape[1] != model_y.p:
        raise ValueError("dimension mismatch between Theta, scores and the Y model")
    t = _check_grid(t_grid, model_y.basis.domain, "t_grid")
    fitted_scores = scores.U_hat @ Theta  # (n, q)
    curves = model_y.mean(t)[None, :] + fitted_scores @ model_y.components(t).T
    if sample_y is None:
        return ResponsePrediction(t, curves, scores.ids)
    if sample_y.n != scores.n:
        raise ValueError("sample_y and scores differ in the number of curves")
    mse = np.empty(scores.n)
    for i, c in enumerate(sample_y):
        pred = model_y.mean(c.times) + model_y.components(c.times) @ fitted_scores[i]
        mse[i] = np.mean((c.values - pred) ** 2)
    return ResponsePrediction(t, curves, scores.ids, mse, float(math.sqrt(np.median(mse))))
