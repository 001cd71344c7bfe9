"""Sandwich covariance, Wald test and resampling inference for Theta.

``vec`` stacks columns: entry ``k + l p`` of ``vec(Theta)`` is ``Theta[k, l]``.
The per-observation estimating function is ``rho'(e) w (R kron U)``, i.e.
the Theta-gradient of the GMt criterion with its ``-2 Sigma^{-1}`` factor
removed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import partial
from typing import Dict, Optional, Tuple

import numpy as np

from .chi2 import chi2_quantile, chi2_sf
from .fpca import ScoreSet
from .parallel import map_indexed
from .regression import (
    GmtConfig,
    GmtFit,
    RegressionError,
    fit_estimator,
    gmt_fit,
)


class InferenceError(RuntimeError):
    pass


def vec(M: np.ndarray) -> np.ndarray:
    return np.asarray(M).ravel(order="F")


def unvec(v: np.ndarray, p: int, q: int) -> np.ndarray:
    return np.asarray(v).reshape((p, q), order="F")


def _kron_rows(R: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Row i is ``R_i kron U_i``."""
    n = U.shape[0]
    return np.einsum("il,ik->ilk", R, U).reshape(n, -1)


@dataclass(frozen=True)
class SandwichEstimate:
    A_hat: np.ndarray  # symmetrized
    B_hat: np.ndarray
    Omega_hat: np.ndarray
    n: int
    A_raw: Optional[np.ndarray] = field(default=None, repr=False)
    asymmetry: float = 0.0


@dataclass(frozen=True)
class TestResult:
    Q: float
    df: int
    p_value: float
    method: str
    n_resamples: int = 0
    n_failed: int = 0
    omega: Optional[np.ndarray] = field(default=None, repr=False)
    flags: Tuple[str, ...] = ()

    __test__ = False  # not a pytest class

    def rejects(self, level: float) -> bool:
        return self.Q >= chi2_quantile(1.0 - level, self.df)

    def to_dict(self) -> Dict:
        return {
            "method": self.method,
            "Q": self.Q,
            "df": self.df,
            "p_value": self.p_value,
            "n_resamples": self.n_resamples,
            "n_failed": self.n_failed,
            "omega": None if self.omega is None else self.omega.ravel().tolist(),
            "flags": list(self.flags),
        }


def _loss_terms(fit: GmtFit, scores: ScoreSet, config: Optional[GmtConfig]):
    if fit.method == "ls" or config is None:
        return np.ones(scores.n), np.zeros(scores.n)
    loss = config.loss(scores.q)
    return loss.prime(fit.e), loss.second(fit.e)


def sandwich(fit: GmtFit, scores: ScoreSet, config: Optional[GmtConfig] = None) -> SandwichEstimate:
    """Plug-in ``A``, ``B`` and ``Omega = A^{-1} B A^{-1}`` at the fitted values.

    ``A`` is symmetrized before inversion; the max-norm of its asymmetric
    part is kept in ``asymmetry``. For a least-squares fit (or ``config``
    None) the loss is linear, so ``rho' = 1`` and ``rho'' = 0``.
    """
    U = scores.U_hat
    n, p, q = scores.n, scores.p, scores.q
    R = fit.residuals
    w = fit.weights
    r1, r2 = _loss_terms(fit, scores, config)
    SinvR = np.linalg.solve(fit.Sigma_hat, R.T).T
    a = _kron_rows(SinvR, U)
    b = _kron_rows(R, U)
    c2 = 2.0 * r2 * w**2
    A = (a * c2[:, None]).T @ b / n
    A += np.kron(np.eye(q), (U * (r1 * w)[:, None]).T @ U / n)
    g = b * (r1 * w)[:, None]
    B = g.T @ g / n
    B = 0.5 * (B + B.T)
    asym = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    A_sym = 0.5 * (A + A.T)
    try:
        if np.linalg.cond(A_sym) > 1e12:
            raise np.linalg.LinAlgError
        A_inv = np.linalg.inv(A_sym)
    except np.linalg.LinAlgError:
        raise InferenceError("sandwich matrix A is singular; use bootstrap_covariance instead") from None
    Omega = A_inv @ B @ A_inv
    return SandwichEstimate(A_sym, B, 0.5 * (Omega + Omega.T), n, A, asym)


def ls_covariance(fit: GmtFit, scores: ScoreSet) -> np.ndarray:
    """Homoscedastic least-squares ``Omega = E(R R^T) kron {E(U U^T)}^{-1}``."""
    U = scores.U_hat
    n = scores.n
    R = fit.residuals
    ERR = R.T @ R / n
    EUU = U.T @ U / n
    return np.kron(ERR, np.linalg.inv(EUU))


def _quad_form(v: np.ndarray, M: np.ndarray) -> Tuple[float, bool]:
    """``v^T M^{-1} v``; falls back to the pseudo-inverse when M is singular."""
    try:
        if np.linalg.cond(M) > 1e14:
            raise np.linalg.LinAlgError
        return float(v @ np.linalg.solve(M, v)), False
    except np.linalg.LinAlgError:
        return float(v @ np.linalg.pinv(M) @ v), True


def wald_from_omega(Theta: np.ndarray, Omega: np.ndarray, n: int, method: str, **kw) -> TestResult:
    v = vec(Theta)
    qf, singular = _quad_form(v, Omega)
    Q = max(n * qf, 0.0)
    flags = ("omega_singular",) if singular else ()
    return TestResult(Q, v.size, chi2_sf(Q, v.size), method, omega=Omega, flags=flags, **kw)


def wald_test(fit: GmtFit, sandwich_est: SandwichEstimate) -> TestResult:
    """``Q = n vec(Theta)^T A B^{-1} A vec(Theta)`` against chi2 with ``p q`` df."""
    v = vec(fit.Theta_hat)
    A, B = sandwich_est.A_hat, sandwich_est.B_hat
    try:
        if np.linalg.cond(B) > 1e14:
            raise np.linalg.LinAlgError
        Av = A @ v
        Q = float(sandwich_est.n * Av @ np.linalg.solve(B, Av))
    except np.linalg.LinAlgError:
        if not np.any(v):
            Q = 0.0
        else:
            raise InferenceError("B is singular; the Wald statistic is undefined") from None
    Q = max(Q, 0.0)
    return TestResult(Q, v.size, chi2_sf(Q, v.size), "wald_sandwich", omega=sandwich_est.Omega_hat)


def wald_ls(fit: GmtFit, scores: ScoreSet) -> TestResult:
    return wald_from_omega(fit.Theta_hat, ls_covariance(fit, scores), scores.n, "wald_ls")


def analytic_test(fit: GmtFit, scores: ScoreSet, config: Optional[GmtConfig]) -> TestResult:
    """Wald test matched to the estimator: LS covariance for LS, sandwich for GMt."""
    if fit.method == "ls":
        return wald_ls(fit, scores)
    return wald_test(fit, sandwich(fit, scores, config))


# --------------------------------------------------------------------------
# resampling


def _rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def _boot_replicate(b, scores, estimator, config, seed):
    idx = _rng(seed, b).integers(0, scores.n, scores.n)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_estimator(scores.subset(idx), estimator, config)
    except (RegressionError, np.linalg.LinAlgError):
        return None
    if fit.method == "gmt" and not fit.converged:
        return None
    return vec(fit.Theta_hat)


@dataclass(frozen=True)
class BootstrapResult:
    Omega_hat: np.ndarray
    test: TestResult
    thetas: np.ndarray  # (n_ok, p q)
    n_failed: int


def bootstrap_covariance(
    scores: ScoreSet,
    config: Optional[GmtConfig],
    n_boot: int,
    seed: int,
    estimator: str = "gmt",
    fit: Optional[GmtFit] = None,
    n_jobs: int = 1,
) -> BootstrapResult:
    """Pairs bootstrap of ``vec(Theta)``: ``Omega = n cov(vec Theta*)``.

    Weights are recomputed from each resample's distances. Failed
    replicate fits are dropped and counted.
    """
    if n_boot < 50:
        raise ValueError("n_boot must be >= 50")
    if fit is None:
        fit = fit_estimator(scores, estimator, config)
    task = partial(_boot_replicate, scores=scores, estimator=estimator, config=config, seed=seed)
    results = map_indexed(task, range(n_boot), n_jobs)
    ok = [r for r in results if r is not None]
    n_failed = n_boot - len(ok)
    if n_failed > 0.2 * n_boot:
        raise InferenceError(f"{n_failed} of {n_boot} bootstrap fits failed")
    thetas = np.array(ok)
    Omega = scores.n * np.cov(thetas, rowvar=False, ddof=1).reshape(thetas.shape[1], thetas.shape[1])
    test = wald_from_omega(
        fit.Theta_hat, Omega, scores.n, "wald_bootstrap", n_resamples=n_boot, n_failed=n_failed
    )
    return BootstrapResult(Omega, test, thetas, n_failed)


def _perm_replicate(b, scores, estimator, config, seed):
    perm = _rng(seed, b).permutation(scores.n)
    permuted = ScoreSet.from_scores(scores.U_hat, scores.V_hat[perm], scores.lambda_hat, scores.ids)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = fit_estimator(permuted, estimator, config)
            return analytic_test(fit, permuted, config).Q
    except (RegressionError, InferenceError, np.linalg.LinAlgError):
        return None


def permutation_test(
    scores: ScoreSet,
    config: Optional[GmtConfig],
    n_perm: int,
    seed: int,
    estimator: str = "gmt",
    n_jobs: int = 1,
) -> TestResult:
    """Permutation p-value ``(1 + #{Q* >= Q}) / (n_ok + 1)``.

    Y-score rows are permuted against the X-scores and each permuted
    sample gets its own fit and covariance estimate.
    """
    if n_perm < 99:
        raise ValueError("n_perm must be >= 99")
    fit = fit_estimator(scores, estimator, config)
    observed = analytic_test(fit, scores, config)
    task = partial(_perm_replicate, scores=scores, estimator=estimator, config=config, seed=seed)
    results = map_indexed(task, range(n_perm), n_jobs)
    ok = np.array([r for r in results if r is not None])
    n_failed = n_perm - ok.size
    if n_failed > 0.2 * n_perm:
        raise InferenceError(f"{n_failed} of {n_perm} permutation fits failed")
    return permutation_p_value(observed.Q, ok, fit.p * fit.q, n_perm, n_failed, observed.omega)


def permutation_p_value(Q_obs, Q_perm, df, n_perm=None, n_failed=0, omega=None) -> TestResult:
    Q_perm = np.asarray(Q_perm, dtype=float)
    p = (1 + int(np.count_nonzero(Q_perm >= Q_obs))) / (Q_perm.size + 1)
    return TestResult(
        float(Q_obs), int(df), p, "permutation",
        n_resamples=int(n_perm if n_perm is not None else Q_perm.size),
        n_failed=int(n_failed),
        omega=omega,
    )


# --------------------------------------------------------------------------
# the averaged criterion M(Theta, Sigma) = mean_i rho(e_i) + log|Sigma| and its derivatives


def mean_objective(Theta, Sigma, U, V, w, loss) -> float:
    R = V - U @ Theta
    e = w * np.einsum("ij,ij->i", R, np.linalg.solve(Sigma, R.T).T)
    return float(np.mean(loss(e)) + np.linalg.slogdet(Sigma)[1])


def objective_gradient(Theta, Sigma, U, V, w, loss) -> np.ndarray:
    """``d M / d vec(Theta) = mean_i -2 rho'(e_i) w_i vec(U_i R_i^T Sigma^{-1})``."""
    R = V - U @ Theta
    SinvR = np.linalg.solve(Sigma, R.T).T
    e = w * np.einsum("ij,ij->i", R, SinvR)
    c = -2.0 * loss.prime(e) * w
    return (_kron_rows(SinvR, U) * c[:, None]).mean(axis=0)


def objective_hessian(Theta, Sigma, U, V, w, loss) -> np.ndarray:
    """Second derivative of ``M`` in ``vec(Theta)``.

    ``mean_i 4 rho''(e) w^2 (Sigma^{-1}R kron U)(Sigma^{-1}R kron U)^T
    + 2 rho'(e) w (Sigma^{-1} kron U U^T)``.
    """
    n, q = V.shape
    R = V - U @ Theta
    Sinv = np.linalg.inv(Sigma)
    SinvR = R @ Sinv
    e = w * np.einsum("ij,ij->i", R, SinvR)
    a = _kron_rows(SinvR, U)
    H = (a * (4.0 * loss.second(e) * w**2)[:, None]).T @ a / n
    H += np.kron(Sinv, (U * (2.0 * loss.prime(e) * w)[:, None]).T @ U / n)
    return H
