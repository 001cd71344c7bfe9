"""Reduced-rank Normal and t functional principal components by EM.

Each curve is modelled as ``x_i = B_i xi + B_i H Lambda^{1/2} z_i + sigma eps_i``
where ``(z_i, eps_i)`` is standard Normal or standard multivariate t with
``nu`` degrees of freedom. The EM works on the unconstrained loading matrix
``G = H Lambda^{1/2}`` and only needs, per curve, ``B_i^T B_i``, ``B_i^T x_i``,
``x_i^T x_i`` and ``m_i``; the J-orthonormal components and their variances
are extracted from ``G G^T`` after convergence.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .data import DataError, LongitudinalSample, align
from .splines import SplineBasis, evaluate_basis, gram_matrix

logger = logging.getLogger(__name__)


class FitError(RuntimeError):
    """The reduced-rank model cannot be fitted to the given data."""


class ConvergenceWarning(UserWarning):
    pass


class DegenerateVarianceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FitOptions:
    tol: float = 1e-8
    max_iter: int = 500
    # ridge factors used only to build the starting values
    init_mean_penalty: float = 1e-6
    init_curve_ridge: float = 1e-2
    # SQUAREM extrapolation, safeguarded so the likelihood never decreases
    accelerate: bool = True


@dataclass(frozen=True)
class ReducedRankModel:
    """Fitted reduced-rank model.

    ``H`` has J-orthonormal columns, so the component functions
    ``phi_k(s) = b(s)^T H[:, k]`` are orthonormal in L2 of the domain.
    ``nu = inf`` denotes the Normal model.
    """

    basis: SplineBasis
    xi: np.ndarray
    H: np.ndarray
    lam: np.ndarray
    sigma: float
    nu: float
    loglik: float = float("nan")
    loglik_trace: Tuple[float, ...] = ()
    n_iter: int = 0
    converged: bool = True
    n_curves: int = 0
    n_obs: int = 0
    flags: Tuple[str, ...] = ()

    @property
    def p(self) -> int:
        return self.H.shape[1]

    @property
    def is_normal(self) -> bool:
        return math.isinf(self.nu)

    def mean(self, times) -> np.ndarray:
        return evaluate_basis(self.basis, times) @ self.xi

    def components(self, times) -> np.ndarray:
        """Component functions at ``times``, shape ``(len(times), p)``."""
        return evaluate_basis(self.basis, times) @ self.H

    def explained_variance(self) -> np.ndarray:
        return self.lam / self.lam.sum()

    def n_params(self) -> int:
        N, p = self.H.shape
        return N + N * p - p * (p - 1) // 2 + 1

    def to_dict(self) -> Dict:
        return {
            "degree": self.basis.degree,
            "knots": list(self.basis.interior_knots),
            "domain": list(self.basis.domain),
            "xi": self.xi.tolist(),
            "H": self.H.ravel().tolist(),
            "lambda": self.lam.tolist(),
            "sigma": self.sigma,
            "nu": "inf" if math.isinf(self.nu) else self.nu,
            "p": self.p,
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Dict) -> "ReducedRankModel":
        basis = SplineBasis(int(d["degree"]), tuple(d["knots"]), tuple(d["domain"]))
        lam = np.asarray(d["lambda"], dtype=float)
        H = np.asarray(d["H"], dtype=float).reshape(basis.n_basis, lam.size)
        nu = float("inf") if d["nu"] in ("inf", "Infinity", None) else float(d["nu"])
        return cls(
            basis=basis,
            xi=np.asarray(d["xi"], dtype=float),
            H=H,
            lam=lam,
            sigma=float(d["sigma"]),
            nu=nu,
            loglik=float(d.get("loglik", float("nan"))),
            n_iter=int(d.get("n_iter", 0)),
            converged=bool(d.get("converged", True)),
            flags=tuple(d.get("flags", ())),
        )


@dataclass(frozen=True)
class ScoreSet:
    """Predicted component scores of paired X and Y curves."""

    U_hat: np.ndarray
    V_hat: np.ndarray
    D2: np.ndarray
    lambda_hat: np.ndarray
    ids: Tuple[str, ...] = ()

    @classmethod
    def from_scores(cls, U, V, lambda_hat, ids=()) -> "ScoreSet":
        U = np.atleast_2d(np.asarray(U, dtype=float))
        V = np.atleast_2d(np.asarray(V, dtype=float))
        lam = np.asarray(lambda_hat, dtype=float)
        if U.shape[0] != V.shape[0]:
            raise ValueError("U and V must have the same number of rows")
        return cls(U, V, mahalanobis(U, lam), lam, tuple(ids))

    @property
    def n(self) -> int:
        return self.U_hat.shape[0]

    @property
    def p(self) -> int:
        return self.U_hat.shape[1]

    @property
    def q(self) -> int:
        return self.V_hat.shape[1]

    def subset(self, index) -> "ScoreSet":
        index = np.asarray(index)
        ids = tuple(self.ids[i] for i in index) if self.ids else ()
        return ScoreSet.from_scores(self.U_hat[index], self.V_hat[index], self.lambda_hat, ids)


def mahalanobis(U: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Squared distances ``sum_k U_ik^2 / lam_k``."""
    return np.sum(U**2 / lam[None, :], axis=1)


@dataclass
class _Stats:
    BtB: np.ndarray  # (n, N, N)
    Btx: np.ndarray  # (n, N)
    xtx: np.ndarray  # (n,)
    m: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return self.m.size


def _sufficient_stats(sample: LongitudinalSample, basis: SplineBasis) -> _Stats:
    N = basis.n_basis
    n = sample.n
    BtB = np.empty((n, N, N))
    Btx = np.empty((n, N))
    xtx = np.empty(n)
    m = np.empty(n)
    for i, c in enumerate(sample):
        B = evaluate_basis(basis, c.times)
        BtB[i] = B.T @ B
        Btx[i] = B.T @ c.values
        xtx[i] = c.values @ c.values
        m[i] = len(c)
    return _Stats(BtB, Btx, xtx, m)


def _estep(stats: _Stats, xi, G, s2, nu):
    """Posterior moments of z_i, Mahalanobis residuals and the log-likelihood."""
    p = G.shape[1]
    BtBG = stats.BtB @ G  # (n, N, p)
    GtBtBG = np.einsum("jk,ijl->ikl", G, BtBG)
    M = np.eye(p)[None] + GtBtBG / s2
    S = np.linalg.inv(M)
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    Btr = stats.Btx - stats.BtB @ xi
    rtr = stats.xtx - 2.0 * stats.Btx @ xi + np.einsum("ij,j->i", stats.BtB @ xi, xi)
    Gtr = Btr @ G  # (n, p)
    SGtr = np.einsum("ikl,il->ik", S, Gtr)
    mz = SGtr / s2
    delta = (rtr - np.einsum("ik,ik->i", Gtr, SGtr) / s2) / s2
    delta = np.maximum(delta, 0.0)
    _, logdetM = np.linalg.slogdet(M)
    logdet = stats.m * math.log(s2) + logdetM
    m = stats.m
    if math.isinf(nu):
        ll = -0.5 * np.sum(m * math.log(2 * math.pi) + logdet + delta)
        tau = np.ones_like(delta)
    else:
        ll = np.sum(
            gammaln(0.5 * (nu + m))
            - gammaln(0.5 * nu)
            - 0.5 * m * math.log(nu * math.pi)
            - 0.5 * logdet
            - 0.5 * (nu + m) * np.log1p(delta / nu)
        )
        tau = (nu + m) / (nu + delta)
    return mz, S, tau, delta, float(ll)


def _mstep(stats: _Stats, mz, S, tau, s2_floor):
    n, N = stats.Btx.shape
    p = mz.shape[1]
    P = p + 1
    Ez = np.concatenate([tau[:, None], tau[:, None] * mz], axis=1)  # E[tau z~]
    Ezz = np.zeros((n, P, P))
    Ezz[:, 0, 0] = tau
    Ezz[:, 0, 1:] = Ez[:, 1:]
    Ezz[:, 1:, 0] = Ez[:, 1:]
    Ezz[:, 1:, 1:] = tau[:, None, None] * mz[:, :, None] * mz[:, None, :] + S
    K = np.einsum("iab,ijk->ajbk", Ezz, stats.BtB).reshape(P * N, P * N)
    rhs = np.einsum("ij,ia->aj", stats.Btx, Ez).reshape(P * N)
    K = 0.5 * (K + K.T)
    try:
        factor = _cho_factor(K)
    except np.linalg.LinAlgError:
        raise FitError("singular M-step: rank too large for the available data") from None
    sol = cho_solve(factor, rhs, check_finite=False)
    Gt = sol.reshape(P, N).T
    xi, G = Gt[:, 0].copy(), Gt[:, 1:].copy()
    s2 = (np.sum(tau * stats.xtx) - sol @ rhs) / stats.m.sum()
    # parameter expansion: fit a free location and scatter for z, then fold
    # them back into (xi, G); same fixed points, much faster along the
    # mean/score direction when scores are well determined
    mu = Ez[:, 1:].sum(axis=0) / tau.sum()
    Psi = Ezz[:, 1:, 1:].sum(axis=0) / n - np.outer(mu, mu) * (tau.sum() / n)
    try:
        root = np.linalg.cholesky(0.5 * (Psi + Psi.T))
    except np.linalg.LinAlgError:
        return xi, G, max(s2, s2_floor)
    return xi + G @ mu, G @ root, max(s2, s2_floor)


def _cho_factor(K):
    scale = np.max(np.abs(np.diag(K)))
    if not np.all(np.isfinite(K)) or scale <= 0:
        raise np.linalg.LinAlgError("non-finite or zero system")
    c = cho_factor(K, lower=True, check_finite=False)
    d = np.abs(np.diag(c[0]))
    if d.min() <= 1e-7 * d.max():
        raise np.linalg.LinAlgError("ill-conditioned system")
    return c


def _close(ll, prev, tol):
    return abs(ll - prev) <= tol * max(abs(prev), 1.0)


def _plain_em(stats, xi, G, s2, nu, s2_floor, options):
    trace: List[float] = []
    for it in range(options.max_iter + 1):
        mz, S, tau, _, ll = _estep(stats, xi, G, s2, nu)
        trace.append(ll)
        if it > 0 and _close(ll, trace[-2], options.tol):
            return (xi, G, s2), trace, it, True
        if it == options.max_iter:
            break
        xi, G, s2 = _mstep(stats, mz, S, tau, s2_floor)
    return (xi, G, s2), trace, options.max_iter, False


_MAX_BACKTRACK = 4


def _canonical_rotation(G: np.ndarray) -> np.ndarray:
    """Representative of ``{G R : R orthogonal}`` with orthogonal columns.

    The likelihood only sees ``G G'``, so without this the iterates drift
    along the rotation orbit and extrapolation stalls.
    """
    _, s, Vt = np.linalg.svd(G, full_matrices=False)
    Gc = G @ Vt.T
    signs = np.where(Gc.sum(axis=0) < 0, -1.0, 1.0)
    return Gc * signs[None, :]


def _squarem(stats, xi, G, s2, nu, s2_floor, options):
    """SQUAREM cycles of two EM steps plus an extrapolated step.

    ``max_iter`` bounds the number of EM-map evaluations. The extrapolated
    point is kept only if its likelihood is at least that of the first EM
    step, so the recorded trace is nondecreasing.
    """
    N, p = G.shape

    def pack(x, g, v):
        return np.concatenate([x, g.ravel(), [v]])

    def unpack(th):
        return th[:N], th[N:-1].reshape(N, p), th[-1]

    def em_map(th):
        x, g, v = unpack(th)
        mz, S, tau, _, ll = _estep(stats, x, g, v, nu)
        x, g, v = _mstep(stats, mz, S, tau, s2_floor)
        return pack(x, _canonical_rotation(g), v), ll

    theta = pack(xi, G, s2)
    trace: List[float] = []
    evals = 0
    cycle_ll = None
    while True:
        th1, ll0 = em_map(theta)
        evals += 1
        trace.append(ll0)
        if cycle_ll is not None and _close(ll0, cycle_ll, options.tol):
            return unpack(theta), trace, evals - 1, True
        if evals >= options.max_iter:
            return unpack(theta), trace, evals - 1, False
        cycle_ll = ll0
        th2, ll1 = em_map(th1)
        evals += 1
        trace.append(ll1)
        th0 = theta
        r = th1 - th0
        v = th2 - th1 - r
        nv = np.linalg.norm(v)
        theta = th2
        if nv == 0:
            continue
        alpha = min(-np.linalg.norm(r) / nv, -1.0)
        # halve the step toward alpha = -1 (plain EM) until it pays off
        for _ in range(_MAX_BACKTRACK):
            if alpha > -1.0 - 1e-3 or evals + 1 >= options.max_iter:
                break
            cand = th0 - 2 * alpha * r + alpha**2 * v
            ll_c = -np.inf
            if cand[-1] > s2_floor and np.all(np.isfinite(cand)):
                try:
                    th_next, ll_c = em_map(cand)
                except FitError:
                    pass
                evals += 1
            if np.isfinite(ll_c) and ll_c >= ll1:
                trace.append(ll_c)
                theta = th_next
                break
            alpha = 0.5 * (alpha - 1.0)


def _second_difference(N: int) -> np.ndarray:
    if N < 3:
        return np.zeros((0, N))
    return np.diff(np.eye(N), n=2, axis=0)


def _initial_values(stats: _Stats, Lchol: np.ndarray, p: int, options: FitOptions):
    N = stats.Btx.shape[1]
    A = stats.BtB.sum(axis=0)
    D = _second_difference(N)
    kappa = options.init_mean_penalty * np.trace(A) / N
    xi = np.linalg.solve(A + kappa * D.T @ D + 1e-12 * np.trace(A) / N * np.eye(N), stats.Btx.sum(axis=0))

    Btr = stats.Btx - stats.BtB @ xi
    ridge = options.init_curve_ridge * np.trace(stats.BtB, axis1=1, axis2=2) / N
    dev = np.linalg.solve(stats.BtB + ridge[:, None, None] * np.eye(N)[None], Btr[:, :, None])[:, :, 0]
    C = dev.T @ dev / stats.n
    # principal directions in the L2 metric of the spline space
    Cw = Lchol.T @ C @ Lchol
    evals, evecs = np.linalg.eigh(0.5 * (Cw + Cw.T))
    order = np.argsort(evals)[::-1][:p]
    ev = np.maximum(evals[order], 0.0)
    G = np.linalg.solve(Lchol.T, evecs[:, order]) * np.sqrt(ev)[None, :]

    coef = xi[None, :] + dev
    resid = stats.xtx - 2 * np.einsum("ij,ij->i", coef, stats.Btx) + np.einsum(
        "ij,ijk,ik->i", coef, stats.BtB, coef
    )
    total = stats.xtx - 2 * stats.Btx @ xi + np.einsum("ij,j->i", stats.BtB @ xi, xi)
    s2 = max(resid.sum(), 1e-4 * total.sum()) / stats.m.sum()
    if not s2 > 0:
        s2 = 1.0
    return xi, G, s2


def _orthonormalize(G: np.ndarray, basis: SplineBasis, J: np.ndarray, Lchol: np.ndarray):
    """J-orthonormal components, nonincreasing variances, deterministic signs."""
    p = G.shape[1]
    W = Lchol.T @ G
    # eigenvectors of L^T G G^T L from the SVD of L^T G
    Q, sv, _ = np.linalg.svd(W, full_matrices=False)
    lam = sv**2
    H = np.linalg.solve(Lchol.T, Q)
    order = np.argsort(-lam, kind="stable")
    lam, H = lam[order], H[:, order]
    integrals = _basis_integrals(basis)
    for k in range(p):
        h = H[:, k]
        area = integrals @ h
        scale = integrals @ np.abs(h)
        if abs(area) > 1e-12 * scale:
            flip = area < 0
        else:
            # first basis function is the only one nonzero at the left endpoint
            flip = h[0] < 0
        if flip:
            H[:, k] = -h
    return H, lam


def _basis_integrals(basis: SplineBasis) -> np.ndarray:
    k = basis.knots
    d = basis.degree
    N = basis.n_basis
    return (k[d + 1 : d + 1 + N] - k[:N]) / (d + 1)


def fit_reduced_rank(
    sample: LongitudinalSample,
    basis: SplineBasis,
    p: int,
    nu: float = float("inf"),
    options: Optional[FitOptions] = None,
) -> ReducedRankModel:
    """Fit a rank-``p`` reduced-rank model by EM.

    Parameters
    ----------
    sample : LongitudinalSample
        Curves to model; each needs at least one observation.
    basis : SplineBasis
        Spline basis for the mean and the components.
    p : int
        Number of components.
    nu : float
        Degrees of freedom of the t model; ``math.inf`` gives the Normal model.
    options : FitOptions, optional
        Convergence controls.

    Returns
    -------
    ReducedRankModel
        ``converged`` is False (and a ``ConvergenceWarning`` issued) when
        ``max_iter`` was reached first.

    Raises
    ------
    FitError
        When the data cannot identify a rank-``p`` model.
    """
    options = options or FitOptions()
    if p < 1:
        raise ValueError("rank p must be >= 1")
    if not nu > 0:
        raise ValueError("nu must be positive or inf")
    if tuple(sample.domain) != tuple(basis.domain):
        a, b = basis.domain
        if any(c.times.min() < a or c.times.max() > b for c in sample):
            raise DataError("sample times fall outside the basis domain")
    N = basis.n_basis
    if sample.n < p + 1 or sample.n_obs < N * (p + 1):
        raise FitError(
            f"insufficient data for rank {p}: {sample.n} curves, {sample.n_obs} observations "
            f"(need >= {p + 1} curves and >= {N * (p + 1)} observations)"
        )

    stats = _sufficient_stats(sample, basis)
    J = gram_matrix(basis)
    Lchol = np.linalg.cholesky(J)
    xi, G, s2 = _initial_values(stats, Lchol, p, options)
    scale2 = max(float(np.sum(stats.xtx) / stats.m.sum()), 1e-300)
    s2_floor = 1e-12 * scale2

    if options.accelerate:
        (xi, G, s2), trace, n_iter, converged = _squarem(stats, xi, G, s2, nu, s2_floor, options)
    else:
        (xi, G, s2), trace, n_iter, converged = _plain_em(stats, xi, G, s2, nu, s2_floor, options)

    flags = []
    if not converged:
        flags.append("not_converged")
        warnings.warn(
            f"EM did not converge in {options.max_iter} iterations (rank {p}, nu={nu})",
            ConvergenceWarning,
            stacklevel=2,
        )
    H, lam = _orthonormalize(G, basis, J, Lchol)
    lam_floor = 1e-12 * max(lam.max(initial=0.0), s2, 1e-300)
    if np.any(lam <= lam_floor):
        flags.append("degenerate_variance")
        warnings.warn(
            "some component variances are numerically zero; they were floored",
            DegenerateVarianceWarning,
            stacklevel=2,
        )
        lam = np.maximum(lam, max(lam_floor, 1e-300))
    return ReducedRankModel(
        basis=basis,
        xi=xi,
        H=H,
        lam=lam,
        sigma=math.sqrt(s2),
        nu=float(nu),
        loglik=trace[-1],
        loglik_trace=tuple(trace),
        n_iter=n_iter,
        converged=converged,
        n_curves=sample.n,
        n_obs=sample.n_obs,
        flags=tuple(flags),
    )


def score_curves(model: ReducedRankModel, sample: LongitudinalSample) -> np.ndarray:
    """Posterior means ``E[U_i | x_i]`` of the component scores, shape ``(n, p)``.

    Given the mixing weight, U_i is conditionally Normal with a mean that
    does not depend on the weight, so the same predictor serves the Normal
    and the t models.
    """
    stats = _sufficient_stats(sample, model.basis)
    G = model.H * np.sqrt(model.lam)[None, :]
    s2 = model.sigma**2
    mz, _, _, _, _ = _estep(stats, model.xi, G, s2, model.nu)
    return mz * np.sqrt(model.lam)[None, :]


def loglik(model: ReducedRankModel, sample: LongitudinalSample) -> float:
    """Observed-data log-likelihood of ``sample`` under ``model``."""
    stats = _sufficient_stats(sample, model.basis)
    G = model.H * np.sqrt(model.lam)[None, :]
    return _estep(stats, model.xi, G, model.sigma**2, model.nu)[4]


def predict_scores(
    model_x: ReducedRankModel,
    model_y: ReducedRankModel,
    sample_x: LongitudinalSample,
    sample_y: LongitudinalSample,
) -> ScoreSet:
    """Score vectors for paired samples plus the X-score Mahalanobis distances."""
    align(sample_x, sample_y)
    U = score_curves(model_x, sample_x)
    V = score_curves(model_y, sample_y)
    return ScoreSet(U, V, mahalanobis(U, model_x.lam), model_x.lam.copy(), tuple(sample_x.ids))


@dataclass(frozen=True)
class RankSelection:
    rank: int
    criterion: str
    scores: Dict[int, float]
    loglik: Dict[int, float]
    explained_variance: Dict[int, np.ndarray]
    failures: Dict[int, str] = field(default_factory=dict)
    models: Dict[int, ReducedRankModel] = field(default_factory=dict, repr=False)


def information_criterion(model: ReducedRankModel, criterion: str = "BIC") -> float:
    k = model.n_params()
    crit = criterion.upper()
    if crit == "AIC":
        return -2 * model.loglik + 2 * k
    if crit == "BIC":
        return -2 * model.loglik + k * math.log(model.n_curves)
    raise ValueError(f"unknown criterion {criterion!r}")


def select_rank(
    sample: LongitudinalSample,
    basis: SplineBasis,
    p_max: int,
    nu: float = float("inf"),
    criterion: str = "BIC",
    options: Optional[FitOptions] = None,
) -> RankSelection:
    """Rank in ``1..p_max`` minimizing AIC or BIC.

    BIC penalizes with the log of the number of curves.
    """
    if p_max < 1:
        raise ValueError("p_max must be >= 1")
    scores, lls, ev, failures, models = {}, {}, {}, {}, {}
    for p in range(1, p_max + 1):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ConvergenceWarning)
                model = fit_reduced_rank(sample, basis, p, nu, options)
        except FitError as exc:
            failures[p] = str(exc)
            continue
        models[p] = model
        scores[p] = information_criterion(model, criterion)
        lls[p] = model.loglik
        ev[p] = model.explained_variance()
    if not scores:
        raise FitError(f"all rank candidates failed: {failures}")
    best = min(scores, key=lambda k: (scores[k], k))
    return RankSelection(best, criterion.upper(), scores, lls, ev, failures, models)
