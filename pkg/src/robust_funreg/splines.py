"""Clamped B-spline bases on a bounded interval.

Evaluation uses the triangular Cox-de Boor scheme vectorized over the
evaluation points; inner products use Gauss-Legendre rules placed on each
knot span, which are exact for products of two splines of the same degree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis of a given degree on ``domain``.

    Parameters
    ----------
    degree : int
        Polynomial degree (3 for cubic splines).
    interior_knots : tuple of float
        Sorted knots strictly inside the domain.
    domain : (float, float)
        Interval ``[a, b]`` on which the basis is defined.
    """

    degree: int
    interior_knots: Tuple[float, ...]
    domain: Tuple[float, float]
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        a, b = (float(v) for v in self.domain)
        if not b > a:
            raise ValueError(f"empty domain [{a}, {b}]")
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        inner = tuple(float(k) for k in self.interior_knots)
        if any(k <= a or k >= b for k in inner):
            raise ValueError("interior knots must lie strictly inside the domain")
        if any(k2 <= k1 for k1, k2 in zip(inner, inner[1:])):
            raise ValueError("interior knots must be strictly increasing")
        object.__setattr__(self, "domain", (a, b))
        object.__setattr__(self, "interior_knots", inner)
        full = np.concatenate([np.full(self.degree + 1, a), inner, np.full(self.degree + 1, b)])
        full.setflags(write=False)
        object.__setattr__(self, "knots", full)

    @property
    def n_basis(self) -> int:
        return len(self.interior_knots) + self.degree + 1

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot locations including both endpoints."""
        a, b = self.domain
        return np.array([a, *self.interior_knots, b])

    def __call__(self, times) -> np.ndarray:
        return evaluate_basis(self, times)


def build_basis(domain: Sequence[float], n_interior_knots: int, degree: int = 3) -> SplineBasis:
    """Basis with ``n_interior_knots`` equally spaced knots inside ``domain``."""
    a, b = (float(v) for v in domain)
    if not b > a:
        raise ValueError(f"empty domain [{a}, {b}]")
    if n_interior_knots < 0:
        raise ValueError("n_interior_knots must be >= 0")
    if degree < 1:
        raise ValueError("degree must be >= 1")
    inner = np.linspace(a, b, n_interior_knots + 2)[1:-1]
    return SplineBasis(degree=int(degree), interior_knots=tuple(inner), domain=(a, b))


def _span_index(basis: SplineBasis, t: np.ndarray) -> np.ndarray:
    """Index ``i`` of the knot span with ``knots[i] <= t < knots[i+1]``.

    The right endpoint is assigned to the last nonempty span.
    """
    k = basis.knots
    d = basis.degree
    idx = np.searchsorted(k, t, side="right") - 1
    return np.clip(idx, d, basis.n_basis - 1)


def evaluate_basis(basis: SplineBasis, times) -> np.ndarray:
    """Design matrix ``B[j, l] = b_l(times[j])`` of shape ``(len(times), N)``.

    Raises
    ------
    ValueError
        If any time lies outside the basis domain.
    """
    t = np.asarray(times, dtype=float).ravel()
    n_basis = basis.n_basis
    if t.size == 0:
        return np.zeros((0, n_basis))
    a, b = basis.domain
    if np.any(t < a) or np.any(t > b) or not np.all(np.isfinite(t)):
        raise ValueError(f"times must lie in [{a}, {b}]")

    k = basis.knots
    d = basis.degree
    span = _span_index(basis, t)
    m = t.size
    # nonzero basis functions on each point's span: N[:, r] = b_{span-d+r}
    vals = np.zeros((m, d + 1))
    vals[:, 0] = 1.0
    left = np.zeros((m, d + 1))
    right = np.zeros((m, d + 1))
    for j in range(1, d + 1):
        left[:, j] = t - k[span + 1 - j]
        right[:, j] = k[span + j] - t
        saved = np.zeros(m)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = vals[:, r] / denom
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved

    out = np.zeros((m, n_basis))
    cols = span[:, None] - d + np.arange(d + 1)[None, :]
    np.put_along_axis(out, cols, vals, axis=1)
    return out


def span_quadrature(breakpoints: np.ndarray, nodes_per_span: int) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights over consecutive breakpoints."""
    x, w = np.polynomial.legendre.leggauss(nodes_per_span)
    lo = np.asarray(breakpoints[:-1], dtype=float)
    hi = np.asarray(breakpoints[1:], dtype=float)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def gram_matrix(basis: SplineBasis) -> np.ndarray:
    """Exact Gram matrix ``J[l, m] = int b_l(s) b_m(s) ds`` over the domain."""
    nodes, weights = span_quadrature(basis.breakpoints, basis.degree + 1)
    B = evaluate_basis(basis, nodes)
    J = (B * weights[:, None]).T @ B
    return 0.5 * (J + J.T)
