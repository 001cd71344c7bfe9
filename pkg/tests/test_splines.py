import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robust_funreg.splines import SplineBasis, build_basis, evaluate_basis, gram_matrix


def cox_de_boor(i, d, t, knots):
    """Textbook recursion, one basis function at one point."""
    if d == 0:
        return 1.0 if knots[i] <= t < knots[i + 1] else 0.0
    out = 0.0
    if knots[i + d] > knots[i]:
        out += (t - knots[i]) / (knots[i + d] - knots[i]) * cox_de_boor(i, d - 1, t, knots)
    if knots[i + d + 1] > knots[i + 1]:
        out += (knots[i + d + 1] - t) / (knots[i + d + 1] - knots[i + 1]) * cox_de_boor(i + 1, d - 1, t, knots)
    return out


def test_bernstein_case_at_left_endpoint():
    basis = build_basis((0, 1), 0, 3)
    assert basis.n_basis == 4
    np.testing.assert_array_equal(evaluate_basis(basis, [0.0]), [[1.0, 0.0, 0.0, 0.0]])


def test_bernstein_case_matches_polynomials():
    basis = build_basis((0, 1), 0, 3)
    t = np.linspace(0, 1, 11)
    bern = np.column_stack([(1 - t) ** 3, 3 * t * (1 - t) ** 2, 3 * t**2 * (1 - t), t**3])
    np.testing.assert_allclose(evaluate_basis(basis, t), bern, atol=1e-14)


def test_knot_value_frozen_oracle():
    # values from the recursion above, frozen
    basis = build_basis((0, 1), 3, 3)
    row = evaluate_basis(basis, [0.5])[0]
    np.testing.assert_allclose(row, [0, 0, 1 / 6, 2 / 3, 1 / 6, 0, 0], atol=1e-12)
    row = evaluate_basis(basis, [0.3])[0]
    np.testing.assert_allclose(row, [0, 0.128, 0.588, 0.2826666666666666, 0.0013333333333333324, 0, 0], atol=1e-12)


@pytest.mark.parametrize("n_knots,degree", [(3, 3), (7, 3), (4, 2), (5, 1), (2, 4)])
def test_matches_recursive_oracle(n_knots, degree):
    basis = build_basis((-1.0, 2.0), n_knots, degree)
    k = list(basis.knots)
    t = np.linspace(-1.0, 2.0, 37)[:-1]  # the recursion is right-open at b
    B = evaluate_basis(basis, t)
    oracle = np.array([[cox_de_boor(i, degree, s, k) for i in range(basis.n_basis)] for s in t])
    np.testing.assert_allclose(B, oracle, atol=1e-12)


def test_right_endpoint_is_last_basis_function():
    basis = build_basis((0, 1), 7, 3)
    row = evaluate_basis(basis, [1.0])[0]
    assert row[-1] == pytest.approx(1.0)
    assert row.sum() == pytest.approx(1.0, abs=1e-14)


def test_partition_of_unity_1000_points():
    rng = np.random.default_rng(3)
    basis = build_basis((0, 1), 7, 3)
    B = evaluate_basis(basis, rng.uniform(0, 1, 1000))
    assert np.max(np.abs(B.sum(axis=1) - 1)) < 1e-12
    assert B.min() >= 0


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 12),
    st.integers(1, 5),
    st.floats(-5, 5),
    st.floats(0.1, 10),
    st.lists(st.floats(0, 1), min_size=1, max_size=30),
)
def test_partition_of_unity_property(n_knots, degree, a, width, u):
    basis = build_basis((a, a + width), n_knots, degree)
    t = a + width * np.asarray(u)
    t = np.clip(t, a, a + width)
    B = evaluate_basis(basis, t)
    assert B.shape == (t.size, n_knots + degree + 1)
    assert np.all(B >= -1e-15)
    assert np.allclose(B.sum(axis=1), 1.0, atol=1e-12)


def test_empty_times_give_empty_matrix():
    basis = build_basis((0, 1), 7, 3)
    assert evaluate_basis(basis, []).shape == (0, 11)


def test_times_outside_domain_raise():
    basis = build_basis((0, 1), 3, 3)
    with pytest.raises(ValueError):
        evaluate_basis(basis, [1.5])
    with pytest.raises(ValueError):
        evaluate_basis(basis, [-1e-9])


@pytest.mark.parametrize("args", [((1, 1), 3, 3), ((1, 0), 3, 3), ((0, 1), -1, 3), ((0, 1), 3, 0)])
def test_build_basis_rejects_bad_input(args):
    with pytest.raises(ValueError):
        build_basis(*args)


def test_knots_must_be_interior_and_sorted():
    with pytest.raises(ValueError):
        SplineBasis(3, (0.0, 0.5), (0.0, 1.0))
    with pytest.raises(ValueError):
        SplineBasis(3, (0.6, 0.4), (0.0, 1.0))


def test_gram_matches_trapezoid_oracle():
    basis = build_basis((0, 2), 4, 3)
    J = gram_matrix(basis)
    t = np.linspace(0, 2, 200_001)
    B = evaluate_basis(basis, t)
    dense = np.array([[np.trapezoid(B[:, i] * B[:, j], t) for j in range(basis.n_basis)] for i in range(basis.n_basis)])
    np.testing.assert_allclose(J, dense, atol=1e-10)


def test_gram_symmetric_positive_definite():
    J = gram_matrix(build_basis((0, 3), 9, 3))
    np.testing.assert_array_equal(J, J.T)
    assert np.linalg.eigvalsh(J).min() > 0


def test_gram_step_basis_is_diagonal_of_span_lengths():
    basis = SplineBasis(0, (0.2, 0.5), (0.0, 1.0))
    np.testing.assert_allclose(gram_matrix(basis), np.diag([0.2, 0.3, 0.5]), atol=1e-15)


def test_gram_integrates_constant():
    # sum_lm J_lm = integral of (sum_l b_l)^2 = b - a
    basis = build_basis((0, 5), 6, 3)
    assert gram_matrix(basis).sum() == pytest.approx(5.0, rel=1e-13)
