from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import BSpline
from scipy.stats import norm

from reworkd.cate import (
    CateFit,
    ConfidenceBand,
    IndicatorBasis,
    build_basis,
    cate_lower_bound,
    cate_predict,
    multiplier_bootstrap_band,
    project_scores,
)
from reworkd.errors import DegenerateSupportError, ExtrapolationError, ParameterError


def _gauss_solve(A, b):
    """Plain Gaussian elimination with partial pivoting."""
    A = [list(map(float, row)) + [float(v)] for row, v in zip(A, b)]
    n = len(A)
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(A[r][c]))
        A[c], A[p] = A[p], A[c]
        for r in range(c + 1, n):
            f = A[r][c] / A[c][c]
            for j in range(c, n + 1):
                A[r][j] -= f * A[c][j]
    x = [0.0] * n
    for r in range(n - 1, -1, -1):
        x[r] = (A[r][n] - sum(A[r][j] * x[j] for j in range(r + 1, n))) / A[r][r]
    return np.array(x)


# ---------------------------------------------------------------- basis


def test_uniform_median_knot():
    z = np.random.default_rng(0).random(5000)
    b = build_basis(z, 3, 5)
    k = b.axes[0].knots
    assert k.size == 1 and abs(k[0] - 0.5) <= 0.02


def test_partition_of_unity_example():
    z = np.random.default_rng(1).normal(size=300)
    b = build_basis(z)
    rows = b.design(np.linspace(z.min(), z.max(), 57))
    assert np.max(np.abs(rows.sum(axis=1) - 1)) < 1e-10


def test_partition_of_unity_many_points():
    rng = np.random.default_rng(2)
    z = rng.gamma(2.0, size=1000)
    b = build_basis(z)
    B = b.design(rng.uniform(z.min(), z.max(), 10_000))
    assert np.max(np.abs(B.sum(axis=1) - 1)) < 1e-10 and B.min() >= 0


def test_tensor_columns():
    rng = np.random.default_rng(3)
    b = build_basis((rng.random(200), rng.random(200)), 2, 5)
    assert b.n_columns == 25 and b.design(np.column_stack([rng.random(4), rng.random(4)])).shape == (4, 25)


def test_tensor_is_kronecker_of_axes():
    rng = np.random.default_rng(4)
    Z = rng.random((100, 2))
    b = build_basis(Z, 2, 5)
    q = rng.random((6, 2))
    B = b.design(q)
    for i in range(6):
        expected = np.kron(b.axes[0].evaluate(q[i, :1]), b.axes[1].evaluate(q[i, 1:]))
        assert np.allclose(B[i], expected[0], atol=1e-15)


@pytest.mark.parametrize("degree,df", [(3, 5), (2, 5), (3, 7), (1, 4), (0, 1)])
def test_basis_matches_scipy(degree, df):
    rng = np.random.default_rng(degree * 10 + df)
    z = rng.normal(size=400)
    b = build_basis(z, degree, df)
    ax = b.axes[0]
    x = np.sort(np.concatenate([rng.uniform(z.min(), z.max(), 200), [z.min(), z.max()]]))
    ours = b.design(x)
    ref = BSpline.design_matrix(x, ax.full_knots, degree).toarray()
    assert ours.shape[1] == df
    assert np.max(np.abs(ours - ref)) < 1e-12


def test_basis_errors():
    with pytest.raises(ParameterError):
        build_basis(np.arange(10.0), 3, 3)
    with pytest.raises(DegenerateSupportError):
        build_basis(np.ones(10))


def test_clamp_flags_out_of_range():
    b = build_basis(np.linspace(0, 1, 50))
    zc, flag = b.clamp(np.array([-1.0, 0.5, 2.0]))
    assert flag.tolist() == [True, False, True] and zc[:, 0].tolist() == [0.0, 0.5, 1.0]


# ---------------------------------------------------------------- projection


def test_saturated_indicator_gives_group_means():
    rng = np.random.default_rng(5)
    z = rng.integers(1, 4, 90).astype(float)
    psi = rng.normal(size=90)
    fit = project_scores(psi, IndicatorBasis(np.array([1.0, 2.0, 3.0])), z)
    for g, beta in zip((1, 2, 3), fit.beta_hat):
        assert beta == pytest.approx(psi[z == g].mean(), abs=1e-12)
    theta, _ = cate_predict(fit, z[:5])
    assert np.allclose(theta, [psi[z == v].mean() for v in z[:5]], atol=1e-12)


def test_constant_scores_constant_cate():
    z = np.random.default_rng(6).random(80)
    fit = project_scores(np.full(80, 5.0), build_basis(z), z)
    theta, se = cate_predict(fit, np.linspace(0, 1, 13))
    assert np.allclose(theta, 5.0, atol=1e-10) and np.allclose(se, 0.0, atol=1e-7)


def test_projection_matches_gaussian_elimination():
    rng = np.random.default_rng(7)
    z = rng.random(50)
    psi = rng.normal(size=50)
    basis = build_basis(z)
    fit = project_scores(psi, basis, z)
    B = basis.design(z)
    assert np.max(np.abs(fit.beta_hat - _gauss_solve(B.T @ B, B.T @ psi))) < 1e-8


def test_hc0_sandwich_explicit():
    rng = np.random.default_rng(8)
    z = rng.random(60)
    psi = rng.normal(size=60)
    fit = project_scores(psi, build_basis(z), z)
    B = build_basis(z).design(z)
    Binv = np.linalg.inv(B.T @ B)
    e = psi - B @ Binv @ B.T @ psi
    meat = sum(np.outer(B[i], B[i]) * e[i] ** 2 for i in range(60))
    assert np.allclose(fit.vcov, Binv @ meat @ Binv, atol=1e-12)
    assert np.linalg.eigvalsh(fit.vcov).min() >= -1e-10


def test_se_quadratic_form_oracle():
    rng = np.random.default_rng(9)
    z = rng.random(200)
    fit = project_scores(rng.normal(size=200), build_basis(z), z)
    q = rng.random(10)
    _, se = cate_predict(fit, q)
    for qi, s in zip(q, se):
        b = fit.basis.design(np.array([qi]))[0]
        acc = 0.0
        for i in range(len(b)):
            for j in range(len(b)):
                acc += b[i] * fit.vcov[i, j] * b[j]
        assert s == pytest.approx(np.sqrt(acc), rel=1e-10)


def test_zero_vcov_gives_zero_se():
    z = np.linspace(0, 1, 30)
    fit = project_scores(np.sin(z), build_basis(z), z)
    fit0 = CateFit(fit.basis, fit.beta_hat, np.zeros_like(fit.vcov))
    assert np.all(cate_predict(fit0, z)[1] == 0)


def test_rank_deficient_design_falls_back_to_ridge():
    z = np.repeat([0.0, 1.0], 20)
    basis = build_basis(np.linspace(0, 1, 50))
    fit = project_scores(np.random.default_rng(0).normal(size=40), basis, z)
    assert fit.warnings


def test_predict_clamps_and_flags():
    z = np.linspace(0, 1, 40)
    fit = project_scores(z, build_basis(z), z)
    t_in, _ = cate_predict(fit, [1.0])
    t_out, _, flag = cate_predict(fit, [3.0], return_flag=True)
    assert flag[0] and t_out[0] == pytest.approx(t_in[0])


def test_fit_dict_round_trip():
    rng = np.random.default_rng(10)
    Z = rng.random((100, 2))
    fit = project_scores(rng.normal(size=100), build_basis(Z, 2, 5), Z, ("a", "b"))
    back = CateFit.from_dict(fit.to_dict())
    q = rng.random((7, 2))
    assert np.array_equal(cate_predict(fit, q)[0], cate_predict(back, q)[0])
    assert back.z_columns == ("a", "b")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(3, 5), (2, 5), (3, 6)]))
def test_projection_properties(seed, dd):
    rng = np.random.default_rng(seed)
    n = 120
    z = rng.normal(size=n)
    psi = np.sin(z) + rng.normal(size=n)
    fit = project_scores(psi, build_basis(z, *dd), z)
    B = fit.design
    assert np.max(np.abs(B.T @ fit.residuals)) / n < 1e-8
    assert abs(cate_predict(fit, z)[0].mean() - psi.mean()) < 1e-8
    assert np.linalg.eigvalsh(fit.vcov).min() >= -1e-10


# ---------------------------------------------------------------- bootstrap band


def test_zero_residuals_collapse_band():
    z = np.linspace(0, 1, 60)
    basis = build_basis(z)
    psi = basis.design(z) @ np.arange(5.0)
    fit = project_scores(psi, basis, z)
    band = multiplier_bootstrap_band(fit, np.linspace(0, 1, 11), n_boot=200, seed=1)
    assert np.allclose(band.lower, band.estimate, atol=1e-9) and np.allclose(band.upper, band.estimate, atol=1e-9)


def test_alpha_half_gives_median():
    rng = np.random.default_rng(11)
    z = rng.random(300)
    fit = project_scores(rng.normal(size=300), build_basis(z), z)
    band = multiplier_bootstrap_band(fit, np.linspace(0.1, 0.9, 5), alpha=0.5, n_boot=1001, seed=2)
    # both bounds are the replicate median, widened to include the estimate
    assert np.allclose(np.minimum(band.upper - band.estimate, band.estimate - band.lower), 0.0)
    assert np.all(band.upper - band.lower < 0.2 * (cate_predict(fit, band.grid)[1] + 1e-12))


def test_band_width_matches_normal_interval():
    rng = np.random.default_rng(12)
    n, alpha = 5000, 0.05
    z = rng.random(n)
    psi = rng.normal(size=n)
    basis = build_basis(z, 0, 1)  # constant basis
    fit = project_scores(psi, basis, z)
    band = multiplier_bootstrap_band(fit, np.array([0.5]), alpha=alpha, n_boot=2000, seed=3)
    # the band is two-sided at level 2 alpha
    analytic = 2 * norm.ppf(1 - alpha) * psi.std() / np.sqrt(n)
    width = float(band.upper[0] - band.lower[0])
    assert abs(width / analytic - 1) <= 0.15


def test_band_deterministic_and_ordered():
    rng = np.random.default_rng(13)
    z = rng.random(200)
    fit = project_scores(rng.normal(size=200), build_basis(z), z)
    g = np.linspace(0, 1, 21)
    a = multiplier_bootstrap_band(fit, g, seed=4)
    b = multiplier_bootstrap_band(fit, g, seed=4)
    assert np.array_equal(a.lower, b.lower) and np.array_equal(a.upper, b.upper)
    assert np.all(a.lower <= a.estimate) and np.all(a.estimate <= a.upper)
    assert a.level_convention == "2alpha"


def test_band_chunking_invariant():
    rng = np.random.default_rng(14)
    z = rng.random(150)
    fit = project_scores(rng.normal(size=150), build_basis(z), z)
    g = np.linspace(0, 1, 9)
    a = multiplier_bootstrap_band(fit, g, n_boot=300, seed=5, chunk=100)
    b = multiplier_bootstrap_band(fit, g, n_boot=300, seed=5, chunk=300)
    assert np.allclose(a.lower, b.lower, atol=1e-12)


def test_few_replicates_warns():
    z = np.random.default_rng(15).random(50)
    fit = project_scores(z, build_basis(z), z)
    band = multiplier_bootstrap_band(fit, [0.5], n_boot=50)
    assert band.warnings


def test_band_csv_round_trip(tmp_path):
    z = np.random.default_rng(16).random(80)
    fit = project_scores(z**2, build_basis(z), z)
    band = multiplier_bootstrap_band(fit, np.linspace(0, 1, 7), n_boot=100)
    band.write_csv(tmp_path / "b.csv")
    back = ConfidenceBand.read_csv(tmp_path / "b.csv")
    assert np.array_equal(back.lower, band.lower) and np.array_equal(back.grid, band.grid)


# ---------------------------------------------------------------- lower bound


def _band(grid, lower):
    grid = np.asarray(grid, float)
    lower = np.asarray(lower, float)
    return ConfidenceBand(grid, lower + 1, lower, lower + 2)


def test_lower_bound_on_grid_point():
    b = _band([0, 1, 2], [0.3, -0.1, 0.4])
    assert cate_lower_bound(b, 1.0) == -0.1


def test_lower_bound_midpoint():
    b = _band([0, 1, 2], [0.3, -0.1, 0.4])
    assert cate_lower_bound(b, 1.5) == pytest.approx(0.15)


def test_lower_bound_extrapolation():
    with pytest.raises(ExtrapolationError):
        cate_lower_bound(_band([0, 1], [0, 1]), 1.5)


def test_lower_bound_matches_piecewise_linear_oracle():
    rng = np.random.default_rng(17)
    grid = np.sort(rng.uniform(-2, 2, 30))
    lower = rng.normal(size=30)
    b = _band(grid, lower)
    q = rng.uniform(grid[0], grid[-1], 100)
    for x in q:
        i = max(j for j in range(29) if grid[j] <= x)
        t = (x - grid[i]) / (grid[i + 1] - grid[i])
        assert cate_lower_bound(b, x) == pytest.approx(lower[i] + t * (lower[i + 1] - lower[i]), abs=1e-12)
