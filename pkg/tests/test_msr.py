import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morsesmale._rng import rng_for
from morsesmale.kernel import Sample
from morsesmale.msr import ExtrapolationError, fit_msr, msr_cv_bandwidth, msr_predict, ols


def plane_sample(n=300, seed=0):
    rng = rng_for(seed, 31)
    X = rng.uniform(-1, 1, (n, 2))
    return Sample(X, 2 + 3 * X[:, 0] - X[:, 1])


def v_sample(n, seed, noise=0.1):
    rng = rng_for(seed, 32, n)
    x = rng.uniform(-1, 1, n)
    return Sample(x[:, None], np.abs(x) + noise * rng.standard_normal(n))


def normal_equations_oracle(X, y):
    """Assemble (A^T A) and A^T y entry by entry, then solve."""
    n, d = X.shape
    G = np.zeros((d + 1, d + 1))
    r = np.zeros(d + 1)
    for i in range(n):
        a = [1.0] + list(X[i])
        for p in range(d + 1):
            r[p] += a[p] * y[i]
            for q in range(d + 1):
                G[p, q] += a[p] * a[q]
    coef = np.linalg.solve(G, r)
    return coef[0], coef[1:]


def test_hyperplane_exact():
    m = fit_msr(plane_sample())
    assert not m.fallback.any()
    np.testing.assert_allclose(m.intercepts, 2.0, atol=1e-8)
    np.testing.assert_allclose(m.slopes, np.tile([3.0, -1.0], (m.n_cells, 1)), atol=1e-8)
    q = rng_for(1, 33).uniform(-1, 1, (50, 2))
    np.testing.assert_allclose(msr_predict(m, q), 2 + 3 * q[:, 0] - q[:, 1], atol=1e-8)


def test_training_point_reproduced():
    s = plane_sample(200, 2)
    m = fit_msr(s)
    i = int(np.argmax(m.n_points[m.cell_of(s.points)]))
    assert msr_predict(m, s.points[i]) == pytest.approx(s.response[i], abs=1e-10)


def test_v_shape_two_cells():
    m = fit_msr(v_sample(500, 0))
    assert m.n_cells == 2
    slopes = sorted(m.slopes[:, 0])
    assert slopes[0] == pytest.approx(-1, abs=0.1) and slopes[1] == pytest.approx(1, abs=0.1)
    for x in (-0.5, 0.5):
        assert msr_predict(m, [x]) == pytest.approx(0.5, abs=0.15)


@pytest.mark.parametrize("seed", range(20))
def test_coefficients_match_normal_equations(seed):
    rng = rng_for(seed, 34)
    d = 1 + seed % 2
    n = int(rng.integers(30, 80))
    X = rng.normal(size=(n, d))
    y = np.sin(2 * X[:, 0]) + 0.3 * rng.standard_normal(n)
    m = fit_msr(Sample(X, y), resolution=24)
    cell = m.cell_of(X)
    for c in range(m.n_cells):
        idx = np.flatnonzero(cell == c)
        if m.fallback[c]:
            expect = y[idx].mean() if len(idx) else y.mean()
            assert m.intercepts[c] == pytest.approx(expect, rel=1e-12, abs=1e-12)
            continue
        mu, beta = normal_equations_oracle(X[idx], y[idx])
        scale = 1 + abs(mu) + np.abs(beta).max()
        assert abs(m.intercepts[c] - mu) <= 1e-10 * scale
        np.testing.assert_allclose(m.slopes[c], beta, atol=1e-10 * scale)


def test_outside_box_raises():
    m = fit_msr(plane_sample())
    with pytest.raises(ExtrapolationError) as err:
        msr_predict(m, [50.0, 0.0])
    assert 0 <= err.value.nearest_cell < m.n_cells


def test_input_errors():
    with pytest.raises(ValueError):
        fit_msr(Sample(np.zeros((3, 2)) + np.arange(3)[:, None], np.arange(3.0)))
    with pytest.raises(ValueError):
        fit_msr(Sample(np.random.default_rng(0).random((10, 2))))
    with pytest.raises(TypeError):
        fit_msr(np.zeros((10, 2)))


def test_ols_ridge_on_collinear_points():
    X = np.c_[np.arange(6.0), 2 * np.arange(6.0)]
    mu, beta, ridged = ols(X, 1 + X[:, 0])
    assert ridged
    np.testing.assert_allclose(mu + X @ beta, 1 + X[:, 0], atol=1e-6)


def test_serialisation():
    m = fit_msr(v_sample(300, 1))
    d = json.loads(m.to_json())
    assert d["schema"] == "msr-v1" and len(d["cells"]) == m.n_cells
    assert d["meta"]["h"] == m.pilot.h


def test_cv_prefers_fitted_bandwidth():
    rng = rng_for(0, 35)
    x = rng.uniform(0, 2 * np.pi, 300)
    s = Sample(x[:, None], np.sin(2 * x) + 0.1 * rng.standard_normal(300))
    h, scores = msr_cv_bandwidth(s, [0.1, 10.0], folds=5, seed=1)
    assert h == 0.1 and scores[0.1] < scores[10.0]


def test_cv_constant_data_ties_to_largest():
    x = np.linspace(0, 1, 60)
    s = Sample(x[:, None], np.full(60, 3.0))
    h, scores = msr_cv_bandwidth(s, [0.2, 0.5, 1.0], folds=3)
    assert h == 1.0


def test_cv_invariant_to_row_order():
    s = v_sample(200, 3)
    perm = np.random.default_rng(4).permutation(200)
    a = msr_cv_bandwidth(s, [0.1, 0.3, 1.0], folds=4, seed=2)
    b = msr_cv_bandwidth(Sample(s.points[perm], s.response[perm]), [0.1, 0.3, 1.0], folds=4, seed=2)
    assert a[0] == b[0]
    for h in a[1]:
        assert a[1][h] == pytest.approx(b[1][h], rel=1e-9)


def test_cv_argument_checks():
    s = v_sample(50, 0)
    with pytest.raises(ValueError):
        msr_cv_bandwidth(s, [0.3])
    with pytest.raises(ValueError):
        msr_cv_bandwidth(s, [0.3, 0.4], folds=1)


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_ols_beats_intercept_only_per_cell(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 2))
    y = X[:, 0] ** 2 - X[:, 1] + 0.2 * rng.standard_normal(60)
    m = fit_msr(Sample(X, y), resolution=20)
    cell = m.cell_of(X)
    for c in range(m.n_cells):
        idx = np.flatnonzero(cell == c)
        if not len(idx):
            continue
        fit = m.intercepts[c] + X[idx] @ m.slopes[c]
        assert np.mean((y[idx] - fit) ** 2) <= np.var(y[idx]) + 1e-12


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_prediction_piecewise_linear(seed):
    rng = np.random.default_rng(seed)
    s = v_sample(150, seed % 7)
    m = fit_msr(s)
    q = rng.uniform(-1, 1, (40, 1))
    c = m.cell_of(q)
    p = msr_predict(m, q)
    for i in range(40):
        for j in range(40):
            if c[i] == c[j]:
                assert p[i] - p[j] == pytest.approx(float(m.slopes[c[i]] @ (q[i] - q[j])), abs=1e-12)
