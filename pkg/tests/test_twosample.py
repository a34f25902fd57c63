import json
from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morsesmale._rng import rng_for
from morsesmale.decomposition import lattice_mesh
from morsesmale.kernel import KdeField, Sample
from morsesmale.twosample import (
    DensityDifferenceField,
    MseReport,
    bonferroni_feasible,
    bootstrap_linf_threshold,
    density_difference,
    energy_permutation_test,
    energy_statistic,
    mse_test,
    significance_regions,
    twosample_viz,
)


def normals(n, seed, shift=0.0, d=2):
    return rng_for(seed, 51).normal(size=(n, d)) + shift


def energy_oracle(X, Y):
    """Energy distance by explicit enumeration over all pairs."""
    X, Y = np.asarray(X, float), np.asarray(Y, float)
    dist = lambda a, b: float(np.sqrt(np.sum((a - b) ** 2)))
    n, m = len(X), len(Y)
    xy = sum(dist(a, b) for a, b in product(X, Y))
    xx = sum(dist(a, b) for a, b in product(X, X))
    yy = sum(dist(a, b) for a, b in product(Y, Y))
    return 2 * xy / (n * m) - xx / n ** 2 - yy / m ** 2


def energy_oracle_exact(x, y):
    """Exact rational energy distance for 1-D integer samples."""
    n, m = len(x), len(y)
    xy = sum(abs(a - b) for a in x for b in y)
    xx = sum(abs(a - b) for a in x for b in x)
    yy = sum(abs(a - b) for a in y for b in y)
    return Fraction(2 * xy, n * m) - Fraction(xx, n * n) - Fraction(yy, m * m)


# ---------- density difference ----------

def test_identical_samples_give_zero_field():
    X = normals(50, 0)
    f = density_difference(X, X.copy(), h=0.4)
    q = normals(30, 1) * 2
    assert np.all(f.value(q) == 0.0) and np.all(f.gradient(q) == 0.0)


def test_swap_negates_exactly():
    f = density_difference(normals(40, 2), normals(60, 3, 0.5), h=0.3)
    g = f.swapped()
    q = normals(25, 4) * 1.5
    np.testing.assert_array_equal(g.value(q), -f.value(q))
    np.testing.assert_array_equal(g.gradient(q), -f.gradient(q))


def test_swap_of_arguments_negates():
    X, Y = normals(40, 2), normals(60, 3, 0.5)
    q = normals(25, 4) * 1.5
    a = density_difference(X, Y, h=0.3)
    b = density_difference(Y, X, h=0.3, scale=a.scale)
    np.testing.assert_array_equal(b.value(q), -a.value(q))


@pytest.mark.parametrize("d", [1, 2, 3])
def test_difference_matches_two_kde_subtraction(d):
    X, Y = normals(15, 5, d=d), normals(20, 6, 0.3, d=d)
    f = density_difference(X, Y, h=0.5)
    q = normals(10, 7, d=d)
    s = f.scale

    def kde(P, x):
        tot = 0.0
        for p in P:
            u = (x - p) / (0.5 * s)
            tot += np.exp(-0.5 * np.dot(u, u))
        return tot / (len(P) * np.prod(0.5 * s) * (2 * np.pi) ** (d / 2))

    oracle = [kde(X, x) - kde(Y, x) for x in q]
    np.testing.assert_allclose(f.value(q), oracle, rtol=1e-12, atol=1e-15)


def test_difference_checks():
    with pytest.raises(ValueError):
        density_difference(normals(10, 0, d=2), normals(10, 1, d=3))
    with pytest.raises(ValueError):
        DensityDifferenceField(KdeField(Sample(normals(10, 0)), 0.3), KdeField(Sample(normals(10, 1)), 0.4))


# ---------- bootstrap threshold ----------

def test_bootstrap_quantile_monotone_and_single():
    X, Y = normals(60, 8), normals(60, 9)
    probe = lattice_mesh([[-3, -3], [3, 3]], 16).nodes
    lam, draws = bootstrap_linf_threshold(X, Y, 0.4, n_boot=30, probe=probe, seed=1, return_draws=True)
    lo = bootstrap_linf_threshold(X, Y, 0.4, n_boot=30, level=0.5, probe=probe, seed=1)
    assert lo <= lam and lam in draws
    one, d1 = bootstrap_linf_threshold(X, Y, 0.4, n_boot=1, probe=probe, seed=1, return_draws=True)
    assert one == d1[0] == draws[0]


def test_bootstrap_deterministic():
    X, Y = normals(60, 10), normals(60, 11)
    a = bootstrap_linf_threshold(X, Y, 0.4, n_boot=50, seed=3)
    b = bootstrap_linf_threshold(X, Y, 0.4, n_boot=50, seed=3)
    assert a == b


def test_bootstrap_checks():
    X = normals(10, 0)
    with pytest.raises(ValueError):
        bootstrap_linf_threshold(X, X, 0.4, n_boot=0)
    with pytest.raises(ValueError):
        bootstrap_linf_threshold(X, X, 0.4, probe=np.zeros((0, 2)))


def test_bootstrap_threshold_shrinks_with_n():
    probe = lattice_mesh([[-3, -3], [3, 3]], 16).nodes
    med = []
    for n in (100, 400):
        lams = []
        for rep in range(5):
            X = normals(n, 100 + rep)
            lams.append(bootstrap_linf_threshold(X, X.copy(), 0.4, n_boot=30, probe=probe, seed=rep))
        med.append(np.median(lams))
    assert 0 < med[1] < med[0]


# ---------- significance regions ----------

def test_regions_hand_built():
    f = np.array([0.5, -0.2, 0.0, 0.31, -0.31, 0.3, -0.3, 2.0, -5.0, 0.1])
    plus, minus = significance_regions(f, 0.3)
    assert np.flatnonzero(plus).tolist() == [0, 3, 7]
    assert np.flatnonzero(minus).tolist() == [4, 8]
    p0, m0 = significance_regions(f, 0.0)
    np.testing.assert_array_equal(p0 | m0, f != 0)
    pb, mb = significance_regions(f, 10.0)
    assert not pb.any() and not mb.any()
    with pytest.raises(ValueError):
        significance_regions(f, -1.0)


def test_regions_swap_nodewise():
    f = density_difference(normals(80, 12), normals(80, 13, [0.7, 0.0]), h=0.4)
    nodes = lattice_mesh([[-3, -3], [3, 3]], 20).nodes
    p, m = significance_regions(f, 0.01, nodes)
    ps, ms = significance_regions(f.swapped(), 0.01, nodes)
    np.testing.assert_array_equal(p, ms)
    np.testing.assert_array_equal(m, ps)


# ---------- visualisation report ----------

def test_viz_shift_has_both_signs():
    rep = twosample_viz(normals(200, 14, [0.8, 0.0]), normals(200, 15), lam=0.0, resolution=32)
    assert rep.r_plus.max() > 0 and rep.r_minus.max() > 0
    assert np.all(rep.r_plus + rep.r_minus <= 1 + 1e-12)
    d = json.loads(rep.to_json())
    assert d["schema"] == "tsviz-v1" and len(d["cells"]) == len(rep.cells)


def test_viz_mirror_swap():
    X = normals(300, 16, [0.6, 0.0])
    Y = X * [-1.0, 1.0]
    a = twosample_viz(X, Y, lam=0.02, resolution=40)
    b = twosample_viz(Y, X, lam=0.02, resolution=40)
    assert len(a.cells) == len(b.cells)
    refl = a.centers * [-1.0, 1.0]
    for i, c in enumerate(b.centers):
        j = int(np.argmin(np.linalg.norm(refl - c, axis=1)))
        assert np.linalg.norm(refl[j] - c) < 1e-6
        assert b.r_plus[i] == a.r_plus[j] and b.r_minus[i] == a.r_minus[j]
        assert b.volumes[i] == pytest.approx(a.volumes[j])


def test_viz_null_mostly_clean():
    clean = 0
    for r in range(100):
        rr = rng_for(r, 2)
        X, Y = rr.normal(size=(400, 2)), rr.normal(size=(400, 2))
        rep = twosample_viz(X, Y, resolution=32, n_boot=100, seed=r)
        clean += rep.r_plus.max() == 0 and rep.r_minus.max() == 0
    assert clean >= 95


# ---------- energy distance ----------

def test_energy_trivial_cases():
    X = normals(12, 17)
    assert energy_statistic(X, X[::-1].copy()) == 0.0
    assert energy_statistic([[0.0, 0.0]], [[3.0, 4.0]]) == 10.0


def test_energy_two_by_two_hand_sum():
    X = [[0.0, 0.0], [1.0, 0.0]]
    Y = [[0.0, 1.0], [2.0, 0.0]]
    xy = (1 + 2 + np.sqrt(2) + 1) / 4
    expect = 2 * xy - (2 * 1) / 4 - (2 * np.sqrt(5)) / 4
    assert energy_statistic(X, Y) == pytest.approx(expect, abs=1e-15)


@pytest.mark.parametrize("seed", range(25))
def test_energy_integer_points_exact(seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-20, 20, int(rng.integers(1, 6))).tolist()
    y = rng.integers(-20, 20, int(rng.integers(1, 6))).tolist()
    got = energy_statistic(np.array(x, float)[:, None], np.array(y, float)[:, None])
    assert got == pytest.approx(float(energy_oracle_exact(x, y)), rel=1e-14, abs=1e-13)


@pytest.mark.parametrize("seed", range(25))
def test_energy_matches_enumeration(seed):
    rng = np.random.default_rng(1000 + seed)
    d = 1 + seed % 3
    X = rng.normal(size=(int(rng.integers(1, 6)), d))
    Y = rng.normal(size=(int(rng.integers(1, 6)), d))
    assert energy_statistic(X, Y) == pytest.approx(energy_oracle(X, Y), rel=1e-12, abs=1e-14)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 8), st.integers(1, 8))
def test_energy_symmetric(seed, n, m):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
    assert energy_statistic(X, Y) == energy_statistic(Y, X)


def test_energy_dimension_mismatch():
    with pytest.raises(ValueError):
        energy_statistic(np.zeros((2, 2)), np.zeros((2, 3)))


# ---------- permutation test ----------

def test_permutation_identical_samples():
    X = normals(20, 18)
    rep = energy_permutation_test(X, X.copy(), n_perm=99, seed=0)
    assert rep.statistic == 0.0 and rep.p_value == 1.0


def test_permutation_deterministic_and_on_grid():
    X, Y = normals(30, 19), normals(30, 20, 0.3)
    a = energy_permutation_test(X, Y, 99, seed=4)
    b = energy_permutation_test(X, Y, 99, seed=4)
    assert a.to_dict() == b.to_dict()
    k = a.p_value * 100
    assert abs(k - round(k)) < 1e-9 and 1 <= round(k) <= 100


def test_permutation_detects_shift():
    rep = energy_permutation_test(normals(60, 21), normals(60, 22, 1.0), 199, seed=0)
    assert rep.p_value == pytest.approx(1 / 200)


def test_permutation_checks():
    X = normals(3, 0)
    with pytest.raises(ValueError):
        energy_permutation_test(X[:1], X[:2], 99)
    with pytest.raises(ValueError):
        energy_permutation_test(X, X, 10)


def test_permutation_level_under_null():
    hits = 0
    for t in range(200):
        rng = rng_for(7, 52, t)
        rep = energy_permutation_test(rng.normal(size=(30, 2)), rng.normal(size=(30, 2)), 99, seed=t)
        hits += rep.p_value <= 0.05
    assert abs(hits / 200 - 0.05) <= 0.04


# ---------- MSE test ----------

def test_mse_duplicated_data():
    X = normals(400, 23)
    rep = mse_test(X, X.copy(), seed=1, resolution=32)
    tested = [c for c in rep.cells if not c["skipped"]]
    assert tested and all(c["statistic"] == 0.0 for c in tested)
    assert not rep.reject and rep.recompute_reject() == rep.reject


def test_mse_detects_shift_and_bonferroni_contract():
    rep = mse_test(normals(300, 24), normals(300, 25, [1.0, 0.0]), seed=2, resolution=32)
    assert rep.reject and rep.recompute_reject()
    assert rep.threshold == pytest.approx(rep.alpha / rep.L)
    assert rep.L == sum(not c["skipped"] for c in rep.cells)
    d = json.loads(rep.to_json())
    assert d["schema"] == "mse-v1"


def test_mse_inconclusive_when_nothing_testable():
    rep = mse_test(normals(20, 26), normals(20, 27), seed=0, resolution=16, min_cell=50)
    assert rep.inconclusive and rep.L == 0 and not rep.reject


def test_mse_deterministic_and_split_sizes():
    X, Y = normals(101, 28), normals(80, 29, 0.2)
    a = mse_test(X, Y, seed=5, resolution=24, n_perm=49)
    b = mse_test(X, Y, seed=5, resolution=24, n_perm=49)
    assert a.to_json() == b.to_json()
    assert a.meta["split_sizes"] == [50, 51, 40, 40]


def test_mse_checks():
    with pytest.raises(ValueError):
        mse_test(normals(3, 0), normals(10, 1))
    with pytest.raises(ValueError):
        mse_test(normals(10, 0), normals(10, 1), alpha=1.5)


def test_bonferroni_feasibility():
    assert bonferroni_feasible(0.05, 7, 199)
    assert not bonferroni_feasible(0.05, 15, 199)
    assert not bonferroni_feasible(0.05, 0, 199)


@settings(max_examples=40)
@given(st.lists(st.one_of(st.none(), st.integers(1, 200).map(lambda k: k / 200)), min_size=0, max_size=12),
       st.sampled_from([0.01, 0.05, 0.1]))
def test_reject_recomputable(pvals, alpha):
    cells = [{"skipped": p is None, "p_value": p} for p in pvals]
    tested = [p for p in pvals if p is not None]
    L = len(tested)
    reject = bool(L and any(p < alpha / L for p in tested))
    rep = MseReport(L, cells, alpha, alpha / L if L else 0.0, reject, 0, 199)
    assert rep.recompute_reject() == reject
