import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfdefault.meanfield import (RegressionBasis, SingularDesign, WeightedCondOperator, cond_mean_cloud,
                                 cond_mean_regress, weighted_cond)
from mfdefault.paths import build_grid, simulate_ensemble

from conftest import flat


@pytest.fixture(scope="module")
def ens():
    from mfdefault.model import DefaultSpec
    ds = DefaultSpec(1.0, (flat(0.8), flat(0.8)), 1.0)
    return simulate_ensemble(ds, build_grid(1.0, 16), 60, 3, 5)


def test_constant_process(ens):
    for k in range(3):
        est = cond_mean_cloud(ens, np.full((ens.size, 17), 2.5), k)
        assert np.all(est.value == 2.5)


def test_single_member_cloud():
    from mfdefault.model import DefaultSpec
    e = simulate_ensemble(DefaultSpec(1.0, (flat(0.9),), 1.0), build_grid(1.0, 8), 20, 1, 3)
    v = np.random.default_rng(0).normal(size=(e.size, 9))
    est = cond_mean_cloud(e, v, 1)
    kids = e.depth == 1
    assert np.all(est.size[kids] == 1)
    assert np.array_equal(est.value[kids], v[kids])


def test_branch_measurable(ens):
    v = np.random.default_rng(1).normal(size=(ens.size, 17))
    for k in (1, 2):
        ids, _, _, _ = ens.cloud(k)
        est = cond_mean_cloud(ens, v, k).value
        for c in np.unique(ids)[:20]:
            rows = est[ids == c]
            assert np.all(rows == rows[0])


@given(st.integers(0, 2), st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_linear_projection_duality_contraction(ens, k, seed, a, b):
    rng = np.random.default_rng(seed)
    X, Y = rng.normal(size=(2, ens.size, 17))
    _, members, _, _ = ens.cloud(k)
    mean = lambda v: ens.level_mean(v, k)
    assert np.allclose(mean(a * X + b * Y), a * mean(X) + b * mean(Y), rtol=0, atol=1e-12)
    assert np.allclose(mean(mean(X)), mean(X), rtol=0, atol=1e-12)
    lhs, rhs = (mean(X) * Y)[members].sum(), (X * mean(Y))[members].sum()
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))
    assert np.mean(((mean(X) - mean(Y)) ** 2)[members]) <= np.mean(((X - Y) ** 2)[members]) + 1e-12


def test_affine_recovery():
    X = np.random.default_rng(0).normal(size=(500, 2))
    y = 1 + 2 * X[:, 0] - 3 * X[:, 1]
    pred = cond_mean_regress(X, y, RegressionBasis(1, 0.0))
    assert np.max(np.abs(pred(X) - y)) < 1e-10


def test_zero_values():
    X = np.random.default_rng(0).normal(size=(300, 2))
    pred = cond_mean_regress(X, np.zeros(300), RegressionBasis(2))
    assert np.max(np.abs(pred(X))) < 1e-14


def test_singular_design():
    x = np.random.default_rng(0).normal(size=200)
    with pytest.raises(SingularDesign):
        cond_mean_regress(np.c_[x, x + 1e-9 * x ** 2], x, RegressionBasis(1, 0.0))


def test_brownian_martingale_slope():
    from mfdefault.model import DefaultSpec
    e = simulate_ensemble(DefaultSpec(1.0, ()), build_grid(1.0, 16), 100_000, 0, 9)
    Bt, BT = e.B[:, 8], e.B[:, -1]
    pred = cond_mean_regress(Bt, BT, RegressionBasis(1, 0.0))
    slope = pred(np.array([1.0])) - pred(np.array([0.0]))
    resid = BT - pred(Bt)
    se = resid.std() / (Bt.std() * np.sqrt(Bt.size))
    assert abs(slope[0] - 1) < 3 * se


def test_weighted_operator(ens):
    v = np.random.default_rng(2).normal(size=(ens.size, 17))
    unit = WeightedCondOperator.unit(2)
    zero = WeightedCondOperator(tuple(flat(0.0) for _ in range(3)))
    two = WeightedCondOperator(tuple(flat(2.0) for _ in range(3)), 2.0)
    for k in range(3):
        assert np.array_equal(weighted_cond(unit, ens, v, k).value, cond_mean_cloud(ens, v, k).value)
        assert np.all(weighted_cond(zero, ens, v, k).value == 0)
        assert np.allclose(weighted_cond(two, ens, np.full_like(v, 1.5), k).value, 3.0)
    with pytest.raises(ValueError):
        WeightedCondOperator((flat(-1.0),))
