import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfdefault.model import DefaultSpec
from mfdefault.paths import (EmptyCloud, GridMismatch, NonPositiveInputs, PathRecord, ResourceLimit,
                             build_grid, export_ensemble, ito_product_residual, sample_default_times,
                             simulate_ensemble)

from conftest import flat


def test_grid_single_step():
    g = build_grid(1.0, 1)
    assert list(g.nodes) == [0.0, 1.0]


def test_grid_arithmetic():
    g = build_grid(2.0, 4)
    assert g.dt == 0.5 and g.nodes.size == 5


@pytest.mark.parametrize("T,M", [(1.0, 0), (0.0, 4), (-1.0, 2), (1.0, 2.5)])
def test_grid_rejects(T, M):
    with pytest.raises(NonPositiveInputs):
        build_grid(T, M)


@given(st.floats(0.01, 50.0), st.integers(1, 500))
def test_grid_uniform(T, M):
    g = build_grid(T, M)
    assert np.all(np.diff(g.nodes) > 0)
    assert abs(g.dt * g.M - T) <= 1e-12 * max(T, 1.0)
    assert g.nodes[-1] == T


def test_zero_intensity_clamps():
    tau, occ = sample_default_times(DefaultSpec(1.0, (flat(0.0),)), build_grid(1.0, 16), 3, 1000)
    assert np.all(tau == 1.0) and not occ.any()


def test_exponential_clock_mean():
    tau, _ = sample_default_times(DefaultSpec(1.0, (flat(1.0),)), build_grid(1.0, 64), 5, 100_000)
    se = tau.std(ddof=1) / np.sqrt(tau.size)
    assert abs(tau.mean() - (1 - np.exp(-1.0))) < 3 * se


@given(st.integers(1, 4), st.floats(0.0, 1.0), st.integers(0, 2**32))
def test_defaults_ordered(n, lam, seed):
    ds = DefaultSpec(1.0, tuple(flat(lam) for _ in range(n)))
    tau, occ = sample_default_times(ds, build_grid(1.0, 8), seed, 200)
    assert np.all(np.diff(tau, axis=1) >= 0)
    assert np.all(occ[:, 1:] <= occ[:, :-1])


def test_brownian_and_compensated_means(two_defaults):
    ens = simulate_ensemble(two_defaults, build_grid(1.0, 32), 20_000, 0, 1)
    N = ens.N_outer
    assert abs(ens.B[:, -1].mean()) < 3 / np.sqrt(N)
    A = ens.A[:, :, -1]
    assert np.all(np.abs(A.mean(0)) < 3 * A.std(0, ddof=1) / np.sqrt(N))


def test_compensator_variance(one_default):
    ens = simulate_ensemble(one_default, build_grid(1.0, 64), 50_000, 0, 2)
    A = ens.A[:, 0, -1]
    comp = ens.comp[:, 0].sum(axis=1)
    # Var A(T) = E[int gamma 1{t<tau} dt]; compare with a paired difference
    d = A ** 2 - comp
    assert abs(d.mean()) < 3 * d.std(ddof=1) / np.sqrt(d.size)


def test_jump_structure(two_defaults):
    ens = simulate_ensemble(two_defaults, build_grid(1.0, 32), 500, 2, 4)
    jumps = ens.dH.sum(axis=2)
    assert set(np.unique(jumps)) <= {0, 1}
    assert np.array_equal(jumps.astype(bool), ens.occurred)
    after = np.arange(32)[None, None, :] >= ens.jnode[:, :, None]
    assert np.all(ens.comp[after] == 0)
    assert np.allclose(ens.dA[after], ens.dH[after])
    ups = np.diff(ens.H, axis=2)
    assert np.all(ups >= 0)


def test_reproducible(two_defaults):
    g = build_grid(1.0, 16)
    a = simulate_ensemble(two_defaults, g, 50, 2, 99)
    b = simulate_ensemble(two_defaults, g, 50, 2, 99)
    assert np.array_equal(a.dB, b.dB) and np.array_equal(a.tau, b.tau)
    c = simulate_ensemble(two_defaults, g, 50, 2, 100)
    assert not np.array_equal(a.dB, c.dB)


def test_children_share_history(two_defaults):
    ens = simulate_ensemble(two_defaults, build_grid(1.0, 32), 200, 3, 8)
    S = (1 + 3) ** 2
    assert ens.size == 200 * S
    for p in np.flatnonzero(ens.parent >= 0):
        a, k = ens.parent[p], ens.depth[p]
        j = min(ens.jnode[a, k - 1], 32) if ens.occurred[a, k - 1] else 32
        assert np.array_equal(ens.dB[p, :j], ens.dB[a, :j])
        assert np.array_equal(ens.tau[p, :k], ens.tau[a, :k])


def test_cloud_needs_inner_particles(one_default):
    ens = simulate_ensemble(one_default, build_grid(1.0, 8), 10, 0, 1)
    with pytest.raises(EmptyCloud):
        ens.cloud(1)


def test_budget(two_defaults):
    with pytest.raises(ResourceLimit):
        simulate_ensemble(two_defaults, build_grid(1.0, 64), 10_000, 2, 0, budget=10_000)


def test_pure_diffusion_ensemble():
    ens = simulate_ensemble(DefaultSpec(1.0, ()), build_grid(1.0, 8), 20, 3, 1)
    assert ens.size == 20 and np.all(ens.regime == 0)


def test_export_columns(one_default):
    ens = simulate_ensemble(one_default, build_grid(1.0, 4), 3, 0, 1)
    buf = io.StringIO()
    export_ensemble(ens, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].split() == ["scenario", "node", "t", "dB", "H1", "A1"]
    assert len(lines) == 1 + 3 * 5


def _geometric(dB, dt, mu, sig, x0):
    x = np.empty(dB.size + 1)
    x[0] = x0
    for i, d in enumerate(dB):
        x[i + 1] = x[i] * (1 + mu * dt + sig * d)
    return x


def _record(dB, n=1, dH=None):
    M = dB.size
    dH = np.zeros((n, M)) if dH is None else dH
    return PathRecord(dB, np.ones(n), dH.any(axis=1), np.cumsum(np.c_[np.zeros(n), dH], axis=1), dH, dH)


def test_product_rule_with_constant():
    rng = np.random.default_rng(0)
    dB = rng.normal(scale=0.1, size=64)
    x = _geometric(dB, 1 / 64, 0.1, 0.3, 1.0)
    one = (np.ones(65), 0.0, 0.0, 0.0)
    assert ito_product_residual((x, 0.1 * x[:-1], 0.3 * x[:-1], 0.0), one, _record(dB), 1 / 64) == 0.0


def test_equal_jump_coefficients_collapse():
    # with h_k = h for every k the cross term is h1 h2 dH_total
    M, dt = 16, 1 / 16
    dH = np.zeros((2, M))
    dH[0, 3] = dH[1, 9] = 1.0
    x = np.ones(M + 1) + np.cumsum(np.r_[0.0, 0.5 * dH.sum(0)])
    y = np.ones(M + 1) + np.cumsum(np.r_[0.0, -0.2 * dH.sum(0)])
    rec = _record(np.zeros(M), 2, dH)
    res = ito_product_residual((x, 0.0, 0.0, np.full((2, M), 0.5)), (y, 0.0, 0.0, np.full((2, M), -0.2)), rec, dt)
    assert res < 1e-14
    tot = (x, 0.0, 0.0, 0.5), (y, 0.0, 0.0, -0.2)
    assert ito_product_residual(*tot, rec, dt) < 1e-14


def test_grid_mismatch():
    rec = _record(np.zeros(8))
    with pytest.raises(GridMismatch):
        ito_product_residual((np.ones(8), 0, 0, 0), (np.ones(9), 0, 0, 0), rec, 1 / 8)


def test_defaults_in_one_cell_keep_their_jumps():
    ds = DefaultSpec(1.0, (flat(5.0), flat(5.0), flat(5.0)), 5.0)
    ens = simulate_ensemble(ds, build_grid(1.0, 4), 300, 1, 3)
    assert np.all(np.diff(ens.jnode, axis=1)[ens.occurred[:, 1:]] >= 1)
    assert np.array_equal(ens.dH.sum(axis=2).astype(bool), ens.occurred)
    for p in np.flatnonzero(ens.parent >= 0):
        a, k = ens.parent[p], ens.depth[p]
        j = min(ens.jnode[a, k - 1], 4)
        assert np.array_equal(ens.dB[p, :j], ens.dB[a, :j])
