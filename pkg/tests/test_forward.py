import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfdefault.forward import (ContinuityViolation, ControlProcess, NonFiniteState, euler_step,
                               export_trajectory, solve_mmfsde, stitch_regimes)
from mfdefault.model import FROZEN, FULL, CoefficientSet, DefaultSpec, ProblemSpec, Regime, Term, TerminalGain
from mfdefault.paths import build_grid, simulate_ensemble

from conftest import flat


def T(fn):
    return Term(fn)


ZERO = Regime()


def coupled(n=2, info=FROZEN):
    """Lipschitz instance with genuine mean-field coupling ``0.3 M(X)``."""
    ds = DefaultSpec(1.0, tuple(flat(0.5) for _ in range(n)), 1.0)
    b = T(lambda t, x, m, u, nn, a: -0.5 * x + 0.3 * m + u)
    s = T(lambda t, x, m, u, nn, a: 0.2 * x + 0.1)
    h = T(lambda t, x, m, u, nn, a: 0.1 * m + 0.0 * x)
    regs = [Regime(b=b, sigma=s, h=h) for _ in range(n)] + [Regime(b=b, sigma=s)]
    g = TerminalGain(lambda x, m, a: x)
    return ProblemSpec(ds, CoefficientSet(tuple(regs), g, 2.0), 1.0, info, info)


@given(st.floats(-5, 5), st.floats(-1, 1), st.floats(-1, 1))
def test_zero_dynamics(x, dB, dA):
    assert euler_step(x, 0.0, 0.1, ZERO, 0.0, 0.0, 0.0, dB, dA) == x


def test_pure_drift():
    reg = Regime(b=T(lambda t, x, m, u, nn, a: 1.0 + 0 * x))
    assert euler_step(2.0, 0.0, 0.1, reg, 0, 0, 0, 0.3, 0.0) == pytest.approx(2.1, abs=1e-15)


@given(st.floats(0.0, 2.0), st.floats(-2.0, 2.0), st.booleans())
def test_compensator_cancels(lam, h, jump):
    reg = Regime(h=T(lambda t, x, m, u, nn, a: h + 0 * x))
    dt = 0.05
    dH = 1.0 if jump else 0.0
    out = euler_step(1.0, 0.0, dt, reg, 0, 0, 0, 0.0, dH - lam * dt, gamma_next=lam)
    assert out == pytest.approx(1.0 + h * dH, abs=1e-12)


def test_non_finite_state():
    reg = Regime(b=T(lambda t, x, m, u, nn, a: np.inf + 0 * x))
    with pytest.raises(NonFiniteState):
        euler_step(1.0, 0.0, 0.1, reg, 0, 0, 0, 0, 0)


def test_constant_solution(two_defaults):
    spec = ProblemSpec(two_defaults, CoefficientSet((ZERO, ZERO, ZERO), TerminalGain(lambda x, m, a: x)), 3.0)
    ens = simulate_ensemble(spec, build_grid(1.0, 8), 20, 2, 1)
    traj, rep = solve_mmfsde(spec, ens, ControlProcess.zero(ens))
    assert np.all(traj.X == 3.0) and rep.iterations == 1


def test_no_mean_field_feedback(two_defaults):
    reg = Regime(b=T(lambda t, x, m, u, nn, a: -x + u), sigma=T(lambda t, x, m, u, nn, a: 0.3 * x),
                 h=T(lambda t, x, m, u, nn, a: 0.2 * x))
    last = Regime(b=reg.b, sigma=reg.sigma)
    spec = ProblemSpec(two_defaults, CoefficientSet((reg, reg, last), TerminalGain(lambda x, m, a: x)), 1.0)
    ens = simulate_ensemble(spec, build_grid(1.0, 16), 50, 2, 2)
    _, rep = solve_mmfsde(spec, ens, ControlProcess.constant(ens, 0.2))
    assert rep.iterations == 2 and rep.distances[1] == 0.0


def test_picard_contraction_and_uniqueness():
    spec = coupled()
    ens = simulate_ensemble(spec, build_grid(1.0, 32), 300, 3, 3)
    u = ControlProcess.constant(ens, [0.1, 0.2, 0.3], FROZEN)
    a, rep = solve_mmfsde(spec, ens, u, tol=1e-8)
    assert rep.converged and np.all(rep.ratios[1:] <= 0.5)
    b, _ = solve_mmfsde(spec, ens, u, tol=1e-8, start=spec.x0 + 1.0)
    assert np.sqrt(np.mean((a.X - b.X) ** 2)) <= 10 * 1e-8


def test_full_information_mode():
    spec = coupled(info=FULL)
    ens = simulate_ensemble(spec, build_grid(1.0, 16), 100, 0, 3)
    traj, rep = solve_mmfsde(spec, ens, ControlProcess.constant(ens, 0.1))
    assert rep.converged and np.all(np.isfinite(traj.X))


def test_deterministic(two_defaults):
    spec = coupled()
    g = build_grid(1.0, 16)
    runs = [solve_mmfsde(spec, simulate_ensemble(spec, g, 40, 2, 11), ControlProcess.zero(
        simulate_ensemble(spec, g, 40, 2, 11), FROZEN))[0].X for _ in range(2)]
    assert np.array_equal(*runs)


def test_refinement_monotone():
    spec = coupled(info=FULL)
    fine = simulate_ensemble(spec, build_grid(1.0, 128), 400, 0, 4)
    sol = {M: solve_mmfsde(spec, fine.coarsen(128 // M), ControlProcess.constant(fine.coarsen(128 // M), 0.1))[0]
           for M in (16, 32, 64, 128)}
    gaps = [np.sqrt(np.mean((sol[M].X[:, ::1] - sol[2 * M].X[:, ::2]) ** 2)) for M in (16, 32, 64)]
    assert gaps[0] > gaps[1] > gaps[2]


def test_stitch_single_segment():
    seg = np.random.default_rng(0).normal(size=(3, 5))
    assert np.array_equal(stitch_regimes([seg], np.zeros((3, 5), int)), seg)


def test_stitch_two_segments():
    x0 = np.array([[1.0, 2.0, 3.5, 0.0, 0.0]])
    x1 = np.array([[0.0, 0.0, 3.5, 4.0, 4.5]])
    reg = np.array([[0, 0, 1, 1, 1]])
    out = stitch_regimes([x0, x1], reg, [np.array([2])])
    assert np.array_equal(out, [[1.0, 2.0, 3.5, 4.0, 4.5]])
    with pytest.raises(ContinuityViolation):
        stitch_regimes([x0, x1 + 0.1], reg, [np.array([2])])


def test_export(two_defaults):
    spec = coupled()
    ens = simulate_ensemble(spec, build_grid(1.0, 4), 2, 1, 1)
    traj, _ = solve_mmfsde(spec, ens, ControlProcess.zero(ens, FROZEN))
    buf = io.StringIO()
    export_trajectory(ens, traj, buf)
    assert buf.getvalue().splitlines()[0] == "path node t X regime"
    assert len(buf.getvalue().splitlines()) == 1 + 2 * 5


def test_wealth_euler_matches_log_formula():
    from mfdefault.logutil import simulate_wealth
    from conftest import section5_problem
    prob = section5_problem()
    fine = simulate_ensemble(prob.default_spec, build_grid(1.0, 256), 4000, 0, 21)
    gaps = []
    for M in (64, 128, 256):
        e = fine.coarsen(256 // M)
        gaps.append(simulate_wealth(prob, ControlProcess.constant(e, 0.5), e).l2_gap(np.arange(e.size), e.grid.dt))
    assert gaps[0] > gaps[1] > gaps[2]
    ratios = [gaps[0] / gaps[1], gaps[1] / gaps[2]]
    assert all(1.6 <= r <= 2.4 for r in ratios), f"refinement ratios {ratios}"
