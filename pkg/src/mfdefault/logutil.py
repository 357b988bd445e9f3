"""Log-utility wealth problem with two defaults and a recursive utility.

Wealth follows ``dX = X[(S^{i0} - u) dt + S^{i1} dB + S^{i2} dH^{i+1}]`` in
regime ``i`` (written in compensated form in the Euler scheme). The weight
process ``Y`` solves a linear equation whose drift is ``nu_{k0}`` times the
conditional mean of ``Y`` given the information at the last default, and the
performance is ``E[int Y ln|X u| dt + Y(T) ln X(T)]``. The closed-form
optimal control is ``u = Y / E[Y(T) + int_t^T Y ds | F_t]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backward import LevelSolution, solve_level_system
from .control import Adjoint, ResidualReport, necessary_residual
from .forward import ControlProcess, NonFiniteState, solve_mmfsde
from .meanfield import RegressionBasis, cond_mean_regress, regime_select
from .model import (
    FULL,
    CoefficientSet,
    DefaultSpec,
    InfoMode,
    ProblemSpec,
    Regime,
    SpecError,
    TerminalGain,
    Term,
)
from .paths import EmptyCloud, ScenarioEnsemble, cumulative_integral

__all__ = [
    "MarketCurves",
    "UtilityCurves",
    "LogUtilityProblem",
    "YProcess",
    "WealthPaths",
    "UtilityReport",
    "NonPositiveWealth",
    "NonPositiveY",
    "LogDomain",
    "DegenerateDenominator",
    "wealth_problem",
    "simulate_wealth",
    "compute_y",
    "recursive_utility",
    "optimal_control",
    "solve_optimal_control",
    "OptimalControl",
    "residual_check",
    "adjoint_features",
    "setup",
]

N_DEFAULTS = 2


class NonPositiveWealth(FloatingPointError):
    pass


class NonPositiveY(FloatingPointError):
    pass


class LogDomain(ValueError):
    pass


class DegenerateDenominator(ZeroDivisionError):
    pass


def _safe(x):
    return np.where(x == 0, 1.0, x)


def _on(fn, t):
    t = np.asarray(t, dtype=float)
    return np.broadcast_to(np.asarray(fn(t), dtype=float), t.shape)


def _check_table(table, name, T, probe=257):
    """Shared rules for the 3x3 curve tables; returns violations."""
    out = []
    if len(table) != 3 or any(len(row) != 3 for row in table):
        return [("CurveShape", f"{name} must be a 3x3 table")]
    tt = np.linspace(0.0, T, probe)
    for i in range(3):
        for j in range(3):
            v = _on(table[i][j], tt)
            if not np.all(np.isfinite(v)):
                out.append(("NonFiniteCurve", f"{name}[{i}][{j}]"))
    if np.any(_on(table[2][2], tt) != 0):
        out.append(("NonzeroTerminalJump", f"{name}[2][2] must vanish"))
    for j in (0, 1):
        if np.any(_on(table[2][j], tt) <= -1):
            out.append(("CurveBelowMinusOne", f"{name}[2][{j}] must exceed -1"))
    for i in (0, 1):
        if np.any(_on(table[i][2], tt) <= -1):
            out.append(("JumpBelowMinusOne", f"{name}[{i}][2] must exceed -1 to keep positivity"))
    return out


@dataclass(frozen=True)
class MarketCurves:
    """``S[i][j]``: regime ``i``; j = 0 drift, 1 volatility, 2 jump size."""

    S: tuple

    def validate(self, T: float) -> "MarketCurves":
        v = _check_table(self.S, "S", T)
        if v:
            raise SpecError(v)
        return self

    def at(self, i: int, j: int, t):
        return _on(self.S[i][j], t)


@dataclass(frozen=True)
class UtilityCurves:
    """``nu[k][j]``: regime ``k``; j = 0 mean-field drift, 1 Brownian, 2 jump."""

    nu: tuple

    def validate(self, T: float) -> "UtilityCurves":
        v = _check_table(self.nu, "nu", T)
        if v:
            raise SpecError(v)
        return self

    def at(self, k: int, j: int, t):
        return _on(self.nu[k][j], t)


@dataclass(frozen=True)
class LogUtilityProblem:
    market: MarketCurves
    utility: UtilityCurves
    gamma: tuple
    T: float = 1.0
    x0: float = 1.0
    u_bounds: tuple = (1e-3, 10.0)
    info: InfoMode = FULL

    @property
    def default_spec(self) -> DefaultSpec:
        bound = max(1.0, *(float(np.max(_on(g, np.linspace(0, self.T, 257)))) for g in self.gamma))
        return DefaultSpec(self.T, tuple(self.gamma), bound)


# wealth --------------------------------------------------------------------


def wealth_problem(prob: LogUtilityProblem, lipschitz: float = 25.0) -> ProblemSpec:
    """Problem data for the wealth equation; gains read ``aux['Y']``."""
    mc = prob.market
    regs = []
    z = lambda t, x, m, u, n, a: 0.0 * x
    for i in range(N_DEFAULTS + 1):
        s0 = lambda t, i=i: mc.at(i, 0, t)
        s1 = lambda t, i=i: mc.at(i, 1, t)
        s2 = lambda t, i=i: mc.at(i, 2, t)
        b = Term(lambda t, x, m, u, n, a, s0=s0: x * (s0(t) - u),
                 lambda t, x, m, u, n, a, s0=s0: s0(t) - u + 0.0 * x, z,
                 lambda t, x, m, u, n, a: -x + 0.0 * u, z)
        sig = Term(lambda t, x, m, u, n, a, s1=s1: x * s1(t),
                   lambda t, x, m, u, n, a, s1=s1: s1(t) + 0.0 * x, z, z, z)
        h = Term(lambda t, x, m, u, n, a, s2=s2: x * s2(t),
                 lambda t, x, m, u, n, a, s2=s2: s2(t) + 0.0 * x, z, z, z)
        f = Term(lambda t, x, m, u, n, a: a["Y"] * np.log(np.abs(x * u)),
                 lambda t, x, m, u, n, a: a["Y"] / _safe(x), z,
                 lambda t, x, m, u, n, a: a["Y"] / _safe(u), z)
        regs.append(Regime(b=b, sigma=sig, h=h, f=f))
    g = TerminalGain(lambda x, m, a: a["Y"] * np.log(np.abs(x)),
                     lambda x, m, a: a["Y"] / _safe(x), lambda x, m, a: 0.0 * x)
    bounds = tuple(prob.u_bounds for _ in range(N_DEFAULTS + 1))
    return ProblemSpec(prob.default_spec, CoefficientSet(tuple(regs), g, lipschitz),
                       prob.x0, FULL, prob.info, bounds)


@dataclass
class WealthPaths:
    euler: np.ndarray
    exact: np.ndarray
    euler_levels: list
    exact_levels: list

    def l2_gap(self, rows, dt) -> float:
        d = (self.euler - self.exact)[rows]
        return float(np.sqrt(np.mean((d ** 2).sum(axis=1) * dt)))


def simulate_wealth(prob: LogUtilityProblem, control: ControlProcess, ens: ScenarioEnsemble) -> WealthPaths:
    """Euler scheme and the exact log-form on the same noise.

    The log-form integrates ``(S^{i0} - u - |S^{i1}|^2/2) dt + S^{i1} dB`` and
    adds ``ln(1 + S^{i2})`` at the jump, with coefficients frozen on cells.
    """
    prob.market.validate(prob.T)
    spec = wealth_problem(prob)
    try:
        traj, _ = solve_mmfsde(spec, ens, control)
    except NonFiniteState as exc:
        raise NonPositiveWealth(str(exc)) from exc
    eul = traj.levels
    bad = [(k, np.argwhere(traj.defined(k) & (lv <= 0))) for k, lv in enumerate(eul)]
    for k, where in bad:
        if where.size:
            p, i = where[0]
            raise NonPositiveWealth(f"Euler wealth non-positive on level {k}, particle {p}, node {i}")
    M, dt = ens.grid.M, ens.grid.dt
    t = ens.grid.nodes[:-1]
    mc = prob.market
    exact = []
    for k in range(N_DEFAULTS + 1):
        start = ens.start_node(k)
        u = control.levels[k][:, :-1]
        incr = (mc.at(k, 0, t) - u - 0.5 * mc.at(k, 1, t) ** 2) * dt + mc.at(k, 1, t) * ens.dB
        if k < N_DEFAULTS:
            incr = incr + np.log1p(mc.at(k, 2, t)) * ens.dH[:, k, :]
        lx = np.zeros((ens.size, M + 1))
        base = np.full(ens.size, np.log(prob.x0)) if k == 0 else np.log(
            np.where(start <= M, exact[k - 1][np.arange(ens.size), np.minimum(start, M)], 1.0))
        steps = np.arange(M)[None, :] >= start[:, None]
        lx[:, 1:] = np.cumsum(np.where(steps, incr, 0.0), axis=1)
        lx = lx - np.take_along_axis(lx, np.minimum(start, M)[:, None], axis=1) + base[:, None]
        defined = np.arange(M + 1)[None, :] >= start[:, None]
        exact.append(np.where(defined, np.exp(lx), 0.0))
    return WealthPaths(traj.X, regime_select(exact, ens.regime), eul, exact)


# weight process Y -----------------------------------------------------------


@dataclass
class YProcess:
    """Weight process by cloud Euler and by closed form.

    ``eta[k]`` is the level-``k`` start value; ``varpi[k]`` its exact
    conditional-mean curve; ``K[k]`` the integrating factor.
    """

    euler_levels: list
    closed_levels: list
    eta: list
    varpi: list
    K: list
    euler: np.ndarray
    closed: np.ndarray
    eta_global: np.ndarray = field(default=None)

    def restrict(self, rows) -> "YProcess":
        """The same process on a subset of particles, e.g. ``ens.roots``."""
        take = lambda lv: [a[rows] for a in lv]
        return YProcess(take(self.euler_levels), take(self.closed_levels), take(self.eta),
                        take(self.varpi), take(self.K), self.euler[rows], self.closed[rows],
                        self.eta_global[rows])

    def gap(self, rows, dt) -> float:
        d = (self.euler - self.closed)[rows]
        return float(np.sqrt(np.mean((d ** 2).sum(axis=1) * dt)))


def compute_y(prob: LogUtilityProblem, ens: ScenarioEnsemble, keep_parts: bool = True) -> YProcess:
    """Euler with cloud means for the conditional drift, and the closed form.

    Closed form on level ``k``: ``Y = (eta + int nu_{k0} varpi K ds) / K`` with
    ``1/K`` the stochastic exponential of ``nu_{k1} dB + nu_{k2} dA^{k+1}``
    and ``varpi = eta exp(int nu_{k0})``. The ds-integral freezes ``K`` on
    each cell and integrates ``varpi`` exactly. ``keep_parts=False`` drops
    ``varpi`` and ``K`` to save memory.
    """
    uc = prob.utility.validate(prob.T)
    M, dt, P = ens.grid.M, ens.grid.dt, ens.size
    nodes = ens.grid.nodes
    t = nodes[:-1]
    idx = np.arange(P)
    eul, clo, etas, varpis, Ks = [], [], [], [], []
    for k in range(N_DEFAULTS + 1):
        start = ens.start_node(k)
        sidx = np.minimum(start, M)
        live = start <= M
        nu0, nu1, nu2 = uc.at(k, 0, t), uc.at(k, 1, t), uc.at(k, 2, t)
        dA = ens.dA_of(k + 1)
        needs_mean = k == 0 or np.any(nu0 != 0)
        if k > 0 and needs_mean and ens.P_inner == 0:
            raise EmptyCloud("the conditional drift of Y needs inner clouds")
        # Euler
        Yk = np.zeros((P, M + 1))
        eta_e = np.ones(P) if k == 0 else np.where(live, eul[k - 1][idx, sidx], 0.0)
        for i in range(M + 1):
            s = start == i
            Yk[s, i] = eta_e[s]
            if i == M:
                break
            act = start <= i
            if not act.any():
                continue
            y = Yk[:, i]
            m = ens.level_mean(np.where(act, y, 0.0), k) if needs_mean else y
            Yk[act, i + 1] = y[act] + nu0[i] * m[act] * dt + nu1[i] * y[act] * ens.dB[act, i] + nu2[i] * y[act] * dA[act, i]
        eul.append(Yk)
        # closed form
        eta = np.ones(P) if k == 0 else np.where(live, clo[k - 1][idx, sidx], 0.0)
        L0 = cumulative_integral(lambda s, k=k: uc.at(k, 0, s), ens.grid)
        incr = nu1 * ens.dB - 0.5 * nu1 ** 2 * dt
        if k < N_DEFAULTS:
            incr = incr - nu2 * ens.comp[:, k, :] + np.log1p(nu2) * ens.dH[:, k, :]
        steps = np.arange(M)[None, :] >= start[:, None]
        logphi = np.zeros((P, M + 1))
        logphi[:, 1:] = np.cumsum(np.where(steps, incr, 0.0), axis=1)
        logphi -= np.take_along_axis(logphi, sidx[:, None], axis=1)
        vp = eta[:, None] * np.exp(L0[None, :] - L0[sidx][:, None])
        dvp = np.where(steps, np.diff(vp, axis=1) * np.exp(-logphi[:, :-1]), 0.0)
        integ = np.zeros((P, M + 1))
        integ[:, 1:] = np.cumsum(dvp, axis=1)
        defined = np.arange(M + 1)[None, :] >= start[:, None]
        Yc = np.where(defined, np.exp(logphi) * (eta[:, None] + integ), 0.0)
        clo.append(Yc)
        etas.append(eta_e)
        if keep_parts:
            varpis.append(np.where(defined, vp, 0.0))
            Ks.append(np.where(defined, np.exp(-logphi), 0.0))
    Ye = regime_select(eul, ens.regime)
    bad = np.argwhere(Ye <= 0)
    if bad.size:
        p, i = bad[0]
        raise NonPositiveY(f"Y not positive at particle {p}, node {i}")
    eta_g = regime_select([np.broadcast_to(e[:, None], (P, M + 1)) for e in etas], ens.regime)
    return YProcess(eul, clo, etas, varpis, Ks, Ye, regime_select(clo, ens.regime), eta_g)


# recursive utility ---------------------------------------------------------


@dataclass
class UtilityReport:
    P0: float
    se_P0: float
    direct: float
    se_direct: float
    se_paired: float
    levels: LevelSolution | None = field(default=None, repr=False)

    @property
    def agree(self) -> bool:
        return abs(self.P0 - self.direct) <= 3 * np.hypot(self.se_P0, self.se_direct)


def _se(v):
    return float(np.std(v, ddof=1) / np.sqrt(v.size))


def recursive_utility(prob: LogUtilityProblem, control: ControlProcess, ens: ScenarioEnsemble,
                      Y: YProcess, wealth: WealthPaths | None = None,
                      basis: RegressionBasis | None = None) -> UtilityReport:
    """``E[P(0)]`` from the backward level system and by direct Monte Carlo.

    Level ``k`` of the backward system has driver
    ``1{regime k} ln|X u| + nu_{k1} Q + nu_{k2} gamma R + M_k(nu_{k0} P)``
    and terminal ``ln X(T)`` on paths ending in regime ``k``.
    """
    basis = basis or RegressionBasis(degree=2)
    wealth = wealth or simulate_wealth(prob, control, ens)
    X = wealth.euler
    M, dt = ens.grid.M, ens.grid.dt
    u = control.global_(ens)
    xu = X[:, :-1] * u[:, :-1]
    if np.any(xu <= 0) or np.any(X[:, -1] <= 0):
        raise LogDomain("X u must stay positive for the log gain")
    L = np.log(xu)
    uc = prob.utility
    t = ens.grid.nodes[:-1]
    Ylv = Y.euler_levels

    def driver(k, i, a, q, r):
        ind = ens.regime[:, i] == k
        gk = ens.gamma_cell(k + 1)[:, i]
        local = np.where(ind, L[:, i], 0.0) + uc.at(k, 1, t[i]) * q + uc.at(k, 2, t[i]) * gk * r
        return local, uc.at(k, 0, t[i]) * a

    def feats(k, i):
        lx = np.log(np.where(wealth.euler_levels[k][:, i] > 0, wealth.euler_levels[k][:, i], 1.0))
        y = np.where(Ylv[k][:, i] > 0, Ylv[k][:, i], 1.0)
        return np.column_stack([lx, Y.eta[k] / y])

    terminal = [np.where(ens.regime[:, M] == k, np.log(X[:, M]), 0.0) for k in range(N_DEFAULTS + 1)]
    sol = solve_level_system(ens, terminal, driver, feats, basis, frozen=True)
    roots = ens.roots
    p0 = sol.p[0][roots, 0]
    direct = ((Y.euler[:, :-1] * L).sum(axis=1) * dt + Y.euler[:, M] * np.log(X[:, M]))[roots]
    # p0 is a regression constant at t = 0; its error is that of the target
    return UtilityReport(float(p0.mean()), _se(direct), float(direct.mean()), _se(direct),
                         _se(direct - p0), sol)


# optimal control -----------------------------------------------------------


def _step_factor(prob, ens, i):
    """``X_{i+1} / X_i`` under the Euler scheme, without the control term."""
    t = ens.grid.nodes[i]
    dt = ens.grid.dt
    reg = ens.regime[:, i]
    out = np.ones(ens.size)
    for k in range(N_DEFAULTS + 1):
        s = reg == k
        step = prob.market.at(k, 0, t) * dt + prob.market.at(k, 1, t) * ens.dB[s, i]
        if k < N_DEFAULTS:
            step = step + prob.market.at(k, 2, t) * ens.dH[s, k, i]
        out[s] += step
    return out


@dataclass
class OptimalControl:
    """Closed-form control plus the per-path target whose conditional mean is
    its denominator; the target feeds the standard error of the residual."""

    control: ControlProcess
    target: np.ndarray
    scheme: str


def optimal_control(prob: LogUtilityProblem, ens: ScenarioEnsemble, Y: YProcess,
                    info: InfoMode | None = None, basis: RegressionBasis | None = None,
                    scheme: str = "continuous", sweeps: int = 4) -> ControlProcess:
    """Control part of :func:`solve_optimal_control`."""
    return solve_optimal_control(prob, ens, Y, info, basis, scheme, sweeps).control


def solve_optimal_control(prob: LogUtilityProblem, ens: ScenarioEnsemble, Y: YProcess,
                          info: InfoMode | None = None, basis: RegressionBasis | None = None,
                          scheme: str = "continuous", sweeps: int = 4) -> OptimalControl:
    """``Y(t) / E[Y(T) + int_t^T Y ds | G_t]`` on every regime.

    Full information regresses the denominator on ``(Y, eta)`` inside each
    regime group; frozen information uses level cloud means instead.

    ``scheme="discrete"`` returns the maximiser of the Euler-discretised
    problem instead: at each node ``u`` solves
    ``Y_i / u = E[D_{i+1} / (1 + e_i - u dt) | G_i]`` with ``D_{i+1}`` the
    weight collected after node ``i`` and ``e_i`` the uncontrolled wealth
    return over the cell. It converges to the continuous formula as
    ``dt -> 0``.
    """
    if scheme not in ("continuous", "discrete"):
        raise ValueError(f"unknown scheme {scheme!r}")
    info = info or prob.info
    basis = basis or RegressionBasis(degree=1)
    M, dt = ens.grid.M, ens.grid.dt
    Yg = Y.euler
    tail = np.zeros_like(Yg)
    tail[:, :M] = np.cumsum(Yg[:, M - 1::-1], axis=1)[:, ::-1] * dt
    D = Yg[:, M][:, None] + tail
    discrete = scheme == "discrete"
    if discrete:
        D[:, :M] -= Yg[:, :M] * dt
    u = np.empty_like(Yg)
    roots = ens.depth == 0
    den_ok = np.ones_like(u, bool)
    target = D.copy()
    for i in range(M + 1):
        reg = ens.regime[:, i]
        if info.frozen:
            k_of = reg
            def cond(v):
                lv = [ens.level_mean(np.where(reg >= k, v, 0.0), k) for k in range(N_DEFAULTS + 1)]
                return np.choose(k_of, lv)
            num = np.choose(k_of, [ens.level_mean(Y.euler_levels[k][:, i], k) for k in range(N_DEFAULTS + 1)])
        else:
            feat = np.column_stack([Yg[:, i], Y.eta_global[:, i]])
            def cond(v):
                return cond_mean_regress(feat[roots], v[roots], basis, reg[roots])(feat, reg)
            num = Yg[:, i]
        den = cond(D[:, i])
        if discrete and i < M:
            grow = _step_factor(prob, ens, i)
            for _ in range(sweeps):
                ui = num / np.where(den > 0, den, np.nan)
                target[:, i] = D[:, i] / (grow - np.nan_to_num(ui) * dt)
                den = cond(target[:, i])
        den_ok[:, i] = den > 0
        u[:, i] = num / np.where(den > 0, den, np.nan)
    if not den_ok.all():
        raise DegenerateDenominator("conditional denominator not positive")
    lo, hi = prob.u_bounds
    u = np.clip(u, lo, hi)
    return OptimalControl(ControlProcess([u.copy() for _ in range(N_DEFAULTS + 1)], info), target, scheme)


def residual_check(spec: ProblemSpec, ens: ScenarioEnsemble, opt: OptimalControl, traj,
                   adjoint: Adjoint) -> ResidualReport:
    """Necessary-condition residual at the closed-form control.

    The residual ``Y/u - X E[p_{i+1} | G_i]`` compares two regression
    estimates. Its standard error combines the spread of
    ``target - X p_{i+1}`` (sampling error of the control's denominator)
    with the pathwise adjoint spread reported by ``necessary_residual``.
    """
    res = necessary_residual(spec, ens, adjoint)
    M = ens.grid.M
    roots = ens.roots
    infl = np.empty((roots.size, M))
    for i in range(M):
        reg = ens.regime[roots, i]
        nxt = np.choose(reg, [lv[roots, i + 1] for lv in adjoint.levels.p])
        infl[:, i] = opt.target[roots, i] - traj.X[roots, i] * nxt
    se = infl.std(axis=0, ddof=1) / np.sqrt(roots.size)
    return ResidualReport(res.levels, res.process, res.node_mean, np.hypot(se, res.node_se), res.pathwise)


def adjoint_features(Y: YProcess) -> Callable:
    """Features ``(Y/X, eta/X)`` for the wealth adjoint, as a factory over trajectories."""
    def factory(traj):
        def feats(k, i):
            x = traj.levels[k][:, i]
            x = np.where(x > 0, x, 1.0)
            return np.column_stack([Y.euler[:, i] / x, Y.eta_global[:, i] / x])
        return feats
    return factory


def setup(prob: LogUtilityProblem, ens: ScenarioEnsemble):
    """Problem data, ``aux`` inputs and the weight process for one ensemble."""
    prob.market.validate(prob.T)
    Y = compute_y(prob, ens)
    return wealth_problem(prob), {"Y": Y.euler}, Y
