"""Performance functional, Hamiltonian, adjoint and maximum-principle checks.

All per-regime quantities are carried on the continued regime processes of
``forward``: level ``k`` lives on ``[tau_k, T]`` and the global process picks
level ``k`` on ``[tau_k, tau_{k+1})``. Statistics are taken over root
particles, which are independent; inner cloud particles only feed
conditional means.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backward import LevelSolution, solve_level_system
from .forward import ControlProcess, StateTrajectory, aux_at, solve_mmfsde
from .meanfield import RegressionBasis, regime_select
from .model import ProblemSpec, Regime, Term, const_term
from .paths import EmptyCloud, ScenarioEnsemble

__all__ = [
    "ControlProcess",
    "EnsembleMismatch",
    "NoImprovement",
    "PerformanceReport",
    "HamiltonianEval",
    "MpReport",
    "GateauxReport",
    "ResidualReport",
    "ImproveReport",
    "evaluate_performance",
    "hamiltonian",
    "assemble_adjoint",
    "variational_process",
    "gateaux_derivative",
    "necessary_residual",
    "sufficient_check",
    "improve_control",
    "lq_jump_instance",
]

log = logging.getLogger(__name__)

ARGS = ("dx", "dm", "du", "dn")


class EnsembleMismatch(ValueError):
    pass


class NoImprovement(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


def _se(v: np.ndarray) -> float:
    return float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def _check(ens: ScenarioEnsemble, traj: StateTrajectory | None, control: ControlProcess):
    shape = (ens.size, ens.grid.M + 1)
    for u in control.levels:
        if np.shape(u) != shape:
            raise EnsembleMismatch(f"control array {np.shape(u)} does not match ensemble {shape}")
    if len(control.levels) != ens.n + 1:
        raise EnsembleMismatch("one control array per regime required")
    if traj is not None and traj.X.shape != shape:
        raise EnsembleMismatch("trajectory was computed on a different ensemble")


# performance --------------------------------------------------------------


@dataclass
class PerformanceReport:
    J: float
    se: float
    J_induction: float | None
    se_induction: float | None
    se_combined: float | None
    se_paired: float | None
    per_root: np.ndarray
    per_root_induction: np.ndarray | None
    level_values: list = field(default_factory=list)

    @property
    def gap(self) -> float | None:
        return None if self.J_induction is None else self.J_induction - self.J

    @property
    def agree(self) -> bool | None:
        if self.J_induction is None:
            return None
        return abs(self.gap) <= 3 * self.se_combined + 1e-12


def _running(spec, ens, traj, control, aux):
    """Regime-selected running gain ``f`` per particle and cell, plus ``g``."""
    M = ens.grid.M
    nodes = ens.grid.nodes
    n_levels = control.mean_field(ens)
    fv = np.zeros((ens.size, M))
    for k in range(spec.n + 1):
        reg = spec.coeffs[k]
        sel = ens.regime[:, :M] == k
        if not sel.any():
            continue
        for i in range(M):
            s = sel[:, i]
            if not s.any():
                continue
            ax = {key: v[s] for key, v in aux_at(aux, i).items()}
            fv[s, i] = reg.f(nodes[i], traj.levels[k][s, i], traj.mean_levels[k][s, i],
                             control.levels[k][s, i], n_levels[k][s, i], ax)
    m_T = regime_select(traj.mean_levels, ens.regime)[:, M]
    g = np.asarray(spec.coeffs.g(traj.X[:, M], m_T, aux_at(aux, M)), dtype=float)
    return fv, np.broadcast_to(g, (ens.size,))


def evaluate_performance(spec: ProblemSpec, control: ControlProcess, ens: ScenarioEnsemble,
                         traj: StateTrajectory | None = None, aux: dict | None = None,
                         induction: bool = True) -> PerformanceReport:
    """Direct Monte Carlo of the performance and its backward-induction value.

    The induction value at level ``k`` is the running gain over the particle's
    own regime-``k`` segment plus the level-``(k+1)`` cloud mean of the next
    value; ``J^0`` is its mean over roots.
    """
    _check(ens, traj, control)
    if traj is None:
        traj, _ = solve_mmfsde(spec, ens, control, aux=aux)
    dt = ens.grid.dt
    fv, g = _running(spec, ens, traj, control, aux)
    roots = ens.roots
    direct = fv.sum(axis=1) * dt + g
    per_root = direct[roots]
    J, se = float(per_root.mean()), _se(per_root)
    if not induction or (spec.n > 0 and ens.P_inner == 0):
        return PerformanceReport(J, se, None, None, None, None, per_root, None)
    reg = ens.regime[:, :-1]
    V = np.where(reg == spec.n, fv, 0.0).sum(axis=1) * dt + g
    levels = [V]
    for k in range(spec.n - 1, -1, -1):
        seg = np.where(reg == k, fv, 0.0).sum(axis=1) * dt
        V = seg + ens.level_mean(V, k + 1)
        levels.append(V)
    levels.reverse()
    ind = V[roots]
    d = ind - per_root
    J_ind, se_ind = float(ind.mean()), _se(ind)
    return PerformanceReport(J, se, J_ind, se_ind, float(np.hypot(se, se_ind)), _se(d),
                             per_root, ind, levels)


# Hamiltonian --------------------------------------------------------------


@dataclass
class HamiltonianEval:
    value: np.ndarray
    dx: np.ndarray
    dm: np.ndarray
    du: np.ndarray
    dn: np.ndarray
    proj_dm: np.ndarray | None = None
    proj_dn: np.ndarray | None = None


def _partials(term: Term, t, x, m, u, nu, aux):
    return [np.asarray(term.grad(w, t, x, m, u, nu, aux), dtype=float) for w in ARGS]


def hamiltonian(t, x, m, u, nu, p, q, r, reg: Regime, gamma=0.0, aux=None,
                grads: bool = True) -> HamiltonianEval:
    """``f + (b + gamma h) p + sigma q + gamma h r`` and its partials.

    ``gamma`` is the intensity of the next default (zero in the last regime).
    """
    aux = aux or {}
    h = reg.h(t, x, m, u, nu, aux)
    val = reg.f(t, x, m, u, nu, aux) + (reg.b(t, x, m, u, nu, aux) + gamma * h) * p
    val = val + reg.sigma(t, x, m, u, nu, aux) * q + gamma * h * r
    if not grads:
        z = np.zeros_like(np.asarray(val, dtype=float))
        return HamiltonianEval(val, z, z, z, z)
    fs = _partials(reg.f, t, x, m, u, nu, aux)
    bs = _partials(reg.b, t, x, m, u, nu, aux)
    ss = _partials(reg.sigma, t, x, m, u, nu, aux)
    hs = _partials(reg.h, t, x, m, u, nu, aux)
    d = [f + (b + gamma * hh) * p + s * q + gamma * hh * r for f, b, s, hh in zip(fs, bs, ss, hs)]
    return HamiltonianEval(val, *d)


# adjoint ------------------------------------------------------------------


@dataclass
class Adjoint:
    """Adjoint levels plus what is needed to evaluate Hamiltonians along them."""

    levels: LevelSolution
    traj: StateTrajectory
    control: ControlProcess
    aux: dict | None

    @property
    def p(self):
        return self.levels.global_p()


def _level_args(spec, ens, traj, control, n_levels, aux, k, i, sel=slice(None)):
    ax = {key: v[sel] for key, v in aux_at(aux, i).items()}
    return (ens.grid.nodes[i], traj.levels[k][sel, i], traj.mean_levels[k][sel, i],
            control.levels[k][sel, i], n_levels[k][sel, i], ax)


def default_adjoint_features(traj: StateTrajectory) -> Callable:
    def feats(k, i):
        return np.column_stack([traj.levels[k][:, i], traj.mean_levels[k][:, i]])
    return feats


def assemble_adjoint(spec: ProblemSpec, ens: ScenarioEnsemble, traj: StateTrajectory,
                     control: ControlProcess, aux: dict | None = None,
                     basis: RegressionBasis | None = None, features: Callable | None = None) -> Adjoint:
    """Build and solve the adjoint equation on the continued regime processes.

    Level ``k`` has driver ``H^k_x + M_k(H^k_m)`` with the running gain
    counted only while the path is in regime ``k``, terminal
    ``g_x + M_k(g_m)`` on paths ending in regime ``k`` and the value of
    level ``k+1`` added where regime ``k+1`` starts. Raises MissingGradient
    when a needed partial derivative was not supplied.
    """
    _check(ens, traj, control)
    basis = basis or RegressionBasis()
    features = features or default_adjoint_features(traj)
    frozen = spec.state_info.frozen
    n_levels = control.mean_field(ens)
    M = ens.grid.M
    gam = [ens.gamma_cell(k + 1) for k in range(spec.n + 1)]

    def driver(k, i, a, q, r):
        t, x, m, u, nu, ax = _level_args(spec, ens, traj, control, n_levels, aux, k, i)
        reg = spec.coeffs[k]
        ind = (ens.regime[:, i] == k).astype(float)
        gk = gam[k][:, i]
        fx, fm = (np.asarray(reg.f.grad(w, t, x, m, u, nu, ax), dtype=float) for w in ("dx", "dm"))
        bx, bm = (np.asarray(reg.b.grad(w, t, x, m, u, nu, ax), dtype=float) for w in ("dx", "dm"))
        sx, sm = (np.asarray(reg.sigma.grad(w, t, x, m, u, nu, ax), dtype=float) for w in ("dx", "dm"))
        hx, hm = (np.asarray(reg.h.grad(w, t, x, m, u, nu, ax), dtype=float) for w in ("dx", "dm"))
        local = ind * fx + (bx + gk * hx) * a + sx * q + gk * hx * r
        shared = ind * fm + (bm + gk * hm) * a + sm * q + gk * hm * r
        return local, shared

    g = spec.coeffs.g
    m_T = regime_select(traj.mean_levels, ens.regime)[:, M]
    axT = aux_at(aux, M)
    gx = np.broadcast_to(np.asarray(g.grad("dx", traj.X[:, M], m_T, axT), dtype=float), (ens.size,))
    gm = np.broadcast_to(np.asarray(g.grad("dm", traj.X[:, M], m_T, axT), dtype=float), (ens.size,))
    terminal = []
    for k in range(spec.n + 1):
        ind = ens.regime[:, M] == k
        shared = np.where(ind, gm, 0.0)
        mean = ens.level_mean(shared, k) if frozen else shared
        terminal.append(np.where(ind, gx, 0.0) + mean)
    sol = solve_level_system(ens, terminal, driver, features, basis, frozen)
    return Adjoint(sol, traj, control, aux)


def _control_gradient(spec, ens, adj: Adjoint, k: int, pathwise: bool = False):
    """Per particle and cell: local and shared parts of ``H^k_u`` on level k.

    With ``pathwise`` the conditional quantities ``(a, q, gamma r)`` are
    replaced by ``p_{i+1}``, ``p_{i+1} dB/dt`` and ``p_{i+1} dA/dt``, whose
    conditional means they estimate.
    """
    traj, control, aux = adj.traj, adj.control, adj.aux
    lv = adj.levels
    n_levels = control.mean_field(ens)
    M = ens.grid.M
    reg = spec.coeffs[k]
    gam = ens.gamma_cell(k + 1)
    local = np.zeros((ens.size, M))
    shared = np.zeros((ens.size, M))
    start = ens.start_node(k)
    for i in range(M):
        act = start <= i
        if not act.any():
            continue
        t, x, m, u, nu, ax = _level_args(spec, ens, traj, control, n_levels, aux, k, i, act)
        if pathwise:
            a = lv.p[k][act, i + 1]
            q = a * ens.dB[act, i] / ens.grid.dt
            gr = a * ens.dA_of(k + 1)[act, i] / ens.grid.dt
        else:
            a, q, r, gk = lv.p_next[k][act, i], lv.q[k][act, i], lv.r[k][act, i], gam[act, i]
            gr = gk * r
        gk = gam[act, i]
        ind = (ens.regime[act, i] == k).astype(float)
        fu, fn = (np.asarray(reg.f.grad(w, t, x, m, u, nu, ax), dtype=float) for w in ("du", "dn"))
        bu, bn = (np.asarray(reg.b.grad(w, t, x, m, u, nu, ax), dtype=float) for w in ("du", "dn"))
        su, sn = (np.asarray(reg.sigma.grad(w, t, x, m, u, nu, ax), dtype=float) for w in ("du", "dn"))
        hu, hn = (np.asarray(reg.h.grad(w, t, x, m, u, nu, ax), dtype=float) for w in ("du", "dn"))
        local[act, i] = ind * fu + (bu + gk * hu) * a + su * q + hu * gr
        shared[act, i] = ind * fn + (bn + gk * hn) * a + sn * q + hn * gr
    return local, shared


# variational process ------------------------------------------------------


def variational_process(spec: ProblemSpec, ens: ScenarioEnsemble, traj: StateTrajectory,
                        control: ControlProcess, perturbation: ControlProcess,
                        aux: dict | None = None, restart: bool = False) -> list:
    """Linearized Euler scheme for the derivative of X along ``perturbation``.

    Level ``k`` starts from the level ``k-1`` value where regime ``k`` begins,
    or from 0 there when ``restart`` is set (the single-regime variation).
    """
    _check(ens, traj, control)
    frozen = spec.state_info.frozen
    n_levels = control.mean_field(ens)
    v_levels = perturbation.levels
    nv_levels = perturbation.mean_field(ens) if control.info.frozen else v_levels
    M, dt = ens.grid.M, ens.grid.dt
    Z = []
    for k in range(spec.n + 1):
        reg = spec.coeffs[k]
        start = ens.start_node(k)
        dA = ens.dA_of(k + 1)
        gam = ens.gamma_cell(k + 1)
        Zk = np.zeros((ens.size, M + 1))
        for i in range(M):
            if k > 0 and not restart:
                s = start == i
                Zk[s, i] = Z[k - 1][s, i]
            act = start <= i
            if not act.any():
                continue
            mz = ens.level_mean(np.where(act, Zk[:, i], 0.0), k)[act] if frozen else Zk[act, i]
            t, x, m, u, nu, ax = _level_args(spec, ens, traj, control, n_levels, aux, k, i, act)
            v, nv = v_levels[k][act, i], nv_levels[k][act, i]
            z = Zk[act, i]

            def lin(term):
                dx, dm, du, dn = _partials(term, t, x, m, u, nu, ax)
                return dx * z + dm * mz + du * v + dn * nv

            dh = lin(reg.h)
            Zk[act, i + 1] = z + (lin(reg.b) + gam[act, i] * dh) * dt + lin(reg.sigma) * ens.dB[act, i] + dh * dA[act, i]
        if k > 0 and not restart:
            s = start == M
            Zk[s, M] = Z[k - 1][s, M]
        Z.append(Zk)
    return Z


# Gateaux derivative -------------------------------------------------------


@dataclass
class GateauxReport:
    variational: float
    finite_difference: float
    hamiltonian: float
    se_variational: float
    se_finite_difference: float
    se_hamiltonian: float
    se_vh: float

    @property
    def values(self):
        return (self.variational, self.finite_difference, self.hamiltonian)

    def agree(self, rel: float = 0.05, nse: float = 3.0) -> bool:
        a, b, c = self.values
        pairs = [
            (a, b, np.hypot(self.se_variational, self.se_finite_difference)),
            (a, c, np.hypot(self.se_variational, self.se_hamiltonian)),
            (b, c, np.hypot(self.se_finite_difference, self.se_hamiltonian)),
        ]
        return all(abs(x - y) <= max(rel * max(abs(x), abs(y)), nse * s) + 1e-12 for x, y, s in pairs)


def _variational_gain(spec, ens, traj, control, perturbation, Z, aux):
    """Per-particle derivative of the performance from the variational process."""
    M, dt = ens.grid.M, ens.grid.dt
    frozen = spec.state_info.frozen
    n_levels = control.mean_field(ens)
    nv_levels = perturbation.mean_field(ens) if control.info.frozen else perturbation.levels
    total = np.zeros(ens.size)
    for k in range(spec.n + 1):
        reg = spec.coeffs[k]
        mZ = ens.level_mean(np.where(traj.defined(k), Z[k], 0.0), k) if frozen else Z[k]
        for i in range(M):
            s = ens.regime[:, i] == k
            if not s.any():
                continue
            t, x, m, u, nu, ax = _level_args(spec, ens, traj, control, n_levels, aux, k, i, s)
            dx, dm, du, dn = _partials(reg.f, t, x, m, u, nu, ax)
            total[s] += (dx * Z[k][s, i] + dm * mZ[s, i] + du * perturbation.levels[k][s, i]
                         + dn * nv_levels[k][s, i]) * dt
    ZT = regime_select(Z, ens.regime)[:, M]
    mZT = regime_select(
        [ens.level_mean(np.where(traj.defined(k), Z[k], 0.0), k) if frozen else Z[k] for k in range(spec.n + 1)],
        ens.regime,
    )[:, M]
    m_T = regime_select(traj.mean_levels, ens.regime)[:, M]
    axT = aux_at(aux, M)
    g = spec.coeffs.g
    total += np.asarray(g.grad("dx", traj.X[:, M], m_T, axT)) * ZT + np.asarray(g.grad("dm", traj.X[:, M], m_T, axT)) * mZT
    return total


def _hamiltonian_gain(spec, ens, adj: Adjoint, perturbation: ControlProcess):
    dt = ens.grid.dt
    total = np.zeros(ens.size)
    for k in range(spec.n + 1):
        local, shared = _control_gradient(spec, ens, adj, k)
        v = perturbation.levels[k][:, :-1]
        if adj.control.info.frozen:
            shared = ens.level_mean(shared, k)
        total += ((local + shared) * v).sum(axis=1) * dt
    return total


def gateaux_derivative(spec: ProblemSpec, ens: ScenarioEnsemble, control: ControlProcess,
                       perturbation: ControlProcess, aux: dict | None = None, eps: float = 1e-3,
                       basis: RegressionBasis | None = None, features: Callable | None = None,
                       adjoint: Adjoint | None = None) -> GateauxReport:
    """Directional derivative of the performance computed three ways.

    (a) pairing of the gain gradients with the variational process,
    (b) central finite difference of the direct performance on the same
    ensemble, (c) the control gradient of the Hamiltonian along the adjoint.
    """
    traj, _ = solve_mmfsde(spec, ens, control, aux=aux)
    Z = variational_process(spec, ens, traj, control, perturbation, aux)
    roots = ens.roots
    a = _variational_gain(spec, ens, traj, control, perturbation, Z, aux)[roots]
    up = evaluate_performance(spec, control.plus(perturbation, eps), ens, aux=aux, induction=False)
    dn = evaluate_performance(spec, control.plus(perturbation, -eps), ens, aux=aux, induction=False)
    b = (up.per_root - dn.per_root) / (2 * eps)
    if adjoint is None:
        adjoint = assemble_adjoint(spec, ens, traj, control, aux, basis, features)
    c = _hamiltonian_gain(spec, ens, adjoint, perturbation)[roots]
    return GateauxReport(float(a.mean()), float(b.mean()), float(c.mean()),
                         _se(a), _se(b), _se(c), _se(a - c))


# necessary condition ------------------------------------------------------


@dataclass
class ResidualReport:
    """Control gradient ``H_u + M(H_n)`` conditioned on the controller's information.

    ``levels[k]`` is the level-``k`` residual per particle and cell;
    ``process`` is the regime-selected residual. ``node_mean`` averages it
    over roots per cell. ``node_se`` is taken from ``pathwise``, the same
    gradient with the adjoint's conditional expectations left unconditioned:
    the conditional residual is almost a deterministic function of the
    features, so its own spread misses the Monte Carlo error of the adjoint.
    """

    levels: list
    process: np.ndarray
    node_mean: np.ndarray
    node_se: np.ndarray
    pathwise: np.ndarray | None = None

    @property
    def sup(self) -> float:
        return float(np.nanmax(np.abs(self.node_mean)))

    @property
    def sup_se(self) -> float:
        j = int(np.nanargmax(np.abs(self.node_mean)))
        return float(self.node_se[j])

    def significant(self, nse: float = 3.0) -> np.ndarray:
        return np.abs(self.node_mean) > nse * self.node_se


def necessary_residual(spec: ProblemSpec, ens: ScenarioEnsemble, adjoint: Adjoint) -> ResidualReport:
    levels, raw = [], []
    for k in range(spec.n + 1):
        for pw, out in ((False, levels), (True, raw)):
            local, shared = _control_gradient(spec, ens, adjoint, k, pathwise=pw)
            if adjoint.control.info.frozen and not pw:
                out.append(ens.level_mean(local + ens.level_mean(shared, k), k))
            elif adjoint.control.info.frozen:
                # keep the spread across particles so the SE reflects sampling noise
                out.append(local + ens.level_mean(shared, k))
            else:
                out.append(local + shared)
    proc = regime_select(levels, ens.regime[:, :-1])
    pw = regime_select(raw, ens.regime[:, :-1])
    roots = ens.roots
    mean = proc[roots].mean(axis=0)
    se = pw[roots].std(axis=0, ddof=1) / np.sqrt(roots.size)
    return ResidualReport(levels, proc, mean, se, pw)


# sufficient condition -----------------------------------------------------


@dataclass
class MpReport:
    hessian_max_eig: np.ndarray
    concave: bool
    concavity_failures: list
    gap_mean: np.ndarray
    gap_se: np.ndarray
    max_gap_excess: float
    maximum_ok: bool
    info_note: str = ""

    def as_dict(self) -> dict:
        return {
            "concave": bool(self.concave),
            "hessian_max_eig": float(np.max(self.hessian_max_eig)) if self.hessian_max_eig.size else 0.0,
            "concavity_failures": len(self.concavity_failures),
            "max_gap": float(np.max(self.gap_mean)),
            "max_gap_excess_over_3se": float(self.max_gap_excess),
            "maximum_condition": bool(self.maximum_ok),
            "note": self.info_note,
        }


def _h_scalar(reg, t, z, p, q, r, gk, ax):
    x, m, u, nu = z
    return float(hamiltonian(t, x, m, u, nu, p, q, r, reg, gk, ax, grads=False).value)


def sufficient_check(spec: ProblemSpec, ens: ScenarioEnsemble, adjoint: Adjoint, u_grid_size: int = 101,
                     n_probe: int = 200, seed: int = 0, tol: float = 1e-6) -> MpReport:
    """Sampled concavity of the Hamiltonian and the maximum condition.

    Concavity: 4x4 second-difference Hessians in (x, M, u, N) at sampled
    (particle, cell) points, largest eigenvalue compared against ``tol``.
    Maximum condition: at each cell and root in regime ``k`` the Hamiltonian
    at the candidate is compared with the best value on a ``u_grid_size``
    grid over ``U^k`` (N held at the candidate); the gap is averaged over
    roots per cell and must stay within 3 standard errors of 0.
    """
    traj, control, aux = adjoint.traj, adjoint.control, adjoint.aux
    lv = adjoint.levels
    n_levels = control.mean_field(ens)
    M = ens.grid.M
    rng = np.random.default_rng(seed)
    roots = ens.roots
    eigs, fails = [], []
    for _ in range(n_probe):
        pidx = int(rng.choice(roots))
        i = int(rng.integers(0, M))
        k = int(ens.regime[pidx, i])
        reg = spec.coeffs[k]
        t, x, m, u, nu, ax = _level_args(spec, ens, traj, control, n_levels, aux, k, i, [pidx])
        z0 = np.array([x[0], m[0], u[0], nu[0]], dtype=float)
        ax = {key: float(v[0]) for key, v in ax.items()}
        pr = (lv.p_next[k][pidx, i], lv.q[k][pidx, i], lv.r[k][pidx, i], float(ens.gamma_cell(k + 1)[pidx, i]))
        hstep = 1e-3 * (1 + np.abs(z0))
        Hm = np.zeros((4, 4))
        f0 = _h_scalar(reg, t, z0, *pr, ax)
        for a in range(4):
            for b in range(a, 4):
                ea = np.eye(4)[a] * hstep[a]
                eb = np.eye(4)[b] * hstep[b]
                if a == b:
                    val = (_h_scalar(reg, t, z0 + ea, *pr, ax) - 2 * f0 + _h_scalar(reg, t, z0 - ea, *pr, ax)) / hstep[a] ** 2
                else:
                    val = (_h_scalar(reg, t, z0 + ea + eb, *pr, ax) - _h_scalar(reg, t, z0 + ea - eb, *pr, ax)
                           - _h_scalar(reg, t, z0 - ea + eb, *pr, ax) + _h_scalar(reg, t, z0 - ea - eb, *pr, ax)) / (4 * hstep[a] * hstep[b])
                Hm[a, b] = Hm[b, a] = val
        top = float(np.linalg.eigvalsh(Hm).max())
        eigs.append(top)
        if top > tol:
            fails.append({"particle": pidx, "node": i, "regime": k, "max_eig": top})
    gap_mean = np.zeros(M)
    gap_se = np.zeros(M)
    for i in range(M):
        gaps = np.zeros(roots.size)
        for k in np.unique(ens.regime[roots, i]):
            sel = roots[ens.regime[roots, i] == k]
            lo, hi = spec.bound(k)
            lo, hi = (lo, hi) if np.isfinite(lo) and np.isfinite(hi) else (-10.0, 10.0)
            grid = np.linspace(lo, hi, u_grid_size)
            reg = spec.coeffs[k]
            t, x, m, u, nu, ax = _level_args(spec, ens, traj, control, n_levels, aux, k, i, sel)
            gk = ens.gamma_cell(k + 1)[sel, i]
            pq = (lv.p_next[k][sel, i], lv.q[k][sel, i], lv.r[k][sel, i])
            h0 = hamiltonian(t, x, m, u, nu, *pq, reg, gk, ax, grads=False).value
            best = np.full(sel.size, -np.inf)
            for ug in grid:
                hv = hamiltonian(t, x, m, np.full(sel.size, ug), nu, *pq, reg, gk, ax, grads=False).value
                best = np.maximum(best, hv)
            gaps[np.searchsorted(roots, sel)] = best - h0
        gap_mean[i] = gaps.mean()
        gap_se[i] = gaps.std(ddof=1) / np.sqrt(gaps.size)
    excess = float(np.max(gap_mean - 3 * gap_se))
    note = ("maximum condition read pointwise with the configured controller information; "
            "the sufficiency argument conditions on the information at the last default")
    return MpReport(np.asarray(eigs), not fails, fails, gap_mean, gap_se, excess, excess <= 0, note)


# improvement loop ---------------------------------------------------------


@dataclass
class ImproveReport:
    controls: list
    J: list
    se: list
    steps: int = 0


def improve_control(spec: ProblemSpec, ens: ScenarioEnsemble, control: ControlProcess, step: float,
                    iters: int, aux: dict | None = None, aux_fn: Callable | None = None,
                    basis: RegressionBasis | None = None, features: Callable | None = None,
                    keep_controls: bool = False, tol_se: float = 2.0, sweep: bool = True,
                    stop: Callable | None = None) -> ImproveReport:
    """Projected ascent on the control gradient, sweeping regimes n down to 0.

    Each iteration visits the regimes from last to first; for regime ``k``
    the forward state and adjoint are recomputed and ``u^k`` moves along the
    necessary-condition residual, the other regimes held fixed. With
    ``sweep=False`` all regimes move together from a single adjoint.
    ``aux_fn`` may rebuild exogenous inputs from the trajectory when they
    depend on it. ``stop(perf)`` ends the loop early when it returns True.
    Raises NoImprovement after three consecutive significant decreases.
    """
    ctl = control.project(spec)
    rep = ImproveReport([ctl.copy()] if keep_controls else [], [], [])
    traj, _ = solve_mmfsde(spec, ens, ctl, aux=aux)
    perf = evaluate_performance(spec, ctl, ens, traj, aux, induction=False)
    rep.J.append(perf.J)
    rep.se.append(perf.se)
    last = perf
    drops = 0
    for it in range(iters):
        if step == 0:
            rep.J.append(perf.J)
            rep.se.append(perf.se)
            continue
        groups = [[k] for k in range(spec.n, -1, -1)] if sweep else [list(range(spec.n + 1))]
        for group in groups:
            if aux_fn is not None:
                aux = aux_fn(traj)
            adj = assemble_adjoint(spec, ens, traj, ctl, aux, basis,
                                   features(traj) if features else None)
            res = necessary_residual(spec, ens, adj)
            lv = list(ctl.levels)
            for k in group:
                upd = np.zeros_like(lv[k])
                upd[:, :-1] = res.levels[k]
                upd[:, -1] = res.levels[k][:, -1]
                lo, hi = spec.bound(k)
                lv[k] = np.clip(lv[k] + step * upd, lo, hi)
            ctl = ControlProcess(lv, ctl.info)
            del adj, res
            traj = None
            traj, _ = solve_mmfsde(spec, ens, ctl, aux=aux)
        perf = evaluate_performance(spec, ctl, ens, traj, aux, induction=False)
        d = perf.per_root - last.per_root
        if d.mean() < -tol_se * _se(d):
            drops += 1
        else:
            drops = 0
        last = perf
        rep.J.append(perf.J)
        rep.se.append(perf.se)
        rep.steps = it + 1
        if keep_controls:
            rep.controls.append(ctl.copy())
        log.info("improve %d: J=%.6f (se %.2e)", it + 1, perf.J, perf.se)
        if drops >= 3:
            raise NoImprovement("performance fell for three consecutive steps", rep)
        if stop is not None and stop(perf):
            break
    if not keep_controls:
        rep.controls.append(ctl)
    return rep


# example instance ---------------------------------------------------------


def lq_jump_instance(n: int = 1, gamma: float = 0.5, T: float = 1.0, x0: float = 1.0,
                     info=None, bounds=None) -> ProblemSpec:
    """``dX = u dt + M(X) dH``, ``f = -(x^2+u^2)/2``, ``g = -x^2/2``.

    The jump coefficient is switched off in the last regime.
    """
    from .model import FROZEN, CoefficientSet, DefaultSpec, TerminalGain

    info = info or FROZEN
    z = lambda t, x, m, u, nn, a: 0.0 * x
    one = lambda t, x, m, u, nn, a: 1.0 + 0.0 * x
    b = Term(lambda t, x, m, u, nn, a: u + 0.0 * x, z, z, one, z)
    h = Term(lambda t, x, m, u, nn, a: m + 0.0 * x, z, one, z, z)
    f = Term(lambda t, x, m, u, nn, a: -0.5 * (x ** 2 + u ** 2),
             lambda t, x, m, u, nn, a: -x + 0.0 * u, z,
             lambda t, x, m, u, nn, a: -u + 0.0 * x, z)
    regs = [Regime(b=b, h=h, f=f) for _ in range(n)] + [Regime(b=b, h=const_term(0.0), f=f)]
    g = TerminalGain(lambda x, m, a: -0.5 * x ** 2, lambda x, m, a: -x, lambda x, m, a: 0.0 * x)
    ds = DefaultSpec(T, tuple((lambda t: gamma + 0.0 * np.asarray(t)) for _ in range(n)), max(gamma, 1e-12))
    return ProblemSpec(ds, CoefficientSet(tuple(regs), g, 1.0), x0, info, info, bounds or ())
