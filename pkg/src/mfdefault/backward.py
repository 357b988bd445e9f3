"""Backward equations driven by B and the compensated default martingales.

Conditional expectations are least-squares regressions on per-node features,
fitted on root particles (independent samples) and evaluated on every
particle. Two solvers live here:

* ``solve_linear_bsde`` / ``solve_mmfbsde`` for a single global equation,
  with ``p(t_i)`` regressed on the full remaining target and (q, r) read off
  the martingale increments;
* ``solve_level_system`` for one continued equation per regime, stepped
  explicitly. It is the exact dual of the forward Euler scheme and is what
  the adjoint and the recursive-utility equation use.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .forward import NoConvergence, PicardReport
from .meanfield import (
    RegressionBasis,
    WeightedCondOperator,
    basis_layout,
    cond_mean_regress,
    regime_select,
    ridge_solve,
)
from .paths import ScenarioEnsemble

__all__ = [
    "BsdeSolution",
    "DriverSpec",
    "LevelSolution",
    "brownian_features",
    "solve_linear_bsde",
    "extract_prt",
    "solve_mmfbsde",
    "solve_level_system",
    "export_solution",
]

log = logging.getLogger(__name__)


@dataclass
class BsdeSolution:
    """``p`` is ``(P, M+1)``, ``q`` is ``(P, M)``, ``r`` is ``(P, n, M)``."""

    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    zeta: np.ndarray
    report: PicardReport = field(default_factory=PicardReport)


@dataclass
class DriverSpec:
    """Driver ``fn(i, t, p, mp, q, mq, r, mr)`` evaluated node by node.

    ``r`` and ``mr`` are ``(P, n)``; ``mp``, ``mq``, ``mr`` are the weighted
    cloud means under ``op`` (zeros when ``op`` is None).
    """

    fn: Callable
    lipschitz: float = 1.0
    op: WeightedCondOperator | None = None


def brownian_features(ens: ScenarioEnsemble) -> Callable:
    B = ens.B
    return lambda i: B[:, i:i + 1]


def _fit_rows(ens: ScenarioEnsemble, fit_on: str) -> np.ndarray:
    if fit_on == "roots":
        return ens.depth == 0
    return np.ones(ens.size, bool)


def solve_linear_bsde(F, zeta, ens: ScenarioEnsemble, basis: RegressionBasis | None = None,
                      features: Callable | None = None, fit_on: str = "roots") -> BsdeSolution:
    """``p(t_i) = E[zeta + sum_{j>=i} F_j dt | F_{t_i}]`` by regression.

    ``F`` is a scalar or a ``(P, M)`` array of driver values per cell.
    """
    basis = basis or RegressionBasis()
    features = features or brownian_features(ens)
    M, dt = ens.grid.M, ens.grid.dt
    P = ens.size
    zeta = np.broadcast_to(np.asarray(zeta, dtype=float), (P,)).copy()
    F = np.broadcast_to(np.asarray(F, dtype=float), (P, M))
    fit = _fit_rows(ens, fit_on)
    tail = np.zeros((P, M + 1))
    tail[:, :M] = np.cumsum(F[:, ::-1], axis=1)[:, ::-1] * dt
    p = np.empty((P, M + 1))
    p[:, M] = zeta
    for i in range(M):
        y = zeta + tail[:, i]
        feat = np.asarray(features(i), dtype=float)
        reg = ens.regime[:, i]
        pred = cond_mean_regress(feat[fit], y[fit], basis, reg[fit])
        p[:, i] = pred(feat, reg)
    dZ = p[:, 1:] - p[:, :-1] + F * dt
    q, r = extract_prt(dZ, ens, features, basis, fit_on)
    return BsdeSolution(p, q, r, zeta)


def _prt_group(X, y, dB, dA, basis, pred_X, pred_dB, pred_dA):
    has_jump = dA is not None and np.any(dA != 0)
    ncols = 3 if has_jump else 2
    layout = basis_layout(X, basis, cols_per_term=ncols)
    Phi = layout.design(X)
    blocks = [Phi, Phi * dB[:, None]]
    if has_jump:
        blocks.append(Phi * dA[:, None])
    coef, _ = ridge_solve(np.hstack(blocks), y, basis.ridge)
    k = Phi.shape[1]
    Phi_p = layout.design(pred_X)
    a = Phi_p @ coef[:k]
    q = Phi_p @ coef[k:2 * k]
    r = Phi_p @ coef[2 * k:] if has_jump else np.zeros(pred_X.shape[0])
    return a, q, r


def _node_regression(ens, i, y, feat, rows, fit, basis, clock_of):
    """Joint regression of ``y`` on ``[psi, psi dB, psi dA]`` at node ``i``.

    ``clock_of(regime)`` names the default clock (1-based) active in that
    regime group, or 0 when none is. Returns (a, q, r, clock) over ``rows``.
    """
    P = ens.size
    a = np.zeros(P)
    q = np.zeros(P)
    r = np.zeros(P)
    clock = np.zeros(P, int)
    reg = ens.regime[:, i]
    for key in np.unique(reg[rows]):
        grp = rows & (reg == key)
        fg = grp & fit
        if fg.sum() < 3:
            fg = grp
        if fg.sum() < 2:
            a[grp] = y[grp]
            continue
        c = clock_of(int(key))
        dA_all = ens.dA_of(c)[:, i] if c else None
        a[grp], q[grp], r[grp] = _prt_group(
            feat[fg], y[fg], ens.dB[fg, i], None if dA_all is None else dA_all[fg], basis,
            feat[grp], ens.dB[grp, i], None if dA_all is None else dA_all[grp],
        )
        clock[grp] = c
    return a, q, r, clock


def extract_prt(dZ, ens: ScenarioEnsemble, features: Callable | None = None,
                basis: RegressionBasis | None = None, fit_on: str = "roots"):
    """Integrands of ``dZ`` against ``dB`` and the active ``dA^k`` per cell.

    Returns ``q`` of shape ``(P, M)`` and ``r`` of shape ``(P, n, M)``; in
    regime ``k`` only the clock of default ``k+1`` is active, so ``r_j`` is
    stored as 0 outside ``[tau_{j-1}, tau_j)``.
    """
    basis = basis or RegressionBasis()
    features = features or brownian_features(ens)
    dZ = np.asarray(dZ, dtype=float)
    P, M = dZ.shape
    n = ens.n
    fit = _fit_rows(ens, fit_on)
    rows = np.ones(P, bool)
    q = np.zeros((P, M))
    r = np.zeros((P, n, M))
    clock_of = lambda k: k + 1 if k < n else 0
    for i in range(M):
        feat = np.asarray(features(i), dtype=float)
        _, q[:, i], ri, clock = _node_regression(ens, i, dZ[:, i], feat, rows, fit, basis, clock_of)
        for c in range(1, n + 1):
            sel = clock == c
            r[sel, c - 1, i] = ri[sel]
    return q, r


def _weighted_means(op, ens, v, i):
    """``W^k(t_i) E[v | F_{tau_k}]`` for each particle's current regime k."""
    if op is None:
        return np.zeros_like(v)
    t = ens.grid.nodes[i]
    reg = ens.regime[:, i]
    out = np.zeros_like(v)
    for k in np.unique(reg):
        sel = reg == k
        w = float(op.weight(int(k), t))
        out[sel] = w * ens.level_mean(v, int(k))[sel]
    return out


def _driver_values(driver: DriverSpec, ens, p, q, r):
    M = ens.grid.M
    nodes = ens.grid.nodes
    F = np.empty((ens.size, M))
    for i in range(M):
        pi, qi, ri = p[:, i], q[:, i], r[:, :, i]
        mp = _weighted_means(driver.op, ens, pi, i)
        mq = _weighted_means(driver.op, ens, qi, i)
        mr = _weighted_means(driver.op, ens, ri, i)
        F[:, i] = driver.fn(i, nodes[i], pi, mp, qi, mq, ri, mr)
    return F


def _qr_distance(ens, q1, r1, q0, r0, rows):
    dt = ens.grid.dt
    d = ((q1 - q0) ** 2).sum(axis=1)
    for k in range(1, ens.n + 1):
        d = d + (ens.gamma_cell(k) * (r1[:, k - 1] - r0[:, k - 1]) ** 2).sum(axis=1)
    return float(np.mean(d[rows]) * dt)


def _p_distance(ens, p1, p0, rows):
    return float(np.mean(((p1 - p0) ** 2).sum(axis=1)[rows]) * ens.grid.dt)


def solve_mmfbsde(driver: DriverSpec, zeta, ens: ScenarioEnsemble, basis: RegressionBasis | None = None,
                  features: Callable | None = None, tol: float = 1e-6, max_iter: int = 50,
                  inner_max: int = 50, fit_on: str = "roots", raise_on_failure: bool = True):
    """Two nested Picard loops around ``solve_linear_bsde``.

    The inner loop freezes (q, r) inside the driver and iterates on p; the
    outer loop then refreshes (q, r). The reported distance per outer pass is
    ``sqrt(L + |dp|^2)`` with ``L`` the q-distance plus the intensity-weighted
    r-distance.
    """
    basis = basis or RegressionBasis()
    features = features or brownian_features(ens)
    P, M, n = ens.size, ens.grid.M, ens.n
    rows = ens.depth == 0
    p = np.zeros((P, M + 1))
    q = np.zeros((P, M))
    r = np.zeros((P, n, M))
    report = PicardReport(tol=tol)
    sol = None
    for it in range(1, max_iter + 1):
        q_bar, r_bar = q, r
        p_in = p
        for _ in range(inner_max):
            F = _driver_values(driver, ens, p_in, q_bar, r_bar)
            sol = solve_linear_bsde(F, zeta, ens, basis, features, fit_on)
            step = np.sqrt(_p_distance(ens, sol.p, p_in, rows))
            p_in = sol.p
            if step <= tol:
                break
        d = np.sqrt(_qr_distance(ens, sol.q, sol.r, q, r, rows) + _p_distance(ens, sol.p, p, rows))
        report.distances.append(d)
        report.iterations = it
        log.debug("bsde picard %d: distance %.3e", it, d)
        p, q, r = sol.p, sol.q, sol.r
        if d <= tol:
            report.converged = True
            break
    if not report.converged and raise_on_failure:
        raise NoConvergence(f"backward Picard did not reach tol={tol} in {max_iter} iterations", report)
    return BsdeSolution(p, q, r, sol.zeta, report), report


@dataclass
class LevelSolution:
    """Per-regime continued solutions of a backward level system.

    ``p[k]`` is ``(P, M+1)``; ``p_next[k][:, i]`` is the regression estimate
    of ``E[p[k][:, i+1] | F_{t_i}]`` (the value that pairs with a drift
    perturbation on cell i). ``q[k]`` and ``r[k]`` are ``(P, M)``, ``r[k]``
    being the integrand against ``dA^{k+1}``.
    """

    p: list
    p_next: list
    q: list
    r: list
    ens: ScenarioEnsemble

    def global_p(self) -> np.ndarray:
        return regime_select(self.p, self.ens.regime)

    def as_solution(self) -> BsdeSolution:
        ens = self.ens
        reg = ens.regime[:, :-1]
        q = regime_select(self.q, reg)
        r = np.zeros((ens.size, ens.n, ens.grid.M))
        for k in range(ens.n):
            r[:, k] = np.where(reg == k, self.r[k], 0.0)
        p = self.global_p()
        return BsdeSolution(p, q, r, p[:, -1].copy())


def solve_level_system(ens: ScenarioEnsemble, terminal, driver: Callable, features: Callable,
                       basis: RegressionBasis | None = None, frozen: bool = True,
                       fit_on: str = "roots") -> LevelSolution:
    """Explicit backward sweep, one continued equation per regime.

    For level ``k`` (from n down to 0) and node ``i`` the step is::

        a, q, r = regression of p^k_{i+1} on [psi, psi dB_i, psi dA^{k+1}_i]
        local, shared = driver(k, i, a, q, r)
        p^k_i = a + (local + M_k(shared)) dt

    where ``M_k`` is the level-``k`` cloud mean (identity when not frozen).
    Where regime ``k+1`` starts at node ``i`` the value ``p^{k+1}_i`` is
    added to ``p^k_i``, which is the dual of ``X^{k+1}(tau) = X^k(tau)``.
    ``terminal[k]`` and ``features(k, i)`` are per-particle arrays.
    """
    basis = basis or RegressionBasis()
    M, dt, n, P = ens.grid.M, ens.grid.dt, ens.n, ens.size
    fit = _fit_rows(ens, fit_on)
    ps, pn, qs, rs = [None] * (n + 1), [None] * (n + 1), [None] * (n + 1), [None] * (n + 1)
    for k in range(n, -1, -1):
        start = ens.start_node(k)
        nxt = ens.start_node(k + 1) if k < n else None
        pk = np.zeros((P, M + 1))
        ak = np.zeros((P, M))
        qk = np.zeros((P, M))
        rk = np.zeros((P, M))
        live = start <= M
        pk[live, M] = np.asarray(terminal[k], dtype=float)[live] if np.ndim(terminal[k]) else terminal[k]
        if nxt is not None:
            sel = nxt == M
            pk[sel, M] += ps[k + 1][sel, M]
        clock_of = lambda key, k=k: k + 1 if key == k and k < n else 0
        for i in range(M - 1, -1, -1):
            act = start <= i
            if not act.any():
                continue
            feat = np.asarray(features(k, i), dtype=float)
            a, q, r, _ = _node_regression(ens, i, pk[:, i + 1], feat, act, fit, basis, clock_of)
            local, shared = driver(k, i, a, q, r)
            local = np.where(act, local, 0.0)
            shared = np.where(act, shared, 0.0)
            if frozen:
                shared = ens.level_mean(shared, k)
            pk[act, i] = a[act] + (local[act] + shared[act]) * dt
            ak[act, i], qk[act, i], rk[act, i] = a[act], q[act], r[act]
            if nxt is not None:
                sel = nxt == i
                pk[sel, i] += ps[k + 1][sel, i]
        ps[k], pn[k], qs[k], rs[k] = pk, ak, qk, rk
    return LevelSolution(ps, pn, qs, rs, ens)


def export_solution(ens: ScenarioEnsemble, sol: BsdeSolution, fh, which=None) -> None:
    which = ens.roots if which is None else np.asarray(which)
    n = ens.n
    cols = ["path", "node", "t", "p", "q"] + [f"r{k}" for k in range(1, n + 1)]
    fh.write(" ".join(cols) + "\n")
    t = ens.grid.nodes
    for j in which:
        q = np.append(sol.q[j], np.nan)
        r = np.hstack([sol.r[j], np.full((n, 1), np.nan)]) if n else np.zeros((0, t.size))
        block = np.column_stack([np.full(t.size, j), np.arange(t.size), t, sol.p[j], q, *r])
        np.savetxt(fh, block, fmt="%.12g")
