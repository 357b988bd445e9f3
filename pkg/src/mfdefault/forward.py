"""Forward mean-field SDE with ordered defaults: Euler steps, Picard, stitching.

Each regime ``k`` is integrated as a process continued from ``tau_k`` up to
T. The global state equals the regime-``k`` process on ``[tau_k, tau_{k+1})``;
the continuation past ``tau_{k+1}`` only feeds the level-``k`` cloud means.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .meanfield import regime_select, state_mean_field
from .model import FULL, InfoMode, ProblemSpec, Regime
from .paths import ScenarioEnsemble

__all__ = [
    "ControlProcess",
    "StateTrajectory",
    "PicardReport",
    "NoConvergence",
    "NonFiniteState",
    "ContinuityViolation",
    "euler_step",
    "solve_mmfsde",
    "stitch_regimes",
    "aux_at",
    "export_trajectory",
]


class NoConvergence(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class NonFiniteState(FloatingPointError):
    pass


class ContinuityViolation(ValueError):
    pass


@dataclass
class ControlProcess:
    """Per-regime control arrays ``levels[k]`` of shape ``(P, M+1)``.

    ``levels[k]`` holds ``u^k`` on the continued regime-``k`` process; the
    global control picks ``levels[k]`` wherever the path is in regime ``k``.
    """

    levels: list
    info: InfoMode = FULL

    @classmethod
    def constant(cls, ens: ScenarioEnsemble, values, info: InfoMode = FULL) -> "ControlProcess":
        values = np.broadcast_to(np.asarray(values, dtype=float), (ens.n + 1,))
        shape = (ens.size, ens.grid.M + 1)
        return cls([np.full(shape, v) for v in values], info)

    @classmethod
    def zero(cls, ens: ScenarioEnsemble, info: InfoMode = FULL) -> "ControlProcess":
        return cls.constant(ens, 0.0, info)

    def copy(self) -> "ControlProcess":
        return ControlProcess([u.copy() for u in self.levels], self.info)

    def scaled(self, c: float) -> "ControlProcess":
        return ControlProcess([c * u for u in self.levels], self.info)

    def plus(self, other: "ControlProcess", eps: float = 1.0) -> "ControlProcess":
        return ControlProcess([u + eps * v for u, v in zip(self.levels, other.levels)], self.info)

    def project(self, spec: ProblemSpec) -> "ControlProcess":
        out = []
        for k, u in enumerate(self.levels):
            lo, hi = spec.bound(k)
            out.append(np.clip(u, lo, hi))
        return ControlProcess(out, self.info)

    def global_(self, ens: ScenarioEnsemble) -> np.ndarray:
        return regime_select(self.levels, ens.regime)

    def regime_view(self, ens: ScenarioEnsemble, k: int) -> np.ndarray:
        """``u^k`` with zeros outside ``[tau_k, tau_{k+1})``."""
        return np.where(ens.regime == k, self.levels[k], 0.0)

    def mean_field(self, ens: ScenarioEnsemble) -> list:
        return state_mean_field(ens, self.levels, self.info.frozen)


@dataclass
class PicardReport:
    iterations: int = 0
    distances: list = field(default_factory=list)
    converged: bool = False
    tol: float = 0.0

    @property
    def ratios(self) -> np.ndarray:
        d = np.asarray(self.distances)
        with np.errstate(divide="ignore", invalid="ignore"):
            return d[1:] / d[:-1]


@dataclass
class StateTrajectory:
    levels: list
    mean_levels: list
    X: np.ndarray
    starts: list

    def defined(self, k: int) -> np.ndarray:
        M1 = self.X.shape[1]
        return np.arange(M1)[None, :] >= self.starts[k][:, None]


def aux_at(aux: dict | None, i: int) -> dict:
    if not aux:
        return {}
    return {key: v[:, i] for key, v in aux.items()}


def euler_step(x, t, dt, reg: Regime, m, u, nu, dB, dA_next, gamma_next=0.0, aux=None):
    """One step ``x + b_gamma dt + sigma dB + h dA^{k+1}``."""
    aux = aux or {}
    h = reg.h(t, x, m, u, nu, aux)
    out = x + (reg.b(t, x, m, u, nu, aux) + gamma_next * h) * dt
    out = out + reg.sigma(t, x, m, u, nu, aux) * dB + h * dA_next
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"non-finite state at t={t}")
    return out


def _integrate_level(spec, ens, k, start_vals, m_lvl, u_lvl, n_lvl, aux):
    grid = ens.grid
    nodes, dt = grid.nodes, grid.dt
    reg = spec.coeffs[k]
    start = ens.start_node(k)
    dA = ens.dA_of(k + 1)
    gam = ens.gamma_cell(k + 1)
    X = np.zeros((ens.size, grid.M + 1))
    for i in range(grid.M + 1):
        s = start == i
        if s.any():
            X[s, i] = start_vals(i, s)
        if i == grid.M:
            break
        a = start <= i
        if not a.any():
            continue
        X[a, i + 1] = euler_step(
            X[a, i], nodes[i], dt, reg, m_lvl[a, i], u_lvl[a, i], n_lvl[a, i],
            ens.dB[a, i], dA[a, i], gam[a, i], {key: v[a] for key, v in aux_at(aux, i).items()},
        )
    return X


def _sweep(spec, ens, control, prev_levels, aux, x_init):
    frozen = spec.state_info.frozen
    m_levels = state_mean_field(ens, prev_levels, frozen)
    n_levels = control.mean_field(ens)
    new = []
    for k in range(spec.n + 1):
        if k == 0:
            init = lambda i, s: x_init[s] if np.ndim(x_init) else x_init
        else:
            prev = new[k - 1]
            init = lambda i, s, prev=prev: prev[s, i]
        new.append(_integrate_level(spec, ens, k, init, m_levels[k], control.levels[k], n_levels[k], aux))
    return new, m_levels


def solve_mmfsde(spec: ProblemSpec, ens: ScenarioEnsemble, control: ControlProcess,
                 tol: float = 1e-6, max_iter: int = 50, aux: dict | None = None,
                 x_init=None, raise_on_failure: bool = True, start=None):
    """Picard iteration over the mean-field term, starting from ``X == x0``.

    ``start`` replaces the constant initial iterate (not the initial state).
    """
    x_init = spec.x0 if x_init is None else x_init
    grid = ens.grid
    starts = [ens.start_node(k) for k in range(spec.n + 1)]
    masks = [np.arange(grid.M + 1)[None, :] >= s[:, None] for s in starts]
    x0 = np.broadcast_to(np.asarray(x_init, dtype=float), (ens.size,))
    first = x0 if start is None else np.broadcast_to(np.asarray(start, dtype=float), (ens.size,))
    levels = [np.where(mk, first[:, None], 0.0) for mk in masks]
    report = PicardReport(tol=tol)
    for it in range(1, max_iter + 1):
        new, _ = _sweep(spec, ens, control, levels, aux, x_init)
        sq = sum(np.where(mk, (a - b) ** 2, 0.0).sum(axis=1) for a, b, mk in zip(new, levels, masks))
        d = float(np.sqrt(np.mean(sq) * grid.dt))
        report.distances.append(d)
        report.iterations = it
        levels = new
        if d <= tol:
            report.converged = True
            break
    if not report.converged and raise_on_failure:
        raise NoConvergence(f"forward Picard did not reach tol={tol} in {max_iter} iterations", report)
    m_levels = state_mean_field(ens, levels, spec.state_info.frozen)
    X = stitch_regimes(levels, ens.regime, starts[1:])
    return StateTrajectory(levels, m_levels, X, starts), report


def stitch_regimes(segments, regime: np.ndarray, starts=(), atol: float = 1e-10) -> np.ndarray:
    """Global path from regime segments, checking continuity at each switch.

    ``starts[k-1][p]`` is the node where regime ``k`` begins on path ``p``.
    """
    segments = [np.atleast_2d(np.asarray(s, dtype=float)) for s in segments]
    regime = np.atleast_2d(regime)
    for k in range(1, len(segments)):
        st = np.atleast_1d(starts[k - 1])
        live = st < regime.shape[1]
        if not live.any():
            continue
        rows = np.flatnonzero(live)
        a = segments[k][rows, st[live]]
        b = segments[k - 1][rows, st[live]]
        gap = np.abs(a - b)
        if np.any(gap > atol * np.maximum(1.0, np.abs(b))):
            raise ContinuityViolation(f"regime {k} starts {gap.max():.3g} away from regime {k - 1}")
    return regime_select(segments, regime)


def export_trajectory(ens: ScenarioEnsemble, traj: StateTrajectory, fh, which=None) -> None:
    which = ens.roots if which is None else np.asarray(which)
    fh.write("path node t X regime\n")
    t = ens.grid.nodes
    for p in which:
        block = np.column_stack([np.full(t.size, p), np.arange(t.size), t, traj.X[p], ens.regime[p]])
        np.savetxt(fh, block, fmt=["%d", "%d", "%.10g", "%.12g", "%d"])
