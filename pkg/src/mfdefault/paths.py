"""Seeded scenario ensembles with ordered defaults and nested clouds.

Layout: every outer scenario owns a tree of ``S = (1 + P)**n`` particles. A
particle of depth ``d`` (roots have depth 0) spawns ``P`` children at each of
its own default times ``tau_k`` with ``k > d``; a child copies its parent's
Brownian increments and default times up to the branch and draws fresh noise
afterwards. The children spawned at ``tau_k`` form the cloud that estimates
conditional expectations given the information at ``tau_k``. At level 0 the
cloud is the set of all roots.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate, sparse

from .model import DefaultSpec

__all__ = [
    "TimeGrid",
    "PathRecord",
    "ScenarioEnsemble",
    "NonPositiveInputs",
    "ResourceLimit",
    "GridMismatch",
    "EmptyCloud",
    "build_grid",
    "cumulative_hazard",
    "cumulative_integral",
    "jump_nodes",
    "sample_default_times",
    "simulate_ensemble",
    "ito_product_residual",
    "export_ensemble",
]

DEFAULT_BUDGET = 4 * 10**8


class NonPositiveInputs(ValueError):
    pass


class ResourceLimit(MemoryError):
    pass


class GridMismatch(ValueError):
    pass


class EmptyCloud(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    @property
    def dt(self) -> float:
        return self.T / self.M

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.linspace(0.0, self.T, self.M + 1)
        t[-1] = self.T
        return t


def build_grid(T: float, M: int) -> TimeGrid:
    if not (T > 0 and M >= 1 and int(M) == M):
        raise NonPositiveInputs(f"need T > 0 and integer M >= 1, got T={T}, M={M}")
    return TimeGrid(float(T), int(M))


def cumulative_integral(fn, grid: TimeGrid) -> np.ndarray:
    """``int_0^{t_i} fn(s) ds`` at every node, cell by cell with adaptive quadrature."""
    t = grid.nodes
    g = lambda s: float(np.asarray(fn(s), dtype=float))
    out = np.zeros(grid.M + 1)
    out[1:] = np.cumsum([integrate.quad(g, a, b)[0] for a, b in zip(t[:-1], t[1:])])
    return out


def cumulative_hazard(spec: DefaultSpec, grid: TimeGrid) -> np.ndarray:
    """Integrated intensities at the grid nodes, shape ``(n, M+1)``.

    Between nodes the hazard is treated as linear, which is exact for
    piecewise-constant intensities.
    """
    lam = np.zeros((spec.n, grid.M + 1))
    for k in range(1, spec.n + 1):
        lam[k - 1] = cumulative_integral(lambda s, k=k: spec.intensity(k, s), grid)
    return lam


def _next_default(lam_k, nodes, prev, prev_occ, expo):
    """Sequential clock: invert the hazard accumulated after ``prev``."""
    T = nodes[-1]
    target = np.interp(prev, nodes, lam_k) + expo
    occ = prev_occ & (target < lam_k[-1])
    tau = np.where(occ, np.interp(target, lam_k, nodes), T)
    tau = np.where(occ, np.maximum(tau, prev), T)
    return tau, occ


def sample_default_times(spec: DefaultSpec, grid: TimeGrid, seed, size: int = 1):
    """Ordered default times, shape ``(size, n)``, plus occurrence flags.

    Defaults that do not happen before T are clamped to T.
    """
    rng = np.random.default_rng(seed)
    lam = cumulative_hazard(spec, grid)
    expo = rng.standard_exponential((size, spec.n))
    return _sample_from(lam, grid.nodes, np.zeros(size), np.ones(size, bool), expo, 0)


def _sample_from(lam, nodes, start, start_occ, expo, k0):
    n = lam.shape[0]
    size = start.shape[0]
    tau = np.empty((size, n - k0))
    occ = np.empty((size, n - k0), bool)
    prev, prev_occ = start, start_occ
    for j, k in enumerate(range(k0, n)):
        prev, prev_occ = _next_default(lam[k], nodes, prev, prev_occ, expo[:, j])
        tau[:, j], occ[:, j] = prev, prev_occ
    return tau, occ


def jump_nodes(tau, occurred, dt: float, M: int):
    """Grid node of each default and whether it lands inside the grid.

    A default jumps at the first node at or after ``tau_k``; when that node is
    already taken by the previous default it moves to the next one, so every
    regime covers at least one cell. Defaults pushed past ``T`` are dropped.
    """
    tau = np.atleast_2d(tau)
    occ = np.atleast_2d(occurred).copy()
    jn = np.full(tau.shape, M + 1, dtype=int)
    prev = np.zeros(tau.shape[0], dtype=int)
    for k in range(tau.shape[1]):
        j = np.maximum(np.ceil(tau[:, k] / dt - 1e-9).astype(int), prev + 1)
        occ[:, k] &= j <= M
        jn[:, k] = np.where(occ[:, k], np.maximum(j, 1), M + 1)
        prev = np.where(occ[:, k], jn[:, k], M + 1)
    return jn, occ


def _template(n: int, P: int):
    depth, parent, level = [0], [-1], [0]
    i = 0
    while i < len(depth):
        for k in range(depth[i] + 1, n + 1):
            for _ in range(P):
                depth.append(k)
                parent.append(i)
                level.append(k)
        i += 1
    return np.array(depth), np.array(parent), np.array(level)


@dataclass
class PathRecord:
    dB: np.ndarray
    tau: np.ndarray
    occurred: np.ndarray
    H: np.ndarray
    dH: np.ndarray
    dA: np.ndarray

    @property
    def dH_total(self) -> np.ndarray:
        return self.dH.sum(axis=0)

    @property
    def dA_total(self) -> np.ndarray:
        return self.dA.sum(axis=0)


class ScenarioEnsemble:
    """Particle arrays for ``N_outer`` scenario trees on a common grid.

    Arrays are indexed by particle first: ``dB`` is ``(P, M)``, ``dH`` and
    ``dA`` are ``(P, n, M)``, ``regime`` is ``(P, M+1)``.
    """

    def __init__(self, spec, grid, N_outer, P_inner, seed, depth, parent, tau, occurred, dB, lam):
        self.spec = spec
        self.grid = grid
        self.N_outer = N_outer
        self.P_inner = P_inner
        self.seed = seed
        self.depth = depth
        self.parent = parent
        self.tau = tau
        self.occurred = occurred
        self.dB = dB
        self.lam = lam
        self._build_jumps()
        self._clouds = {}

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def size(self) -> int:
        return self.dB.shape[0]

    @cached_property
    def roots(self) -> np.ndarray:
        return np.flatnonzero(self.depth == 0)

    def _build_jumps(self):
        grid, n = self.grid, self.n
        M, dt = grid.M, grid.dt
        nodes = grid.nodes
        P = self.size
        if n:
            self.jnode, occ = jump_nodes(self.tau, self.occurred, dt, M)
            if not np.array_equal(occ, self.occurred):
                dropped = self.occurred & ~occ
                self.tau = np.where(dropped, grid.T, self.tau)
                self.occurred = occ
        else:
            self.jnode = np.zeros((P, 0), int)
        steps = np.arange(M)
        self.dH = np.zeros((P, n, M), dtype=bool)
        self.comp = np.zeros((P, n, M))
        prev = np.zeros(P)
        for k in range(n):
            self.dH[:, k, :] = self.jnode[:, k, None] == steps[None, :] + 1
            a = np.maximum(nodes[None, :-1], prev[:, None])
            b = np.minimum(nodes[None, 1:], self.tau[:, k, None])
            la = np.interp(a, nodes, self.lam[k])
            lb = np.interp(b, nodes, self.lam[k])
            self.comp[:, k, :] = np.where(b > a, lb - la, 0.0)
            prev = self.tau[:, k]
        self.dA = self.dH - self.comp
        idx = np.arange(M + 1)
        self.regime = (idx[None, None, :] >= self.jnode[:, :, None]).sum(axis=1).astype(np.int8)

    @cached_property
    def B(self) -> np.ndarray:
        out = np.zeros((self.size, self.grid.M + 1))
        np.cumsum(self.dB, axis=1, out=out[:, 1:])
        return out

    @cached_property
    def H(self) -> np.ndarray:
        out = np.zeros((self.size, self.n, self.grid.M + 1))
        np.cumsum(self.dH, axis=2, out=out[:, :, 1:])
        return out

    @cached_property
    def A(self) -> np.ndarray:
        out = np.zeros((self.size, self.n, self.grid.M + 1))
        np.cumsum(self.dA, axis=2, out=out[:, :, 1:])
        return out

    def gamma_cell(self, k: int) -> np.ndarray:
        """Cell-averaged active intensity of default ``k`` (1-based), ``(P, M)``."""
        if k < 1 or k > self.n:
            return np.zeros((self.size, self.grid.M))
        return self.comp[:, k - 1, :] / self.grid.dt

    def dA_of(self, k: int) -> np.ndarray:
        if k < 1 or k > self.n:
            return np.zeros((self.size, self.grid.M))
        return self.dA[:, k - 1, :]

    def start_node(self, k: int) -> np.ndarray:
        """Grid node at which regime ``k`` starts (``M+1`` if never)."""
        if k == 0:
            return np.zeros(self.size, int)
        return self.jnode[:, k - 1]

    def roots_only(self) -> "ScenarioEnsemble":
        """The outer paths alone, without clouds.

        Enough wherever no conditional mean given a default time is needed;
        per-particle arrays of the full ensemble map over with ``a[ens.roots]``.
        """
        r = self.roots
        return ScenarioEnsemble(self.spec, self.grid, self.N_outer, 0, self.seed,
                                np.zeros(r.size, int), np.full(r.size, -1), self.tau[r],
                                self.occurred[r], self.dB[r], self.lam)

    def coarsen(self, factor: int) -> "ScenarioEnsemble":
        """The same root paths on a grid ``factor`` times coarser.

        Brownian increments are summed and default times kept, so solutions
        on both grids can be compared path by path.
        """
        if self.P_inner:
            raise ValueError("coarsen needs an ensemble without clouds; use roots_only() first")
        if factor < 1 or self.grid.M % factor:
            raise GridMismatch(f"M={self.grid.M} is not divisible by {factor}")
        grid = build_grid(self.grid.T, self.grid.M // factor)
        dB = self.dB.reshape(self.size, grid.M, factor).sum(axis=2)
        return ScenarioEnsemble(self.spec, grid, self.N_outer, 0, self.seed, self.depth, self.parent,
                                self.tau, self.occurred, dB, cumulative_hazard(self.spec, grid))

    def path(self, i: int) -> PathRecord:
        return PathRecord(
            dB=self.dB[i], tau=self.tau[i], occurred=self.occurred[i],
            H=self.H[i], dH=self.dH[i].astype(float), dA=self.dA[i],
        )

    # clouds -----------------------------------------------------------------

    def cloud(self, k: int):
        """``(ids, members, G)`` for level ``k``.

        ``ids[p]`` is the cloud row of particle p, ``members`` marks the
        particles averaged over and ``G`` is the sparse member indicator.
        """
        if k in self._clouds:
            return self._clouds[k]
        Ptot = self.size
        if k == 0:
            ids = np.zeros(Ptot, int)
            members = self.depth == 0
        else:
            if self.P_inner == 0:
                raise EmptyCloud(f"level-{k} conditional mean needs P_inner > 0")
            a = np.arange(Ptot)
            for _ in range(self.n + 1):
                up = self.depth[a] > k
                a = np.where(up, self.parent[a], a)
            head = np.where(self.depth[a] == k, self.parent[a], a)
            _, ids = np.unique(head, return_inverse=True)
            members = self.depth == k
        C = int(ids.max()) + 1
        rows = ids[members]
        cols = np.flatnonzero(members)
        G = sparse.csr_matrix((np.ones(cols.size), (rows, cols)), shape=(C, Ptot))
        counts = np.asarray(G.sum(axis=1)).ravel()
        self._clouds[k] = (ids, members, G, counts)
        return self._clouds[k]

    def level_mean(self, values: np.ndarray, k: int) -> np.ndarray:
        """Average over the level-``k`` cloud, broadcast back to every particle."""
        ids, members, G, counts = self.cloud(k)
        flat = np.asarray(values, dtype=float).reshape(self.size, -1)
        sums = G @ flat
        with np.errstate(invalid="ignore", divide="ignore"):
            means = sums / counts[:, None]
        return means[ids].reshape(np.shape(values))


def simulate_ensemble(spec, grid: TimeGrid, N_outer: int, P_inner: int = 0, seed: int = 0,
                      budget: int = DEFAULT_BUDGET) -> ScenarioEnsemble:
    """Build an ensemble; ``spec`` may be a ProblemSpec or a DefaultSpec."""
    ds = getattr(spec, "default_spec", spec)
    n, M = ds.n, grid.M
    depth_t, parent_t, level_t = _template(n, P_inner)
    S = depth_t.size
    if N_outer * S * M * max(n, 1) > budget:
        raise ResourceLimit(f"{N_outer} x {S} particles x {M} steps exceeds budget {budget}")
    lam = cumulative_hazard(ds, grid)
    nodes = grid.nodes
    streams = np.random.SeedSequence(seed).spawn(N_outer)
    normals = np.empty((N_outer, S, M))
    expos = np.empty((N_outer, S, n))
    for o, ss in enumerate(streams):
        g = np.random.Generator(np.random.PCG64(ss))
        normals[o] = g.standard_normal((S, M))
        expos[o] = g.standard_exponential((S, n))
    sq = np.sqrt(grid.dt)
    dB = normals * sq
    tau = np.empty((N_outer, S, n))
    occ = np.empty((N_outer, S, n), bool)
    for c in range(S):
        if parent_t[c] < 0:
            t_, o_ = _sample_from(lam, nodes, np.zeros(N_outer), np.ones(N_outer, bool), expos[:, c], 0)
            tau[:, c], occ[:, c] = t_, o_
            continue
        a, k = parent_t[c], level_t[c]
        tau[:, c, :k] = tau[:, a, :k]
        occ[:, c, :k] = occ[:, a, :k]
        if k < n:
            t_, o_ = _sample_from(lam, nodes, tau[:, a, k - 1], occ[:, a, k - 1], expos[:, c, k:], k)
            tau[:, c, k:], occ[:, c, k:] = t_, o_
        jn, o_ = jump_nodes(tau[:, a, :k], occ[:, a, :k], grid.dt, M)
        j = np.where(o_[:, k - 1], jn[:, k - 1], M)
        keep = np.arange(M)[None, :] < np.clip(j, 0, M)[:, None]
        dB[:, c] = np.where(keep, dB[:, a], dB[:, c])
    offs = (np.arange(N_outer) * S)[:, None]
    depth = np.broadcast_to(depth_t, (N_outer, S)).ravel().copy()
    parent = np.where(parent_t[None, :] < 0, -1, parent_t[None, :] + offs).ravel()
    return ScenarioEnsemble(
        ds, grid, N_outer, P_inner, seed, depth, parent,
        tau.reshape(N_outer * S, n), occ.reshape(N_outer * S, n), dB.reshape(-1, M), lam,
    )


def ito_product_residual(x1, x2, path: PathRecord, dt: float) -> float:
    """Largest one-step defect of the discrete Ito product rule.

    ``x1`` and ``x2`` are ``(x, b, sigma, h)`` tuples: node values ``(M+1,)``,
    drift and volatility ``(M,)`` and jump coefficients ``(n, M)``.
    """
    (a, _, s1, h1), (b, _, s2, h2) = x1, x2
    a, b = np.asarray(a, float), np.asarray(b, float)
    M = path.dB.shape[0]
    if a.shape != (M + 1,) or b.shape != (M + 1,):
        raise GridMismatch(f"processes must have {M + 1} nodes, got {a.shape} and {b.shape}")
    s1 = np.broadcast_to(s1, (M,))
    s2 = np.broadcast_to(s2, (M,))
    n = path.dH.shape[0]
    h1 = np.broadcast_to(h1, (n, M))
    h2 = np.broadcast_to(h2, (n, M))
    da, db = np.diff(a), np.diff(b)
    dprod = np.diff(a * b)
    res = dprod - a[:-1] * db - b[:-1] * da - s1 * s2 * dt - (h1 * h2 * path.dH).sum(axis=0)
    return float(np.max(np.abs(res)))


def export_ensemble(ens: ScenarioEnsemble, fh, which=None) -> None:
    """Columnar text: scenario, node, t, dB, H^1..H^n, A^1..A^n."""
    which = ens.roots if which is None else np.asarray(which)
    M, n = ens.grid.M, ens.n
    cols = ["scenario", "node", "t", "dB"] + [f"H{k}" for k in range(1, n + 1)] + [
        f"A{k}" for k in range(1, n + 1)
    ]
    fh.write(" ".join(cols) + "\n")
    H, A = ens.H, ens.A
    for p in which:
        dB = np.append(ens.dB[p], 0.0)
        block = np.column_stack(
            [np.full(M + 1, p), np.arange(M + 1), ens.grid.nodes, dB, H[p].T, A[p].T]
        )
        np.savetxt(fh, block, fmt=["%d", "%d"] + ["%.10g"] * (2 + 2 * n))
