"""Problem data: default structure, regime coefficients, information modes.

Coefficient callables share one signature, ``fn(t, x, m, u, n, aux)``, where
``m`` and ``n`` are the conditional mean-field values of state and control and
``aux`` is a dict of exogenous per-path values at the current node (possibly
empty). All arguments may be numpy arrays; callables must broadcast.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "Term",
    "TerminalGain",
    "Regime",
    "DefaultSpec",
    "CoefficientSet",
    "InfoMode",
    "FULL",
    "FROZEN",
    "ProblemSpec",
    "SpecError",
    "MissingGradient",
    "validate_spec",
    "audit_lipschitz",
    "const_term",
    "zero_term",
]


class MissingGradient(LookupError):
    """A coefficient derivative was needed but not supplied."""


class SpecError(ValueError):
    """Validation failure; ``violations`` holds ``(name, message)`` pairs."""

    def __init__(self, violations):
        self.violations = list(violations)
        self.names = [name for name, _ in self.violations]
        super().__init__("; ".join(f"{n}: {m}" for n, m in self.violations))


@dataclass(frozen=True)
class Term:
    """A coefficient function with optional partial derivatives."""

    fn: Callable
    dx: Callable | None = None
    dm: Callable | None = None
    du: Callable | None = None
    dn: Callable | None = None

    def __call__(self, t, x, m, u, n, aux=None):
        return self.fn(t, x, m, u, n, aux if aux is not None else {})

    def grad(self, which, t, x, m, u, n, aux=None):
        d = getattr(self, which)
        if d is None:
            raise MissingGradient(f"derivative '{which}' not supplied")
        return d(t, x, m, u, n, aux if aux is not None else {})


def const_term(c: float) -> Term:
    z = lambda t, x, m, u, n, aux: 0.0 * np.asarray(x, dtype=float)
    return Term(lambda t, x, m, u, n, aux: c + 0.0 * np.asarray(x, dtype=float), z, z, z, z)


def zero_term() -> Term:
    return const_term(0.0)


@dataclass(frozen=True)
class TerminalGain:
    """Terminal gain ``g(x, m, aux)`` with derivatives in x and m."""

    fn: Callable
    dx: Callable | None = None
    dm: Callable | None = None

    def __call__(self, x, m, aux=None):
        return self.fn(x, m, aux if aux is not None else {})

    def grad(self, which, x, m, aux=None):
        d = getattr(self, which)
        if d is None:
            raise MissingGradient(f"terminal derivative '{which}' not supplied")
        return d(x, m, aux if aux is not None else {})


@dataclass(frozen=True)
class Regime:
    """Coefficients of one regime ``[tau_k, tau_{k+1})``."""

    b: Term = field(default_factory=zero_term)
    sigma: Term = field(default_factory=zero_term)
    h: Term = field(default_factory=zero_term)
    f: Term = field(default_factory=zero_term)


@dataclass(frozen=True)
class DefaultSpec:
    """Ordered default times driven by deterministic intensity curves.

    ``gamma[k-1]`` is the intensity of the k-th default; its clock runs only
    between the (k-1)-th and k-th defaults.
    """

    T: float
    gamma: tuple = ()
    gamma_bound: float = 1.0

    @property
    def n(self) -> int:
        return len(self.gamma)

    def intensity(self, k: int, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(self.gamma[k - 1](t), dtype=float), t.shape)


@dataclass(frozen=True)
class CoefficientSet:
    regimes: tuple
    g: TerminalGain
    lipschitz: float = 1.0

    def __getitem__(self, k: int) -> Regime:
        return self.regimes[k]


@dataclass(frozen=True)
class InfoMode:
    """Information available to state mean-field terms or to the controller.

    ``full`` conditions on the whole filtration at time t, ``frozen`` on the
    information at the last default. ``delay`` is reserved.
    """

    kind: str = "full"
    delay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("full", "frozen"):
            raise ValueError(f"unknown information mode {self.kind!r}")

    @property
    def frozen(self) -> bool:
        return self.kind == "frozen"


FULL = InfoMode("full")
FROZEN = InfoMode("frozen")


@dataclass(frozen=True)
class ProblemSpec:
    default_spec: DefaultSpec
    coeffs: CoefficientSet
    x0: float
    state_info: InfoMode = FULL
    control_info: InfoMode = FULL
    bounds: tuple = ()

    @property
    def n(self) -> int:
        return self.default_spec.n

    @property
    def T(self) -> float:
        return self.default_spec.T

    def bound(self, k: int) -> tuple[float, float]:
        if not self.bounds:
            return (-np.inf, np.inf)
        return self.bounds[k]


def _probe_points(spec: ProblemSpec, k: int, size: int, rng, box: float):
    lo, hi = spec.bound(k)
    lo, hi = max(lo, -box), min(hi, box)
    t = rng.uniform(0.0, spec.T, size)
    x = rng.uniform(-box, box, size)
    m = rng.uniform(-box, box, size)
    u = rng.uniform(lo, hi, size) if hi > lo else np.full(size, lo)
    nn = rng.uniform(lo, hi, size) if hi > lo else np.full(size, lo)
    return t, x, m, u, nn


def audit_lipschitz(spec: ProblemSpec, size: int = 2000, box: float = 5.0, seed: int = 0) -> float:
    """Largest sampled difference quotient of b, sigma, h over all regimes.

    Quotients use the l1 distance in (x, m, u, n). Terms that need
    exogenous ``aux`` inputs are skipped.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, reg in enumerate(spec.coeffs.regimes):
        t, x, m, u, nn = _probe_points(spec, k, size, rng, box)
        step = rng.normal(scale=0.1, size=(4, size))
        lo, hi = spec.bound(k)
        u2 = np.clip(u + step[2], lo, hi)
        n2 = np.clip(nn + step[3], lo, hi)
        x2, m2 = x + step[0], m + step[1]
        dist = np.abs(x2 - x) + np.abs(m2 - m) + np.abs(u2 - u) + np.abs(n2 - nn)
        ok = dist > 1e-12
        for term in (reg.b, reg.sigma, reg.h):
            try:
                a = np.asarray(term(t, x, m, u, nn), dtype=float)
                b = np.asarray(term(t, x2, m2, u2, n2), dtype=float)
            except KeyError:
                continue
            q = np.abs(np.broadcast_to(b - a, dist.shape))[ok] / dist[ok]
            if q.size:
                worst = max(worst, float(np.max(q)))
    return worst


def validate_spec(spec: ProblemSpec, probe_size: int = 257, audit: bool = True) -> ProblemSpec:
    """Return ``spec`` unchanged or raise SpecError listing every violation."""
    violations = []
    ds = spec.default_spec
    if not (np.isfinite(ds.T) and ds.T > 0):
        violations.append(("NonPositiveHorizon", f"T={ds.T}"))
    if not ds.gamma_bound > 0:
        violations.append(("NonPositiveBound", f"gamma_bound={ds.gamma_bound}"))
    tt = np.linspace(0.0, ds.T if ds.T > 0 else 1.0, probe_size)
    for k in range(1, ds.n + 1):
        g = ds.intensity(k, tt)
        if np.any(g < 0):
            violations.append(("NegativeIntensity", f"gamma^{k} min {g.min():.4g} < 0"))
        if np.any(g > ds.gamma_bound):
            violations.append(
                ("UnboundedIntensity", f"gamma^{k} max {g.max():.4g} > {ds.gamma_bound}")
            )
    if len(spec.coeffs.regimes) != ds.n + 1:
        violations.append(
            ("RegimeCount", f"{len(spec.coeffs.regimes)} regimes for n={ds.n} defaults")
        )
    if not np.isfinite(spec.x0):
        violations.append(("NonFiniteInitialState", f"x0={spec.x0}"))
    if spec.bounds:
        if len(spec.bounds) != ds.n + 1:
            violations.append(("EmptyAdmissibleSet", "one interval per regime required"))
        for k, (lo, hi) in enumerate(spec.bounds):
            if not lo <= hi:
                violations.append(("EmptyAdmissibleSet", f"U^{k} = [{lo}, {hi}]"))
    for mode in (spec.state_info, spec.control_info):
        if mode.delay > 0:
            violations.append(("UnsupportedDelay", "delayed information is not implemented"))
    if not violations:
        rng = np.random.default_rng(12345)
        last = spec.coeffs.regimes[-1]
        t, x, m, u, nn = _probe_points(spec, ds.n, probe_size, rng, 5.0)
        try:
            hv = np.asarray(last.h(t, x, m, u, nn), dtype=float)
            if np.any(np.abs(hv) > 0):
                violations.append(
                    ("NonzeroTerminalJump", f"h^{ds.n} reaches {np.abs(hv).max():.4g}")
                )
        except KeyError:
            pass
        if audit and spec.coeffs.lipschitz > 0:
            worst = audit_lipschitz(spec)
            if worst > 1.01 * spec.coeffs.lipschitz:
                violations.append(
                    ("LipschitzExceeded", f"probed {worst:.4g} > declared {spec.coeffs.lipschitz}")
                )
        elif spec.coeffs.lipschitz <= 0:
            violations.append(("NonPositiveLipschitz", f"L={spec.coeffs.lipschitz}"))
    if violations:
        raise SpecError(violations)
    return spec

