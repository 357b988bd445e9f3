"""Conditional mean-field operators: cloud averages and ridge regression."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Sequence

import numpy as np

from .paths import ScenarioEnsemble

__all__ = [
    "CloudEstimate",
    "RegressionBasis",
    "Predictor",
    "WeightedCondOperator",
    "SingularDesign",
    "cond_mean_cloud",
    "cond_mean_regress",
    "weighted_cond",
    "regime_select",
    "basis_layout",
    "ridge_solve",
    "state_mean_field",
]


class SingularDesign(np.linalg.LinAlgError):
    pass


@dataclass
class CloudEstimate:
    value: np.ndarray
    size: np.ndarray
    k: int


def cond_mean_cloud(ens: ScenarioEnsemble, values: np.ndarray, k: int) -> CloudEstimate:
    """Branch average of ``values`` over the level-``k`` cloud."""
    ids, _, _, counts = ens.cloud(k)
    return CloudEstimate(ens.level_mean(values, k), counts[ids], k)


@dataclass(frozen=True)
class WeightedCondOperator:
    """Weight curves ``W^k(t)``, one per regime, bounded by ``w_max``."""

    weights: tuple
    w_max: float = 1.0

    def __post_init__(self):
        tt = np.linspace(0.0, 1.0, 11)
        for w in self.weights:
            v = np.asarray(w(tt), dtype=float)
            if np.any(v < 0) or np.any(v > self.w_max):
                raise ValueError("weights must lie in [0, w_max]")

    def weight(self, k: int, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.broadcast_to(np.asarray(self.weights[k](t), dtype=float), t.shape)

    @classmethod
    def unit(cls, n: int) -> "WeightedCondOperator":
        return cls(tuple(lambda t: np.ones_like(t) for _ in range(n + 1)), 1.0)


def weighted_cond(op: WeightedCondOperator, ens: ScenarioEnsemble, values: np.ndarray, k: int) -> CloudEstimate:
    """``cond_mean_cloud`` applied to ``W^k(t) * values``; columns are grid nodes."""
    t = ens.grid.nodes[: np.shape(values)[-1]]
    return cond_mean_cloud(ens, op.weight(k, t)[None, :] * values, k)


def regime_select(per_level: Sequence[np.ndarray], regime: np.ndarray) -> np.ndarray:
    """Pick ``per_level[k][p, i]`` where ``regime[p, i] == k``."""
    out = np.zeros(regime.shape)
    for k, arr in enumerate(per_level):
        mask = regime == k
        out[mask] = np.asarray(arr)[..., : regime.shape[1]][mask]
    return out


def state_mean_field(ens: ScenarioEnsemble, per_level: Sequence[np.ndarray], frozen: bool) -> list:
    """Conditional means of regime-continued processes, one array per level."""
    if not frozen:
        return [np.asarray(v, dtype=float) for v in per_level]
    return [ens.level_mean(v, k) for k, v in enumerate(per_level)]


def _monomials(d: int, degree: int):
    out = [()]
    for deg in range(1, degree + 1):
        out.extend(combinations_with_replacement(range(d), deg))
    return out


@dataclass
class RegressionBasis:
    """Polynomials in the features up to ``degree``, fitted per regime."""

    degree: int = 2
    ridge: float = 1e-8
    by_regime: bool = True

    def n_columns(self, d: int, degree: int | None = None) -> int:
        return len(_monomials(d, self.degree if degree is None else degree))


def _design(Z: np.ndarray, mons) -> np.ndarray:
    cols = [np.ones(Z.shape[0])]
    for m in mons[1:]:
        c = np.ones(Z.shape[0])
        for j in m:
            c = c * Z[:, j]
        cols.append(c)
    return np.column_stack(cols)


@dataclass
class _Fit:
    mu: np.ndarray
    sd: np.ndarray
    mons: list
    coef: np.ndarray | None = None

    def design(self, X: np.ndarray) -> np.ndarray:
        return _design((X - self.mu) / self.sd, self.mons)


@dataclass
class Predictor:
    fits: dict = field(default_factory=dict)
    pooled: _Fit | None = None
    cond: float = 1.0

    def __call__(self, features: np.ndarray, regime: np.ndarray | None = None) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=float))
        if X.shape[0] == 1 and np.ndim(features) == 1:
            X = X.T
        out = np.empty(X.shape[0])
        if regime is None:
            regime = np.zeros(X.shape[0], int)
        regime = np.broadcast_to(regime, (X.shape[0],))
        for key in np.unique(regime):
            sel = regime == key
            fit = self.fits.get(int(key), self.pooled)
            out[sel] = fit.design(X[sel]) @ fit.coef
        return out


def basis_layout(X: np.ndarray, basis: RegressionBasis, cols_per_term: int = 1) -> _Fit:
    """Standardization and monomial list for ``X``.

    Constant columns are dropped and the degree is lowered until the design
    has at most one column per ten samples.
    """
    n = X.shape[0]
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    live = sd > 1e-12 * np.maximum(np.abs(mu), 1.0)
    mu = np.where(live, mu, 0.0)
    sd = np.where(live, sd, 1.0)
    usable = np.flatnonzero(live)
    degree = basis.degree
    while degree > 0 and len(_monomials(usable.size, degree)) * cols_per_term * 10 > n:
        degree -= 1
    mons = [tuple(usable[j] for j in m) for m in _monomials(usable.size, degree)]
    return _Fit(mu, sd, mons)


def ridge_solve(Phi: np.ndarray, y: np.ndarray, ridge: float, free=(0,)):
    """Normalized ridge least squares; columns in ``free`` are not penalized."""
    n = Phi.shape[0]
    G = Phi.T @ Phi / n
    cond = np.linalg.cond(G) if Phi.shape[1] > 1 else 1.0
    if ridge == 0 and cond > 1e12:
        raise SingularDesign(f"design condition number {cond:.3g} exceeds 1e12")
    lam = ridge * np.eye(Phi.shape[1])
    for j in free:
        lam[j, j] = 0.0
    return np.linalg.solve(G + lam, Phi.T @ y / n), cond


def _fit_one(X, y, basis: RegressionBasis):
    fit = basis_layout(X, basis)
    fit.coef, cond = ridge_solve(fit.design(X), y, basis.ridge)
    return fit, cond


def cond_mean_regress(features: np.ndarray, values: np.ndarray, basis: RegressionBasis,
                      regime: np.ndarray | None = None) -> Predictor:
    """Ridge least-squares fit of ``values`` on polynomial features.

    With ``basis.by_regime`` the fit is done separately inside each regime
    group; groups too small for the basis fall back to lower degrees.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(values, dtype=float)
    if X.shape[0] <= 1:
        raise SingularDesign("need more than one sample")
    pred = Predictor()
    pred.pooled, pred.cond = _fit_one(X, y, basis)
    if basis.by_regime and regime is not None:
        regime = np.asarray(regime)
        keys = np.unique(regime)
        if keys.size > 1:
            for key in keys:
                sel = regime == key
                if sel.sum() >= 2:
                    pred.fits[int(key)], c = _fit_one(X[sel], y[sel], basis)
                    pred.cond = max(pred.cond, c)
        else:
            pred.fits[int(keys[0])] = pred.pooled
    return pred


def poly_features(*cols: np.ndarray) -> np.ndarray:
    return np.stack(cols, axis=-1)
