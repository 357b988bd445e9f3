"""Batch command line: parse a YAML experiment file, run one subcommand, write artifacts.

Config layout (three sections)::

    problem:   kind (generic | logutil), T, x0, gamma, gamma_bound, state_info,
               control_info, bounds, lipschitz, regimes, g  (generic)
               market, utility, u_bounds                     (logutil)
    numerics:  M, N_outer, P_inner, seed, tol, max_iter, basis_degree, ridge, u_grid
    run:       out, control, export_paths, bsde, improve, logutil

Curves are numbers or one of ``{constant: c}``, ``{affine: [a, b]}`` (a + b t),
``{exponential: [a, b]}`` (a e^{b t}) and ``{sampled: {t: [...], v: [...]}}``.
Coefficients are maps from monomials in ``x, m, u, n`` (``1``, ``x``, ``xu``,
``x2``...) to curves; gradients follow from the monomials.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import platform
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__

log = logging.getLogger("mfdefault")

__all__ = [
    "ParseError",
    "ValidationError",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "run",
    "main",
    "SUBCOMMANDS",
]

SUBCOMMANDS = ("simulate", "solve-bsde", "evaluate", "check-mp", "improve", "example-logutil", "plot-data")


class ParseError(ValueError):
    def __init__(self, msg, line=None, field=None):
        self.line, self.field = line, field
        where = f" (line {line})" if line is not None else ""
        where += f" [{field}]" if field else ""
        super().__init__(msg + where)


class ValidationError(ValueError):
    def __init__(self, msg, field=None, violations=()):
        self.field = field
        self.violations = list(violations)
        super().__init__(msg)


# defaults ------------------------------------------------------------------

NUMERICS = {"M": 64, "N_outer": 10000, "P_inner": 0, "seed": 0, "tol": 1e-6, "max_iter": 50,
            "basis_degree": 2, "ridge": 1e-8, "u_grid": 101}
PROBLEM = {"kind": "generic", "gamma": [], "gamma_bound": None, "state_info": "full",
           "control_info": "full", "bounds": None, "lipschitz": 1.0, "regimes": None, "g": {}}
RUN = {"out": "runs/latest", "control": 0.0, "export_paths": 20, "bsde": None,
       "improve": {"step": 0.3, "iters": 50, "sweep": False},
       "logutil": {"scheme": "discrete", "deltas": [-0.2, -0.1, -0.05, 0.05, 0.1, 0.2],
                   "improve_iters": 50, "step": 0.3, "ratio_check": True}}


@dataclass
class ExperimentConfig:
    problem: dict
    numerics: dict
    run: dict
    source: str | None = None
    built: dict = field(default_factory=dict, repr=False)

    def echo(self) -> dict:
        return {"problem": self.problem, "numerics": self.numerics, "run": self.run}


# curves and monomials --------------------------------------------------------


def curve(spec, where="curve"):
    """Callable ``t -> array`` from a curve entry."""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        v = float(spec)
        return lambda t: v + 0.0 * np.asarray(t, dtype=float)
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ValidationError(f"{where}: expected a number or a one-key curve mapping", where)
    (kind, par), = spec.items()
    if kind == "constant":
        return curve(float(par), where)
    if kind in ("affine", "exponential"):
        if not (isinstance(par, (list, tuple)) and len(par) == 2):
            raise ValidationError(f"{where}: {kind} takes [a, b]", where)
        a, b = map(float, par)
        if kind == "affine":
            return lambda t: a + b * np.asarray(t, dtype=float)
        return lambda t: a * np.exp(b * np.asarray(t, dtype=float))
    if kind == "sampled":
        tt = np.asarray(par.get("t", []), dtype=float)
        vv = np.asarray(par.get("v", []), dtype=float)
        if tt.size < 2 or tt.size != vv.size or np.any(np.diff(tt) <= 0):
            raise ValidationError(f"{where}: sampled curve needs increasing t and matching v", where)
        return lambda t: np.interp(np.asarray(t, dtype=float), tt, vv)
    raise ValidationError(f"{where}: unknown curve family {kind!r}", where)


_MONO = re.compile(r"([xmun])(\d*)")
_VARS = "xmun"


def monomial(name: str, allowed: str = _VARS):
    """Exponents of ``x, m, u, n`` in a monomial name such as ``x2u``."""
    if name in ("1", "const"):
        return (0, 0, 0, 0)
    pos, exps = 0, [0, 0, 0, 0]
    for mt in _MONO.finditer(name):
        if mt.start() != pos:
            break
        if mt.group(1) not in allowed:
            raise ValidationError(f"variable {mt.group(1)!r} not allowed here", name)
        exps[_VARS.index(mt.group(1))] += int(mt.group(2) or 1)
        pos = mt.end()
    if pos != len(name):
        raise ValidationError(f"bad monomial {name!r}", name)
    return tuple(exps)


def _power(v, e):
    return np.ones_like(v) if e == 0 else v ** e


def _poly(terms, wrt=None):
    """``sum c(t) x^a m^b u^c n^d`` or its derivative in variable ``wrt``."""
    def fn(t, x, m, u, n, aux=None):
        args = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, m, u, n)))
        out = np.zeros_like(args[0])
        for c, exps in terms:
            e = list(exps)
            scale = 1.0
            if wrt is not None:
                j = _VARS.index(wrt)
                if e[j] == 0:
                    continue
                scale = e[j]
                e[j] -= 1
            val = scale * np.asarray(c(t), dtype=float)
            for v, k in zip(args, e):
                val = val * _power(v, k)
            out = out + val
        return out
    return fn


def coefficient(spec, where: str, allowed: str = _VARS):
    from .model import Term
    spec = spec or {}
    if not isinstance(spec, dict):
        raise ValidationError(f"{where}: expected a monomial mapping", where)
    terms = [(curve(v, f"{where}.{k}"), monomial(str(k), allowed)) for k, v in spec.items()]
    return Term(_poly(terms), *(_poly(terms, w) for w in _VARS))


def terminal(spec, where="problem.g"):
    from .model import TerminalGain
    terms = [(curve(v, f"{where}.{k}"), monomial(str(k), "xm")) for k, v in (spec or {}).items()]
    f, fx, fm = _poly(terms), _poly(terms, "x"), _poly(terms, "m")
    z = np.zeros(())
    return TerminalGain(lambda x, m, a: f(0.0, x, m, z, z), lambda x, m, a: fx(0.0, x, m, z, z),
                        lambda x, m, a: fm(0.0, x, m, z, z))


# parsing --------------------------------------------------------------------


def _merge(defaults, given, where):
    out = copy.deepcopy(defaults)
    for k, v in (given or {}).items():
        if isinstance(out.get(k), dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}.{k}")
        else:
            out[k] = v
    return out


def load_config(text: str, source: str | None = None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"malformed config: {getattr(exc, 'problem', exc)}",
                         mark.line + 1 if mark else None) from exc
    if not isinstance(raw, dict):
        raise ParseError("top level must be a mapping")
    unknown = set(raw) - {"problem", "numerics", "run"}
    if unknown:
        raise ParseError(f"unknown section(s) {sorted(unknown)}", field=sorted(unknown)[0])
    for sec in ("problem", "numerics", "run"):
        if raw.get(sec) is not None and not isinstance(raw[sec], dict):
            raise ParseError(f"section {sec!r} must be a mapping", field=sec)
    prob = raw.get("problem") or {}
    for key in ("T", "x0"):
        if key not in prob:
            raise ValidationError(f"missing required field problem.{key}", f"problem.{key}")
    cfg = ExperimentConfig(_merge(PROBLEM, prob, "problem"), _merge(NUMERICS, raw.get("numerics"), "numerics"),
                           _merge(RUN, raw.get("run"), "run"), source)
    _validate(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"config file {path} not found")
    return load_config(path.read_text(), str(path))


def _info(name, where):
    from .model import FROZEN, FULL
    if name not in ("full", "frozen"):
        raise ValidationError(f"{where} must be 'full' or 'frozen'", where)
    return FULL if name == "full" else FROZEN


def _gamma_bound(pr, gammas, T):
    if pr["gamma_bound"] is not None:
        return float(pr["gamma_bound"])
    tt = np.linspace(0.0, T, 257)
    return max([1.0] + [float(np.max(g(tt))) for g in gammas])


def _validate(cfg: ExperimentConfig) -> None:
    from .model import CoefficientSet, DefaultSpec, ProblemSpec, Regime, SpecError, validate_spec
    pr, nm = cfg.problem, cfg.numerics
    try:
        T, x0 = float(pr["T"]), float(pr["x0"])
    except (TypeError, ValueError) as exc:
        raise ValidationError("problem.T and problem.x0 must be numbers", "problem.T") from exc
    for key in ("M", "N_outer", "P_inner", "max_iter", "basis_degree", "u_grid"):
        if not isinstance(nm[key], int) or nm[key] < (0 if key == "P_inner" else 1):
            raise ValidationError(f"numerics.{key} must be a positive integer", f"numerics.{key}")
    if not (float(nm["tol"]) > 0 and float(nm["ridge"]) >= 0):
        raise ValidationError("numerics.tol must be > 0 and numerics.ridge >= 0", "numerics.tol")
    kind = pr["kind"]
    if kind == "logutil":
        cfg.built["logutil"] = _logutil_problem(pr, T, x0)
        from .logutil import wealth_problem
        try:
            spec = wealth_problem(cfg.built["logutil"], float(pr.get("lipschitz") or 25.0))
            validate_spec(spec, audit=False)
        except SpecError as exc:
            raise ValidationError(str(exc), "problem", exc.violations) from exc
        cfg.built["spec"] = spec
        return
    if kind != "generic":
        raise ValidationError("problem.kind must be 'generic' or 'logutil'", "problem.kind")
    gammas = tuple(curve(g, f"problem.gamma[{i}]") for i, g in enumerate(pr["gamma"] or []))
    n = len(gammas)
    regs = pr["regimes"] if pr["regimes"] is not None else [{} for _ in range(n + 1)]
    if not isinstance(regs, list):
        raise ValidationError("problem.regimes must be a list", "problem.regimes")
    built = []
    for k, r in enumerate(regs):
        r = r or {}
        extra = set(r) - {"b", "sigma", "h", "f"}
        if extra:
            raise ValidationError(f"problem.regimes[{k}]: unknown keys {sorted(extra)}", f"problem.regimes[{k}]")
        built.append(Regime(**{key: coefficient(r.get(key), f"problem.regimes[{k}].{key}")
                               for key in ("b", "sigma", "h", "f")}))
    bounds = pr["bounds"]
    if bounds is None:
        bounds = ()
    elif len(bounds) == 2 and all(isinstance(v, (int, float)) for v in bounds):
        bounds = tuple((float(bounds[0]), float(bounds[1])) for _ in range(n + 1))
    else:
        bounds = tuple((float(a), float(b)) for a, b in bounds)
    ds = DefaultSpec(T, gammas, _gamma_bound(pr, gammas, T))
    spec = ProblemSpec(ds, CoefficientSet(tuple(built), terminal(pr["g"]), float(pr["lipschitz"])), x0,
                       _info(pr["state_info"], "problem.state_info"),
                       _info(pr["control_info"], "problem.control_info"), bounds)
    try:
        validate_spec(spec)
    except SpecError as exc:
        raise ValidationError(str(exc), "problem", exc.violations) from exc
    cfg.built["spec"] = spec


def _table(rows, where):
    if not (isinstance(rows, list) and len(rows) == 3 and all(isinstance(r, list) and len(r) == 3 for r in rows)):
        raise ValidationError(f"{where} must be a 3x3 list of curves", where)
    return tuple(tuple(curve(c, f"{where}[{i}][{j}]") for j, c in enumerate(r)) for i, r in enumerate(rows))


def _logutil_problem(pr, T, x0):
    from .logutil import LogUtilityProblem, MarketCurves, UtilityCurves
    from .model import SpecError
    for key in ("market", "utility"):
        if key not in pr:
            raise ValidationError(f"missing required field problem.{key}", f"problem.{key}")
    if len(pr["gamma"] or []) != 2:
        raise ValidationError("the log-utility problem has exactly two defaults", "problem.gamma")
    gammas = tuple(curve(g, f"problem.gamma[{i}]") for i, g in enumerate(pr["gamma"]))
    lo, hi = pr.get("u_bounds", [1e-3, 10.0])
    prob = LogUtilityProblem(MarketCurves(_table(pr["market"], "problem.market")),
                             UtilityCurves(_table(pr["utility"], "problem.utility")),
                             gammas, T, x0, (float(lo), float(hi)), _info(pr["control_info"], "problem.control_info"))
    try:
        prob.market.validate(T)
        prob.utility.validate(T)
    except SpecError as exc:
        raise ValidationError(str(exc), "problem", exc.violations) from exc
    return prob


# running ---------------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    bound: float
    statistical: bool = True

    def as_dict(self):
        return {"name": self.name, "passed": bool(self.passed), "value": float(self.value),
                "bound": float(self.bound), "statistical": self.statistical}


@dataclass
class Outcome:
    summary: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)


class _Context:
    """Ensemble, problem data and default control shared by the subcommands."""

    def __init__(self, cfg: ExperimentConfig, M: int | None = None):
        from .meanfield import RegressionBasis
        from .paths import build_grid, simulate_ensemble
        nm = cfg.numerics
        self.cfg = cfg
        self.spec = cfg.built["spec"]
        self.prob = cfg.built.get("logutil")
        self.basis = RegressionBasis(degree=nm["basis_degree"], ridge=float(nm["ridge"]))
        P_inner = nm["P_inner"]
        if self.prob is not None and P_inner == 0:
            P_inner = 2
        grid = build_grid(self.spec.T, M or nm["M"])
        self.ens = simulate_ensemble(self.spec.default_spec, grid, nm["N_outer"], P_inner, nm["seed"])
        self.aux = None
        self.features = None
        self.Y = None
        if self.prob is not None:
            from .logutil import adjoint_features, compute_y
            self.Y = compute_y(self.prob, self.ens)
            self.aux = {"Y": self.Y.euler}
            self.features = adjoint_features(self.Y)

    def control(self):
        from .forward import ControlProcess
        if self.prob is not None and self.cfg.run.get("control") in (None, "optimal"):
            from .logutil import optimal_control
            return optimal_control(self.prob, self.ens, self.Y, scheme=self.cfg.run["logutil"]["scheme"],
                                   basis=self.basis)
        vals = self.cfg.run["control"]
        vals = 0.0 if vals in (None, "optimal") else vals
        return ControlProcess.constant(self.ens, vals, self.spec.control_info).project(self.spec)

    def flat(self):
        from .forward import ControlProcess
        mids = [0.5 * (lo + hi) if np.isfinite(lo + hi) else 0.0
                for lo, hi in (self.spec.bound(k) for k in range(self.spec.n + 1))]
        return ControlProcess.constant(self.ens, mids, self.spec.control_info)

    def forward(self, control):
        from .forward import solve_mmfsde
        nm = self.cfg.numerics
        return solve_mmfsde(self.spec, self.ens, control, tol=float(nm["tol"]), max_iter=nm["max_iter"], aux=self.aux)


def _se_check(name, gap, se, nse=3.0):
    return Check(name, abs(gap) <= nse * se, abs(gap), nse * se)


def _run_simulate(ctx: _Context, out: Path) -> Outcome:
    from .forward import export_trajectory
    from .paths import export_ensemble
    traj, rep = ctx.forward(ctx.control())
    which = ctx.ens.roots[: ctx.cfg.run["export_paths"]]
    with open(out / "trajectory.txt", "w") as fh:
        export_trajectory(ctx.ens, traj, fh, which)
    with open(out / "ensemble.txt", "w") as fh:
        export_ensemble(ctx.ens, fh, which)
    r = ctx.ens.roots
    o = Outcome({"picard_iterations": rep.iterations, "picard_final_distance": rep.distances[-1],
                 "mean_X_T": float(traj.X[r, -1].mean()), "se_X_T": float(traj.X[r, -1].std(ddof=1) / np.sqrt(r.size))})
    o.checks.append(Check("picard_converged", rep.converged, rep.distances[-1], rep.tol, statistical=False))
    o.series["forward_contraction"] = (np.arange(1, rep.iterations + 1), np.asarray(rep.distances))
    return o


def _bsde_setup(ctx: _Context):
    from .backward import DriverSpec
    from .meanfield import WeightedCondOperator
    b = ctx.cfg.run.get("bsde") or {}
    ens = ctx.ens
    kind = b.get("zeta", "brownian")
    scale = float(b.get("zeta_scale", 1.0))
    if kind == "brownian":
        zeta = scale * ens.B[:, -1]
    elif kind == "constant":
        zeta = np.full(ens.size, scale)
    elif kind == "state":
        traj, _ = ctx.forward(ctx.control())
        zeta = scale * traj.X[:, -1]
    else:
        raise ValidationError(f"run.bsde.zeta {kind!r} unknown", "run.bsde.zeta")
    drv = b.get("driver", {}) or {}
    cp, cm, cq, c0 = (curve(drv.get(k, 0.0), f"run.bsde.driver.{k}") for k in ("p", "mp", "q", "const"))
    t = ens.grid.nodes
    mean_field = "mp" in drv

    def fn(i, ti, p, mp, q, mq, r, mr):
        return cp(t[i]) * p + cm(t[i]) * mp + cq(t[i]) * q + c0(t[i])

    lip = float(sum(abs(float(np.max(np.abs(c(t))))) for c in (cp, cm, cq)))
    op = WeightedCondOperator.unit(ens.n) if mean_field else None
    return DriverSpec(fn, max(lip, 1e-12), op), zeta


def _run_solve_bsde(ctx: _Context, out: Path) -> Outcome:
    from .backward import export_solution, solve_mmfbsde
    nm = ctx.cfg.numerics
    driver, zeta = _bsde_setup(ctx)
    sol, rep = solve_mmfbsde(driver, zeta, ctx.ens, ctx.basis, tol=float(nm["tol"]), max_iter=nm["max_iter"],
                             raise_on_failure=False)
    r = ctx.ens.roots
    with open(out / "bsde.txt", "w") as fh:
        export_solution(ctx.ens, sol, fh, r[: ctx.cfg.run["export_paths"]])
    se = float(np.std(zeta[r], ddof=1) / np.sqrt(r.size))
    o = Outcome({"p0": float(sol.p[r, 0].mean()), "se_p0": se, "picard_iterations": rep.iterations,
                 "final_distance": float(rep.distances[-1]), "mean_q0": float(sol.q[r, 0].mean())})
    o.checks.append(Check("picard_converged", rep.converged, rep.distances[-1], rep.tol, statistical=False))
    o.series["bsde_contraction"] = (np.arange(1, rep.iterations + 1), np.asarray(rep.distances, dtype=float))
    return o


def _run_evaluate(ctx: _Context, out: Path) -> Outcome:
    from .control import evaluate_performance
    control = ctx.control()
    traj, _ = ctx.forward(control)
    induction = not (ctx.spec.n > 0 and ctx.ens.P_inner == 0)
    perf = evaluate_performance(ctx.spec, control, ctx.ens, traj, ctx.aux, induction=induction)
    o = Outcome({"J": perf.J, "se": perf.se})
    if perf.J_induction is not None:
        o.summary.update({"J_induction": perf.J_induction, "se_induction": perf.se_induction,
                          "se_combined": perf.se_combined})
        o.checks.append(_se_check("direct_vs_induction", perf.gap, perf.se_combined))
    return o


def _adjoint(ctx, traj, control):
    from .control import assemble_adjoint
    feats = ctx.features(traj) if ctx.features else None
    return assemble_adjoint(ctx.spec, ctx.ens, traj, control, ctx.aux, ctx.basis, feats)


def _run_check_mp(ctx: _Context, out: Path) -> Outcome:
    from .control import necessary_residual, sufficient_check
    control = ctx.control()
    traj, _ = ctx.forward(control)
    adj = _adjoint(ctx, traj, control)
    res = necessary_residual(ctx.spec, ctx.ens, adj)
    o = Outcome({"residual_sup": res.sup, "residual_sup_se": res.sup_se})
    try:
        mp = sufficient_check(ctx.spec, ctx.ens, adj, u_grid_size=ctx.cfg.numerics["u_grid"],
                              seed=ctx.cfg.numerics["seed"])
        o.summary.update({f"mp_{k}": v for k, v in mp.as_dict().items() if np.isscalar(v)})
        with open(out / "mp_report.yaml", "w") as fh:
            yaml.safe_dump(_plain(mp.as_dict()), fh, sort_keys=True)
    except Exception as exc:  # report rather than abort: the residual is still informative
        o.summary["mp_error"] = f"{type(exc).__name__}: {exc}"
    if ctx.cfg.run.get("assert_optimal"):
        o.checks.append(_se_check("necessary_residual", res.sup, res.sup_se))
    o.series["residual"] = (ctx.ens.grid.nodes[:-1], res.node_mean)
    return o


def _run_improve(ctx: _Context, out: Path) -> Outcome:
    from .control import improve_control
    im = ctx.cfg.run["improve"]
    rep = improve_control(ctx.spec, ctx.ens, ctx.flat() if im.get("from_flat", True) else ctx.control(),
                          float(im["step"]), int(im["iters"]), aux=ctx.aux, basis=ctx.basis,
                          features=ctx.features, sweep=bool(im.get("sweep", False)))
    J = np.asarray(rep.J)
    o = Outcome({"J_initial": float(J[0]), "J_final": float(J[-1]), "iterations": rep.steps,
                 "se_final": float(rep.se[-1])})
    o.checks.append(Check("no_deterioration", J[-1] >= J[0] - 2 * rep.se[0], J[0] - J[-1], 2 * rep.se[0]))
    o.series["J_history"] = (np.arange(J.size), J)
    return o


def _logutil_checks(ctx: _Context, o: Outcome) -> None:
    """Full log-utility pipeline; every cross-check lands in ``o.checks``."""
    from .control import evaluate_performance, improve_control
    from .forward import ControlProcess
    from .logutil import (UtilityCurves, compute_y, recursive_utility, residual_check,
                          simulate_wealth, solve_optimal_control)
    prob, ens, spec, lu = ctx.prob, ctx.ens, ctx.spec, ctx.cfg.run["logutil"]
    r, dt = ens.roots, ens.grid.dt
    o.summary["y_l2_gap"] = ctx.Y.gap(r, dt)
    opt = solve_optimal_control(prob, ens, ctx.Y, scheme=lu["scheme"], basis=None)
    u = opt.control
    W = simulate_wealth(prob, u, ens)
    o.summary["wealth_l2_gap"] = W.l2_gap(r, dt)
    ru = recursive_utility(prob, u, ens, ctx.Y, W)
    o.summary.update({"P0": ru.P0, "P0_direct": ru.direct, "P0_se": ru.se_direct})
    o.checks.append(_se_check("recursive_utility_vs_direct", ru.P0 - ru.direct, np.hypot(ru.se_P0, ru.se_direct)))
    traj, _ = ctx.forward(u)
    perf = evaluate_performance(spec, u, ens, traj, ctx.aux, induction=True)
    o.summary.update({"J_hat": perf.J, "J_hat_se": perf.se, "J_hat_induction": perf.J_induction})
    o.checks.append(_se_check("direct_vs_induction", perf.gap, perf.se_combined))
    adj = _adjoint(ctx, traj, u)
    res = residual_check(spec, ens, opt, traj, adj)
    o.summary.update({"residual_sup": res.sup, "residual_sup_se": res.sup_se})
    o.checks.append(_se_check("necessary_residual", res.sup, res.sup_se))
    o.series["residual"] = (ens.grid.nodes[:-1], res.node_mean)
    for d in lu["deltas"]:
        pd = evaluate_performance(spec, u.scaled(1 + d).project(spec), ens, aux=ctx.aux, induction=False)
        diff = perf.per_root - pd.per_root
        se = float(np.std(diff, ddof=1) / np.sqrt(diff.size))
        o.summary[f"J_gain_delta_{d:+.2f}"] = float(diff.mean())
        if abs(d) >= 0.2 - 1e-12:
            o.checks.append(Check(f"strictly_better_{d:+.2f}", diff.mean() > 0, diff.mean(), 0.0))
        else:
            o.checks.append(Check(f"not_worse_{d:+.2f}", diff.mean() >= -2 * se, -diff.mean(), 2 * se))
    if lu.get("improve_iters", 0):
        er = ens.roots_only()
        Yr = ctx.Y.restrict(r)
        from .logutil import adjoint_features
        target = perf.J
        stop = lambda p: abs(p.J - target) <= 3 * np.hypot(p.se, perf.se)
        flat = ControlProcess.constant(er, 0.5 * sum(prob.u_bounds), u.info)
        rep = improve_control(spec, er, flat, float(lu["step"]), int(lu["improve_iters"]), aux={"Y": Yr.euler},
                              features=adjoint_features(Yr), sweep=False, stop=stop)
        o.summary.update({"improve_iterations": rep.steps, "improve_J_final": rep.J[-1]})
        o.checks.append(_se_check("improve_reaches_J_hat", rep.J[-1] - target, np.hypot(rep.se[-1], perf.se)))
        o.series["J_history"] = (np.arange(len(rep.J)), np.asarray(rep.J))


def _logutil_scaling(ctx: _Context, o: Outcome) -> None:
    """Checks that need a second grid or different curves; run after the core
    objects are released, since the doubled grid holds twice the memory."""
    from .forward import ControlProcess
    from .logutil import UtilityCurves, compute_y, simulate_wealth, solve_optimal_control
    prob, ens, spec = ctx.prob, ctx.ens, ctx.spec
    lu = ctx.cfg.run["logutil"]
    er = ens.roots_only()
    flat0 = lambda t: 0.0 * np.asarray(t, dtype=float)
    p0 = dataclasses.replace(prob, utility=UtilityCurves(tuple(tuple(flat0 for _ in range(3)) for _ in range(3))))
    Y0 = compute_y(p0, er, keep_parts=False)
    u0 = solve_optimal_control(p0, er, Y0, scheme="continuous").control.global_(er)
    err = float(np.max(np.abs(u0 - 1.0 / (1.0 + spec.T - er.grid.nodes)[None, :])))
    o.summary["nu_zero_control_error"] = err
    o.checks.append(Check("nu_zero_closed_form", err <= 1e-12, err, 1e-12, statistical=False))
    if not lu.get("ratio_check"):
        return
    half = ControlProcess.constant(er, 0.5)
    w_coarse = simulate_wealth(prob, half, er).l2_gap(np.arange(er.size), er.grid.dt)
    y_coarse = o.summary["y_l2_gap"]
    ctx.Y = ctx.aux = None
    from .paths import build_grid, simulate_ensemble
    nm = ctx.cfg.numerics
    fine = simulate_ensemble(spec.default_spec, build_grid(spec.T, 2 * ens.grid.M), nm["N_outer"],
                             ens.P_inner, nm["seed"])
    y_fine = compute_y(prob, fine, keep_parts=False).gap(fine.roots, fine.grid.dt)
    fr = fine.roots_only()
    del fine
    w_fine = simulate_wealth(prob, ControlProcess.constant(fr, 0.5), fr).l2_gap(np.arange(fr.size), fr.grid.dt)
    yr, wr = y_coarse / y_fine, w_coarse / w_fine
    o.summary.update({"y_gap_ratio": yr, "wealth_gap_ratio": wr})
    o.checks.append(Check("y_gap_ratio", 1.6 <= yr <= 2.4, yr, 1.6))
    o.checks.append(Check("wealth_gap_ratio", 1.6 <= wr <= 2.4, wr, 1.6))


def _run_logutil(ctx: _Context, out: Path) -> Outcome:
    if ctx.prob is None:
        raise ValidationError("example-logutil needs problem.kind: logutil", "problem.kind")
    o = Outcome()
    _logutil_checks(ctx, o)
    _logutil_scaling(ctx, o)
    return o


def _run_plot_data(ctx: _Context, out: Path) -> Outcome:
    o = Outcome()
    sim = _run_simulate(ctx, out)
    o.series.update(sim.series)
    if ctx.cfg.run.get("bsde"):
        o.series.update(_run_solve_bsde(ctx, out).series)
    imp = _run_improve(ctx, out)
    o.series.update(imp.series)
    mp = _run_check_mp(ctx, out)
    o.series.update(mp.series)
    o.summary = {"series": sorted(o.series)}
    return o


RUNNERS = {"simulate": _run_simulate, "solve-bsde": _run_solve_bsde, "evaluate": _run_evaluate,
           "check-mp": _run_check_mp, "improve": _run_improve, "example-logutil": _run_logutil,
           "plot-data": _run_plot_data}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def manifest(cfg: ExperimentConfig, subcommand: str, threads: int | None) -> dict:
    return {"subcommand": subcommand, "seed": cfg.numerics["seed"], "threads": threads,
            "config": _plain(cfg.echo()), "source": cfg.source,
            "versions": {"mfdefault": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__, "pyyaml": yaml.__version__},
            "started": time.strftime("%Y-%m-%dT%H:%M:%S")}


def run(subcommand: str, cfg: ExperimentConfig, out: Path | None = None, strict: bool = False,
        threads: int | None = None) -> tuple[int, Outcome]:
    """Run one subcommand; returns the exit status and the outcome."""
    if subcommand not in RUNNERS:
        raise ValueError(f"unknown subcommand {subcommand!r}")
    out = Path(out or cfg.run["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.yaml", "w") as fh:
        yaml.safe_dump(manifest(cfg, subcommand, threads), fh, sort_keys=True)
    ctx = _Context(cfg)
    o = RUNNERS[subcommand](ctx, out)
    for name, (x, y) in o.series.items():
        np.savetxt(out / f"{name}.txt", np.column_stack([x, y]), fmt="%.12g")
    failed = [c for c in o.checks if not c.passed and (strict or not c.statistical)]
    warned = [c for c in o.checks if not c.passed and c.statistical and not strict]
    summary = {"subcommand": subcommand, **_plain(o.summary),
               "checks": [c.as_dict() for c in o.checks], "status": "fail" if failed else "ok"}
    with open(out / "summary.yaml", "w") as fh:
        yaml.safe_dump(summary, fh, sort_keys=False)
    for c in warned:
        log.warning("statistical check %s did not pass (%.4g vs %.4g)", c.name, c.value, c.bound)
    if failed:
        report = {"status": "fail", "failed": [c.as_dict() for c in failed]}
        (out / "failures.json").write_text(json.dumps(report, indent=2))
        print(json.dumps(report), file=sys.stderr)
        return 1, o
    return 0, o


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfdefault", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="YAML experiment file")
    ap.add_argument("--seed", type=int, help="override numerics.seed")
    ap.add_argument("--threads", type=int, help="BLAS thread cap")
    ap.add_argument("--out", help="output directory (default run.out)")
    ap.add_argument("--strict", action="store_true", help="statistical warnings become failures")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2 ** 64:
                raise ValidationError("--seed must be an unsigned 64-bit integer", "numerics.seed")
            cfg.numerics["seed"] = int(args.seed)
        status, _ = run(args.subcommand, cfg, args.out, args.strict, args.threads)
    except (ParseError, ValidationError) as exc:
        report = {"status": "error", "error": type(exc).__name__, "message": str(exc),
                  "field": getattr(exc, "field", None), "line": getattr(exc, "line", None)}
        print(json.dumps(report), file=sys.stderr)
        return 2
    return status
