import json

import numpy as np
import pytest
import yaml

from mfdefault import cli
from mfdefault.cli import Check, Outcome, ParseError, ValidationError, load_config, main, parse_config

from conftest import CONFIGS

MINIMAL = "problem: {T: 1.0, x0: 2.0}\nnumerics: {M: 8, N_outer: 200, seed: 3}\n"


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_config_valid():
    cfg = load_config(MINIMAL)
    spec = cfg.built["spec"]
    assert spec.n == 0 and spec.T == 1.0 and spec.x0 == 2.0
    assert cfg.numerics["P_inner"] == 0 and cfg.numerics["basis_degree"] == 2


def test_missing_horizon():
    with pytest.raises(ValidationError) as err:
        load_config("problem: {x0: 1.0}\n")
    assert err.value.field == "problem.T"


def test_malformed_yaml_reports_line():
    with pytest.raises(ParseError) as err:
        load_config("problem:\n  T: [1.0\n  x0: 1\n")
    assert err.value.line is not None


def test_unknown_section():
    with pytest.raises(ParseError):
        load_config(MINIMAL + "extra: 1\n")


def test_missing_file(tmp_path):
    with pytest.raises(ParseError):
        parse_config(tmp_path / "nope.yaml")


def test_bad_numerics():
    with pytest.raises(ValidationError) as err:
        load_config("problem: {T: 1.0, x0: 1.0}\nnumerics: {M: 0}\n")
    assert err.value.field == "numerics.M"


def test_invalid_model_lists_violations():
    text = "problem: {T: 1.0, x0: 1.0, gamma: [-0.5]}\n"
    with pytest.raises(ValidationError) as err:
        load_config(text)
    assert "NegativeIntensity" in [name for name, _ in err.value.violations]


@pytest.mark.parametrize("name", ["logutil.yaml", "lq_jump.yaml", "martingale_bsde.yaml"])
def test_packaged_configs_parse(name):
    cfg = parse_config(CONFIGS / name)
    assert "spec" in cfg.built


def test_section5_config():
    cfg = parse_config(CONFIGS / "logutil.yaml")
    prob = cfg.built["logutil"]
    assert prob.T == 1.0 and cfg.numerics["M"] == 64 and cfg.numerics["N_outer"] == 10000
    assert cfg.built["spec"].n == 2


def test_evaluate_zero_dynamics(tmp_path):
    cfg = load_config("problem: {T: 1.0, x0: 2.0, g: {x: 1}}\nnumerics: {M: 8, N_outer: 200}\n")
    status, o = cli.run("evaluate", cfg, tmp_path / "out")
    assert status == 0
    assert o.summary["J"] == pytest.approx(2.0, abs=1e-12)
    summary = yaml.safe_load((tmp_path / "out" / "summary.yaml").read_text())
    assert summary["status"] == "ok" and summary["J"] == pytest.approx(2.0)
    man = yaml.safe_load((tmp_path / "out" / "manifest.yaml").read_text())
    assert man["subcommand"] == "evaluate" and "numpy" in man["versions"]


def test_solve_bsde_brownian_terminal(tmp_path):
    cfg = load_config("problem: {T: 1.0, x0: 0.0}\nnumerics: {M: 16, N_outer: 20000, seed: 5}\n"
                      "run: {bsde: {zeta: brownian}}\n")
    status, o = cli.run("solve-bsde", cfg, tmp_path)
    assert status == 0
    assert abs(o.summary["p0"]) <= 3 * o.summary["se_p0"]
    assert o.summary["mean_q0"] == pytest.approx(1.0, abs=0.05)
    assert (tmp_path / "bsde.txt").exists() and (tmp_path / "bsde_contraction.txt").exists()


def test_reproducible(tmp_path):
    path = write(tmp_path, "problem: {T: 1.0, x0: 1.0, gamma: [0.5], g: {x: 1},\n"
                           "  regimes: [{sigma: {x: 0.2}, h: {x: 0.1}}, {sigma: {x: 0.2}}]}\n"
                           "numerics: {M: 8, N_outer: 300, P_inner: 2, seed: 9}\nrun: {control: 0.0}\n")
    outs = []
    for d in ("a", "b"):
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path / d)]) == 0
        outs.append((tmp_path / d / "trajectory.txt").read_text())
    assert outs[0] == outs[1]
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "c"), "--seed", "10"]) == 0
    assert (tmp_path / "c" / "trajectory.txt").read_text() != outs[0]


def test_error_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, "problem: {x0: 1.0}\n")
    assert main(["evaluate", "--config", str(bad)]) == 2
    report = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert report["error"] == "ValidationError" and report["field"] == "problem.T"
    assert main(["evaluate", "--config", str(tmp_path / "missing.yaml")]) == 2
    good = write(tmp_path, MINIMAL, "good.yaml")
    assert main(["evaluate", "--config", str(good), "--seed", "-1"]) == 2


def test_bsde_not_converged_fails(tmp_path):
    cfg = load_config("problem: {T: 1.0, x0: 0.0}\nnumerics: {M: 8, N_outer: 500, max_iter: 1, tol: 1e-12}\n"
                      "run: {bsde: {zeta: brownian, driver: {mp: 0.5}}}\n")
    status, _ = cli.run("solve-bsde", cfg, tmp_path)
    assert status == 1
    report = json.loads((tmp_path / "failures.json").read_text())
    assert report["failed"][0]["name"] == "picard_converged"


def test_strict_promotes_statistical_checks(tmp_path, monkeypatch):
    def fake(ctx, out):
        return Outcome({"x": 1.0}, [Check("noisy", False, 4.0, 3.0)])
    monkeypatch.setitem(cli.RUNNERS, "evaluate", fake)
    cfg = load_config(MINIMAL)
    status, _ = cli.run("evaluate", cfg, tmp_path / "lax")
    assert status == 0 and not (tmp_path / "lax" / "failures.json").exists()
    summary = yaml.safe_load((tmp_path / "lax" / "summary.yaml").read_text())
    assert summary["checks"][0]["passed"] is False
    status, _ = cli.run("evaluate", cfg, tmp_path / "strict", strict=True)
    assert status == 1 and (tmp_path / "strict" / "failures.json").exists()
