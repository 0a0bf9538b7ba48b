import json
import os

import numpy as np
import pytest

from splitkit import make_affine_instance, save_instance
from splitkit.cli import (ConfigError, EXIT_CONFIG, EXIT_NOT_CONVERGED,
                          EXIT_OK, build_problem, main, parse_config)

AFFINE_CFG = """\
[problem]
kind = affine
dim = 10
seed = 1
skew_fraction = 0.8

[run]
methods = BFoRB
lambda_fraction = 0.9
max_iters = 20000
tol = 1e-10
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


# ------------------------------------------------------------------ parsing

def test_parse_minimal_config():
    cfg = parse_config(AFFINE_CFG)
    assert cfg.problem_kind == "affine"
    assert cfg.problem_params == {"dim": 10, "seed": 1, "skew_fraction": 0.8}
    assert [m.value for m in cfg.methods] == ["BFoRB"]
    assert cfg.lam_policy == "fraction" and cfg.lam_value == 0.9
    assert cfg.tol == 1e-10 and cfg.max_iters == 20000
    assert not cfg.certify


def test_parse_unknown_key_reports_line():
    bad = AFFINE_CFG + "frobnicate = 3\n"
    with pytest.raises(ConfigError) as exc:
        parse_config(bad)
    (line, msg), = exc.value.errors
    assert "frobnicate" in msg
    assert line == len(bad.splitlines())


def test_parse_unknown_section_and_method():
    with pytest.raises(ConfigError) as exc:
        parse_config(AFFINE_CFG.replace("[run]", "[rust]"))
    assert any("unknown section" in msg for _, msg in exc.value.errors)
    with pytest.raises(ConfigError) as exc:
        parse_config(AFFINE_CFG.replace("BFoRB", "Bforb"))
    assert any("unknown method" in msg for _, msg in exc.value.errors)


def test_parse_frdr_requires_gamma():
    cfg_text = AFFINE_CFG.replace("methods = BFoRB", "methods = FRDR") \
                         .replace("lambda_fraction = 0.9", "lambda = 0.01")
    with pytest.raises(ConfigError) as exc:
        parse_config(cfg_text)
    assert any("gamma" in msg for _, msg in exc.value.errors)
    parse_config(cfg_text + "gamma = 0.05\n")           # now fine


def test_parse_lambda_policy_exclusive():
    with pytest.raises(ConfigError):
        parse_config(AFFINE_CFG + "lambda = 0.1\n")
    with pytest.raises(ConfigError):
        parse_config(AFFINE_CFG.replace("lambda_fraction = 0.9\n", ""))


def test_parse_fraction_rejected_for_unbounded_methods():
    with pytest.raises(ConfigError) as exc:
        parse_config(AFFINE_CFG.replace("methods = BFoRB", "methods = FB"))
    assert any("lambda_fraction" in msg for _, msg in exc.value.errors)


def test_parse_beyond_bound_warns_at_run_time(tmp_path):
    # an absolute stepsize beyond 1/(8L) parses fine; the run records a warning
    cfg_text = AFFINE_CFG.replace("lambda_fraction = 0.9", "lambda = 10.0") \
                         .replace("max_iters = 20000", "max_iters = 5")
    parse_config(cfg_text)
    cfg = write(tmp_path, "exp.cfg", cfg_text)
    out = str(tmp_path / "o")
    main(["run", "--config", cfg, "--out", out, "--quiet"])
    summary_file, = [f for f in os.listdir(out) if f.endswith("__summary.json")]
    summary = json.loads((tmp_path / "o" / summary_file).read_text())
    assert any("outside the guaranteed interval" in w
               for w in summary["warnings"])


def test_parse_ode_block():
    cfg = parse_config(AFFINE_CFG + "\n[ode]\nlambda = 0.1\nh_ode = 0.01\n"
                                    "T = 5.0\nflow = ppa\n")
    assert cfg.ode == {"lambda": 0.1, "h_ode": 0.01, "T": 5.0, "flow": "ppa"}
    with pytest.raises(ConfigError):
        parse_config(AFFINE_CFG + "\n[ode]\nlambda = 0.1\n")


def test_build_problem_ids():
    cfg = parse_config(AFFINE_CFG)
    pid, problem, inst = build_problem(cfg)
    assert pid == "affine-d10-s1"
    assert problem.dim == 10
    pid2, _, _ = build_problem(cfg, seed_override=7)
    assert pid2 == "affine-d10-s7"


# ---------------------------------------------------------------- run verb

def test_run_writes_artifacts_and_converges(tmp_path):
    cfg = write(tmp_path, "exp.cfg", AFFINE_CFG)
    out = str(tmp_path / "out")
    assert main(["run", "--config", cfg, "--out", out, "--quiet"]) == EXIT_OK
    files = sorted(os.listdir(out))
    assert any(f.endswith(".csv") for f in files)
    summary_file, = [f for f in files if f.endswith("__summary.json")]
    summary = json.loads((tmp_path / "out" / summary_file).read_text())
    assert summary["status"] == "converged"
    assert summary["terminal_residual"] <= 1e-8
    assert summary["forward_evals"] == summary["iterations"] + 1


def test_run_trace_csv_round_trips_floats(tmp_path):
    cfg = write(tmp_path, "exp.cfg", AFFINE_CFG)
    out = str(tmp_path / "out")
    main(["run", "--config", cfg, "--out", out, "--quiet"])
    csv_file, = [f for f in os.listdir(out) if f.endswith(".csv")]
    lines = (tmp_path / "out" / csv_file).read_text().splitlines()
    assert lines[0] == "k,step_norm,omega_residual,dist_to_xstar"
    row = lines[1].split(",")
    assert int(row[0]) == 0
    assert np.isfinite(float(row[1]))


def test_run_zero_problem_exits_ok(tmp_path):
    inst = make_affine_instance(4, 1, 0.0)
    # zero out everything: the instance file route covers hand-built problems
    for name in ("M_A", "M_B", "M_C"):
        setattr(inst, name, np.zeros((4, 4)))
    for name in ("b_A", "b_B", "b_C", "x_star"):
        setattr(inst, name, np.zeros(4))
    inst.L = 0.0
    path = tmp_path / "zero.inst"
    save_instance(inst, path)
    cfg = write(tmp_path, "exp.cfg", f"""\
[problem]
kind = file
path = {path}

[run]
methods = BFoRB
lambda = 0.5
max_iters = 50
tol = 1e-12
""")
    out = str(tmp_path / "out")
    assert main(["run", "--config", cfg, "--out", out, "--quiet"]) == EXIT_OK
    summary_file, = [f for f in os.listdir(out) if f.endswith("__summary.json")]
    summary = json.loads((tmp_path / "out" / summary_file).read_text())
    assert summary["iterations"] == 1


def test_run_divergent_fb_exits_2(tmp_path):
    cfg = write(tmp_path, "exp.cfg", """\
[problem]
kind = saddle
m = 4
n = 6
seed = 2
alpha = 0
radius = 1.0

[run]
methods = FB
lambda = 0.2
max_iters = 2000
tol = 1e-12
""")
    out = str(tmp_path / "out")
    assert main(["run", "--config", cfg, "--out", out,
                 "--quiet"]) == EXIT_NOT_CONVERGED


def test_run_missing_gamma_exits_1(tmp_path):
    cfg = write(tmp_path, "exp.cfg", AFFINE_CFG.replace(
        "methods = BFoRB", "methods = FRDR"))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o"),
                 "--quiet"]) == EXIT_CONFIG


def test_run_missing_config_exits_3(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.cfg"),
                 "--quiet"]) == 3


def test_run_byte_identical_reruns(tmp_path):
    cfg_text = AFFINE_CFG.replace("methods = BFoRB",
                                  "methods = BFoRB, BRFoB")
    cfg = write(tmp_path, "exp.cfg", cfg_text + "certify = true\n")
    out1, out2 = str(tmp_path / "o1"), str(tmp_path / "o2")
    assert main(["run", "--config", cfg, "--out", out1, "--quiet"]) == EXIT_OK
    assert main(["run", "--config", cfg, "--out", out2, "--quiet"]) == EXIT_OK
    files1, files2 = sorted(os.listdir(out1)), sorted(os.listdir(out2))
    assert files1 == files2 and len(files1) >= 4
    for f in files1:
        b1 = (tmp_path / "o1" / f).read_bytes()
        b2 = (tmp_path / "o2" / f).read_bytes()
        assert b1 == b2, f


def test_run_threaded_matches_serial(tmp_path, monkeypatch):
    cfg = write(tmp_path, "exp.cfg",
                AFFINE_CFG.replace("methods = BFoRB",
                                   "methods = BFoRB, BRFoB, FoRB"))
    out1, out2 = str(tmp_path / "serial"), str(tmp_path / "threaded")
    main(["run", "--config", cfg, "--out", out1, "--quiet"])
    monkeypatch.setenv("SPLITKIT_THREADS", "3")
    main(["run", "--config", cfg, "--out", out2, "--quiet"])
    for f in sorted(os.listdir(out1)):
        assert (tmp_path / "serial" / f).read_bytes() == \
            (tmp_path / "threaded" / f).read_bytes()


def test_run_seed_override_changes_artifacts(tmp_path):
    cfg = write(tmp_path, "exp.cfg", AFFINE_CFG)
    out = str(tmp_path / "o")
    main(["run", "--config", cfg, "--out", out, "--quiet",
          "--seed-override", "5"])
    assert any("affine-d10-s5" in f for f in os.listdir(out))


# --------------------------------------------------------------- sweep verb

def test_sweep_writes_table(tmp_path):
    cfg = write(tmp_path, "exp.cfg", AFFINE_CFG.replace(
        "lambda_fraction = 0.9", "lambda_fraction = 0.5"))
    out = str(tmp_path / "o")
    assert main(["sweep", "--config", cfg, "--out", out, "--quiet",
                 "--grid", "0.5,0.9"]) == EXIT_OK
    table = (tmp_path / "o" / "affine-d10-s1__sweep.csv").read_text()
    lines = table.splitlines()
    assert lines[0].startswith("method,fraction,lambda,status")
    assert len(lines) == 3
    assert all(",converged," in ln for ln in lines[1:])


def test_sweep_far_beyond_bound_is_observational(tmp_path):
    # fraction 80 of 1/(8L) is lambda = 10/L: no guarantee, only a marker
    cfg = write(tmp_path, "exp.cfg", AFFINE_CFG)
    out = str(tmp_path / "o")
    code = main(["sweep", "--config", cfg, "--out", out, "--quiet",
                 "--grid", "80"])
    table = (tmp_path / "o" / "affine-d10-s1__sweep.csv").read_text()
    row = table.splitlines()[1]
    status = row.split(",")[3]
    if status == "converged":
        assert code == EXIT_OK
    else:
        assert code == EXIT_NOT_CONVERGED
        assert status in ("diverged", "max_iters")


def test_sweep_empty_grid_errors(tmp_path):
    cfg = write(tmp_path, "exp.cfg", AFFINE_CFG)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "o"),
                 "--quiet", "--grid", ""]) == EXIT_CONFIG


# ------------------------------------------------------------- certify verb

def test_certify_affine_ok(tmp_path):
    cfg = write(tmp_path, "exp.cfg", """\
[problem]
kind = affine
dim = 20
seed = 5
skew_fraction = 0.8

[run]
methods = BFoRB, BRFoB
lambda_fraction = 0.9
max_iters = 2000
tol = 1e-11
""")
    out = str(tmp_path / "o")
    assert main(["certify", "--config", cfg, "--out", out,
                 "--quiet"]) == EXIT_OK
    reports = [f for f in os.listdir(out) if f.endswith("__certificate.json")]
    assert len(reports) == 2
    for f in reports:
        payload = json.loads((tmp_path / "o" / f).read_text())
        assert payload["lemma_ok"] and payload["descent_ok"]
        assert payload["min_lemma_slack"] >= -payload["lemma_tol"]
    series = [f for f in os.listdir(out) if f.endswith("__certificate.csv")]
    assert len(series) == 2


def test_certify_saddle_exits_1(tmp_path):
    cfg = write(tmp_path, "exp.cfg", """\
[problem]
kind = saddle
m = 4
n = 6
seed = 2
alpha = 0.5
radius = 1.0

[run]
methods = BFoRB
lambda_fraction = 0.9
max_iters = 100
tol = 1e-10
""")
    assert main(["certify", "--config", cfg, "--out", str(tmp_path / "o"),
                 "--quiet"]) == EXIT_CONFIG


# ---------------------------------------------------------------- flow verb

def test_flow_writes_trajectory(tmp_path):
    cfg = write(tmp_path, "exp.cfg", AFFINE_CFG + """
[ode]
lambda = 0.1
h_ode = 0.1
T = 20.0
""")
    out = str(tmp_path / "o")
    assert main(["flow", "--config", cfg, "--out", out, "--quiet"]) == EXIT_OK
    traj = (tmp_path / "o" / "affine-d10-s1__dr-flow.csv").read_text()
    lines = traj.splitlines()
    assert lines[0] == "t,step_norm,omega_residual,dist_to_xstar"
    assert len(lines) == 202                     # header + 201 samples
    last = lines[-1].split(",")
    assert float(last[0]) == pytest.approx(20.0)


def test_flow_requires_ode_block(tmp_path):
    cfg = write(tmp_path, "exp.cfg", AFFINE_CFG)
    assert main(["flow", "--config", cfg, "--out", str(tmp_path / "o"),
                 "--quiet"]) == EXIT_CONFIG
