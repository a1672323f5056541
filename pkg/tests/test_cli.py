import json
import subprocess
import sys

import numpy as np
import pytest

from robustcvar.cli import ExperimentConfig, main
from robustcvar.mdp import from_dense, load_mdp, save_mdp
from robustcvar.render import read_pnm

SMALL = {
    "grid": {"rows": 6, "cols": 7, "start": [5, 6], "goal": [5, 0], "obstacle_count": 5, "seed": 1},
    "ambiguity": {"kind": "rn_decision_dependent", "K_max": 2.0, "budget_seed": 3},
    "alpha": 0.48,
    "ygrid": {"n": 11, "y_min": 1e-3},
    "solver": {"epsilon": 1e-6, "max_sweeps": 2000},
    "rollout": {"episodes": 1000, "horizon": 100, "seed": 0, "kernels": 2},
}


def write_config(tmp_path, overrides=None, name="cfg.json"):
    cfg = json.loads(json.dumps(SMALL))
    for key, val in (overrides or {}).items():
        if isinstance(val, dict) and key in cfg:
            cfg[key].update(val)
        else:
            cfg[key] = val
    cfg.setdefault("output_dir", str(tmp_path / "out"))
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return main([str(a) for a in argv])


# -- parsing and exit codes ----------------------------------------------------------


@pytest.mark.parametrize("cmd", [[], ["build-env"], ["reduce"], ["solve"], ["render"], ["evaluate"]])
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main(cmd + ["--help"])
    assert info.value.code == 0
    assert "usage" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["solve", "--bogus"], ["frobnicate"], [], ["reduce", "--alpha", "0.5"]])
def test_usage_errors_exit_64(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 64


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "robustcvar.cli", "reduce", "--alpha", "0.48", "--budget", "2"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "0.24" in proc.stdout


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"alpha": 0.5,,}')
    assert run("build-env", "--config", bad) == 2
    assert run("build-env", "--config", tmp_path / "missing.json") == 2
    assert run("build-env", "--config", write_config(tmp_path, {"alpha": 1.5})) == 2
    assert run("build-env", "--config", write_config(tmp_path, {"colour": 1})) == 2


def test_config_round_trip():
    cfg = ExperimentConfig.from_dict(SMALL)
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


# -- build-env --------------------------------------------------------------------


def test_build_env_default(tmp_path):
    assert run("build-env", "--output-dir", tmp_path) == 0
    m = load_mdp(tmp_path / "mdp.json")
    assert m.n_states == 64 * 53 + 1
    magic, img, maxval = read_pnm(tmp_path / "obstacles.pgm")
    assert magic == "P2" and img.shape == (64, 53) and maxval == 255
    assert np.count_nonzero(img == 0) == 80


def test_build_env_deterministic(tmp_path):
    cfg = write_config(tmp_path)
    assert run("build-env", "--config", cfg, "--output-dir", tmp_path / "a") == 0
    assert run("build-env", "--config", cfg, "--output-dir", tmp_path / "b") == 0
    for f in ("mdp.json", "obstacles.pgm"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert run("build-env", "--config", cfg, "--output-dir", tmp_path / "c", "--seed", 4) == 0
    assert (tmp_path / "a" / "mdp.json").read_bytes() != (tmp_path / "c" / "mdp.json").read_bytes()


def test_build_env_too_many_obstacles(tmp_path, capsys):
    cfg = write_config(tmp_path, {"grid": {"obstacle_count": 41}})
    assert run("build-env", "--config", cfg) == 2
    assert "obstacle_count" in capsys.readouterr().err


# -- reduce ------------------------------------------------------------------------


def test_reduce(capsys):
    assert run("reduce", "--alpha", 0.48, "--budget", 2, "--kind", "rn") == 0
    out = capsys.readouterr().out
    assert "alpha' = 0.24\n" in out and "NCVaR" in out
    assert run("reduce", "--alpha", 0.5, "--budget", 1) == 0
    assert "alpha' = 0.5\n" in capsys.readouterr().out
    assert run("reduce", "--alpha", 0.48, "--budget", 2, "--kind", "kl") == 0
    cap = capsys.readouterr()
    assert "alpha' = 0.113264917522" in cap.out and "EVaR" in cap.out
    assert "0.03" in cap.err
    assert run("reduce", "--alpha", 0.48, "--budget", 0.5) == 2
    assert run("reduce", "--alpha", 0.0, "--budget", 2) == 2


# -- solve / render / evaluate --------------------------------------------------------


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("solved")
    cfg = write_config(tmp)
    assert run("solve", "--config", cfg) == 0
    return cfg, tmp / "out"


def test_solve_outputs(solved):
    cfg, out = solved
    lines = (out / "result.csv").read_text().splitlines()
    assert lines[0] == "state,row,col,y,value,action"
    assert len(lines) == 1 + 43 * 11
    summary = json.loads((out / "summary.json").read_text())
    assert summary["converged"] and summary["residual"] < 1e-6
    assert summary["config"]["alpha"] == 0.48
    assert "wall_time_s" not in summary
    assert json.loads((out / "timing.json").read_text())["wall_time_s"] > 0


def test_solve_deterministic(solved, tmp_path):
    cfg, out = solved
    assert run("solve", "--config", cfg, "--output-dir", tmp_path) == 0
    for f in ("result.csv", "summary.json"):
        assert (out / f).read_bytes() == (tmp_path / f).read_bytes()


def test_summary_independent_of_output_dir(tmp_path):
    base = {"grid": {"rows": 3, "cols": 4, "start": [2, 3], "goal": [2, 0], "obstacle_count": 1}}
    a = write_config(tmp_path, {**base, "output_dir": str(tmp_path / "one")}, name="a.json")
    b = write_config(tmp_path, {**base, "output_dir": str(tmp_path / "two")}, name="b.json")
    assert run("solve", "--config", a) == 0 and run("solve", "--config", b) == 0
    for f in ("result.csv", "summary.json"):
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()


def test_solve_fixed_budget_and_gamma_zero(tmp_path):
    cfg = write_config(tmp_path, {"ambiguity": {"kind": "rn_fixed", "K": 2.0}, "grid": {"gamma": 0.0}})
    assert run("solve", "--config", cfg) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["ygrid"][-1] == 2.0
    assert summary["iterations"] <= 2
    rows = [line.split(",") for line in (tmp_path / "out" / "result.csv").read_text().splitlines()[1:]]
    values = {float(r[4]) for r in rows}
    assert values <= {0.0, 1.0, 40.0}


def test_solve_non_convergence_exit_3(tmp_path):
    cfg = write_config(tmp_path, {"solver": {"max_sweeps": 3}})
    assert run("solve", "--config", cfg) == 3
    assert (tmp_path / "out" / "result.csv").exists()
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["converged"] is False


def test_solve_kl_is_validation_error(tmp_path):
    cfg = write_config(tmp_path, {"ambiguity": {"kind": "kl_fixed", "K": 2.0}})
    assert run("solve", "--config", cfg) == 2


def test_render(solved):
    cfg, out = solved
    assert run("render", "--config", cfg) == 0
    magic, img, maxval = read_pnm(out / "value.pgm")
    assert magic == "P2" and img.shape == (6, 7) and maxval == 255
    assert img.min() == 0 and img.max() == 255
    magic, rgb, _ = read_pnm(out / "path.ppm")
    assert magic == "P3" and rgb.shape == (6, 7, 3)
    path = [tuple(map(int, line.split())) for line in (out / "path.txt").read_text().splitlines()]
    assert path[0] == (5, 6) and path[-1] == (5, 0)
    for r, c in path:
        assert tuple(rgb[r, c]) == (255, 0, 0)


def test_render_needs_solve(tmp_path):
    assert run("render", "--config", write_config(tmp_path)) == 2


def test_render_non_grid_mdp(tmp_path):
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = P[1, 0, 1] = 1.0
    save_mdp(from_dense(P, [[1.0], [0.0]], 0.9, 0), tmp_path / "chain.json")
    cfg = write_config(tmp_path, {"mdp_file": str(tmp_path / "chain.json"), "ambiguity": {"kind": "none"}})
    assert run("solve", "--config", cfg) == 0
    assert run("render", "--config", cfg) == 2


def test_evaluate(solved):
    cfg, out = solved
    assert run("evaluate", "--config", cfg) == 0
    doc = json.loads((out / "rollout.json").read_text())
    assert doc["nominal"]["kernel_descriptor"] == "nominal"
    assert doc["adversarial"]["kernel_descriptor"] == "adversarial"
    assert len(doc["sampled"]) == 2
    assert doc["adversary_dominance"]["ok"]
    assert doc["truncation_bound"] == pytest.approx(0.95**100 * 40 / 0.05)
    assert doc["nominal"]["n_episodes"] == 1000


def test_evaluate_risk_neutral_consistency(tmp_path):
    cfg = write_config(
        tmp_path,
        {"alpha": 1.0, "ambiguity": {"kind": "none"}, "rollout": {"episodes": 10000, "horizon": 400, "kernels": 0}},
    )
    assert run("solve", "--config", cfg) == 0
    assert run("evaluate", "--config", cfg) == 0
    doc = json.loads((tmp_path / "out" / "rollout.json").read_text())
    nom = doc["nominal"]
    assert abs(nom["empirical_mean"] - doc["value_at_start"]) <= 3 * nom["standard_error"]


def test_evaluate_zero_episodes(solved, tmp_path):
    cfg = write_config(tmp_path, {"rollout": {"episodes": 0}, "output_dir": str(solved[1])})
    assert run("evaluate", "--config", cfg) == 2
