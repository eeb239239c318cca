import json
import pickle
import textwrap

import numpy as np
import pytest

from randblowup.cli import (EXIT_CONFIG, EXIT_OK, EXIT_RUN, MissingArtifactError, TABLE_FILE, TAILS_FILE,
                            load_profiles, main, prepare_a0, table_hash)
from randblowup.config import ConfigError, RunConfig, load_config, parse_config, with_overrides
from randblowup.evolve import TOWNES_MASS
from randblowup.spectral import make_grid


def test_defaults_roundtrip():
    cfg = RunConfig()
    back = parse_config(cfg.to_yaml())
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()


def test_partial_config_fills_defaults():
    cfg = parse_config("grid:\n  n: 128\ndata:\n  spec:\n    K_max: 8\n")
    assert cfg.grid.n == 128 and cfg.grid.L == RunConfig().grid.L
    assert cfg.data.spec.K_max == 8 and cfg.data.lambda0 == 0.5


@pytest.mark.parametrize("text,line,fragment", [
    ("grid:\n  n: 64\n  bogus: 1\n", 3, "unknown key"),
    ("profile:\n  b0: 0.1\n  eta: fast\n", 3, "expected a number"),
    ("data:\n  lambda0: 0.5\n  alpha: -1.0\n", 3, "non-negative"),
    ("grid:\n  n: 100\n", 2, "power of two"),
    ("grid: [1, 2\n", 2, "YAML syntax"),
])
def test_line_diagnostics(text, line, fragment):
    with pytest.raises(ConfigError) as ei:
        parse_config(text)
    assert ei.value.line == line
    assert fragment in str(ei.value) and f"line {line}" in str(ei.value)


def test_overrides_and_regime():
    cfg = with_overrides(RunConfig(), seed=2**64 - 1, override_desk_scale=True, out="x")
    assert cfg.data.seed == 2**64 - 1 and cfg.data.desk_scale_override and cfg.outputs.dir == "x"
    with pytest.raises(ConfigError):
        with_overrides(RunConfig(), seed=-1)
    rc = RunConfig().regime_check()
    assert not rc["holds"] and rc["log_bound"] < -1e5


def test_alpha_star():
    assert RunConfig().alpha_star == pytest.approx(0.2 * TOWNES_MASS)


def small_config(tmp_path, extra=""):
    text = textwrap.dedent(f"""\
        grid:
          n: 128
          L: 6.0
        solver:
          t_max: 0.004
          snapshot_stride: 2
        data:
          alpha: 0.0
          spec:
            K_max: 6
        ensemble:
          n_samples: 12
          n_times: 8
          grid_n: 32
          grid_L: 4.0
        outputs:
          dir: {tmp_path / "runs"}
        """) + extra
    path = tmp_path / "cfg.yaml"
    path.write_text(text)
    return path


@pytest.fixture
def profiles_root(tmp_path, table, tails):
    d = tmp_path / "runs" / "profiles"
    d.mkdir(parents=True)
    with open(d / TABLE_FILE, "wb") as fh:
        pickle.dump(table, fh)
    with open(d / TAILS_FILE, "wb") as fh:
        pickle.dump(tails, fh)
    return tmp_path


def test_prepare_a0_orthogonality(table):
    cfg = parse_config("data:\n  eps0:\n    kind: gaussian-bump\n    amplitude: 0.01\n    width: 1.5\n")
    grid = make_grid(256, 12.0)
    a0, rep = prepare_a0(cfg, table, grid)
    assert max(abs(v) for v in rep["pairings_before_rescale"]) < 1e-10
    assert rep["eps0_l2"] > 0
    assert a0.norm() ** 2 == pytest.approx(1.05 * TOWNES_MASS, rel=1e-12)
    assert rep["mass_excess_in_window"]
    zero, rep0 = prepare_a0(parse_config("data:\n  mass_ratio: null\n"), table, grid)
    assert rep0["orthogonality_holds"] and rep0["mass_scale"] == 1.0 and rep0["eps0_l2"] == 0.0


def test_missing_config_and_bad_config(tmp_path, capsys):
    assert main(["validate", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG
    bad = tmp_path / "bad.yaml"
    bad.write_text("grid:\n  n: 64\n  what: 1\n")
    assert main(["validate", "--config", str(bad)]) == EXIT_CONFIG
    assert "line 3" in capsys.readouterr().err
    assert load_config(small_config(tmp_path)).grid.n == 128


def test_simulate_requires_override_and_profiles(tmp_path, capsys):
    cfg = small_config(tmp_path)
    assert main(["simulate", "--config", str(cfg)]) == EXIT_CONFIG
    assert "override-desk-scale" in capsys.readouterr().err
    assert main(["simulate", "--config", str(cfg), "--override-desk-scale"]) == EXIT_RUN
    assert "profiles" in capsys.readouterr().err
    with pytest.raises(MissingArtifactError):
        load_profiles(load_config(cfg))


def test_simulate_deterministic_and_analyze(profiles_root, capsys):
    cfg = small_config(profiles_root)
    args = ["simulate", "--config", str(cfg), "--override-desk-scale"]
    assert main(args) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    run = profiles_root / "runs" / out["dir"].split("/")[-1]
    first = (run / "conserved.csv").read_text()
    assert out["event"] == "completed" and out["steps"] > 1
    man = json.loads((run / "manifest.json").read_text())
    assert man["profile_hash"] and man["seed"] == 0 and man["a0_report"]["mass_excess_in_window"]
    assert (run / "series.csv").exists() and (run / "imethod.json").exists()
    assert main(args) == EXIT_OK
    capsys.readouterr()
    assert (run / "conserved.csv").read_text() == first
    assert main(["analyze", "--run", str(run)]) == EXIT_OK
    assert json.loads((run / "analysis.json").read_text())["event"] == man["event"]


def test_simulate_random_data_depends_on_seed(profiles_root, capsys):
    cfg = small_config(profiles_root, "")
    text = cfg.read_text().replace("alpha: 0.0", "alpha: 0.05")
    cfg.write_text(text)
    dirs = []
    for seed in ("1", "2"):
        assert main(["simulate", "--config", str(cfg), "--override-desk-scale", "--seed", seed]) == EXIT_OK
        dirs.append(json.loads(capsys.readouterr().out)["dir"])
    a, b = [np.loadtxt(d + "/conserved.csv", delimiter=",", skiprows=1) for d in dirs]
    assert dirs[0] != dirs[1] and not np.array_equal(a[:, 4], b[:, 4])
    assert a.shape[1] == 8  # forced runs add M_a and dM_a/dt


def test_ensemble_command(tmp_path, capsys):
    assert main(["ensemble", "--config", str(small_config(tmp_path)), "--threads", "2"]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["stats"]["l2sq"]["n"] == 12
    assert (tmp_path / "runs" / res["dir"].split("/")[-1] / "summary.json").exists()


def test_validate_command(profiles_root, table, capsys):
    assert main(["validate", "--config", str(small_config(profiles_root))]) == EXIT_OK
    printed = json.loads(capsys.readouterr().out.split("\n}\n")[0] + "\n}")
    assert not printed["fail"] and "decompose_recover_error" in printed["pass"]
    d = next((profiles_root / "runs").glob("validate_*"))
    assert json.loads((d / "validate.json").read_text())["profile_hash"] == table_hash(table)


def test_threads_must_be_positive(tmp_path):
    assert main(["validate", "--config", str(small_config(tmp_path)), "--threads", "0"]) == EXIT_CONFIG
