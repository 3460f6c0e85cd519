import json

import numpy as np
import pandas as pd
import pytest

import src.cli as cli
from src.cli import EXIT_CONFIG, EXIT_MONOTONICITY, EXIT_OK, EXIT_VALIDATION, check_monotone, main
from src.errors import ConfigError
from src.run_config import config_hash, load_config, loads


def _read_table(path):
    lines = path.read_text().splitlines()
    header = dict(line[2:].split("=", 1) for line in lines if line.startswith("# "))
    frame = pd.read_csv(path, comment="#")
    return header, frame


@pytest.fixture
def small_config(tmp_path, config_path):
    """Writes the three-regime config with a short horizon and tmp output paths, plus optional edits."""
    def factory(name="run.json", **edits):
        with open(config_path) as fh:
            data = json.load(fh)
        data["numerics"].update({"horizon": 0.2, "dt": 0.01, "y_max": 1.0, "y_step": 0.1, "n_paths": 2000,
                                 "eps": 0.02, "residual_times": [0.05, 0.1]})
        data["output"] = {k: str(tmp_path / f"{k}.csv") for k in ("psi", "sweep", "oracle", "residual")}
        for key, value in edits.items():
            data[key] = value
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return str(path)
    return factory


@pytest.fixture
def frozen_config(small_config, make_market_block):
    return small_config(
        "frozen.json",
        market=make_market_block([0.05], [0.12], [0.25]),
        chains=[{"family": "frozen"}],
        numerics={"horizon": 0.2, "dt": 0.01, "y_max": 1.0, "y_step": 0.1, "seed": 3,
                  "probes": [{"x": [0], "y": [0.0]}, {"x": [0], "y": [0.5]}]},
    )


class TestValidate:

    def test_shipped_config_passes(self, config_path):
        assert main(["validate", "--config", config_path]) == EXIT_OK

    def test_reducible_jump_matrix_fails(self, small_config, capsys):
        chain = {"family": "erlang-2", "p": [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.5, 0.0]]}
        path = small_config(chains=[chain])
        assert main(["validate", "--config", path]) == EXIT_VALIDATION
        out = capsys.readouterr().out
        assert "A4_irreducible" in out

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"market": {"theta": 1.0,}\n')
        assert main(["validate", "--config", str(path)]) == EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert main(["validate", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as info:
            main(["calibrate", "--config", "x.json"])
        assert info.value.code == 2


class TestConfig:

    def test_parse_error_position(self):
        with pytest.raises(ConfigError) as info:
            loads('{\n  "market": ,\n}')
        assert info.value.line == 2
        assert info.value.column == 13

    def test_unknown_numerics_key(self, config_path):
        with open(config_path) as fh:
            data = json.load(fh)
        data["numerics"]["dtt"] = 0.1
        with pytest.raises(ConfigError, match="dtt"):
            loads(json.dumps(data))

    def test_unknown_family(self, config_path):
        with open(config_path) as fh:
            data = json.load(fh)
        data["chains"][0]["family"] = "weibull"
        with pytest.raises(ConfigError, match="weibull"):
            loads(json.dumps(data))

    def test_config_hash_is_stable(self, config_path):
        a, b = load_config(config_path), load_config(config_path)
        assert config_hash(a) == config_hash(b)
        assert config_hash(a.with_overrides(dt=0.001)) != config_hash(a)
        assert a.with_overrides(dt=None) is a

    def test_probes_and_age_grid(self, config_path):
        cfg = load_config(config_path)
        assert len(cfg.probes) == 6
        assert cfg.probes[3] == ((0,), (0.5,))
        grid = cfg.numerics.age_grid("reduced")
        assert grid.size == 11 and grid[-1] == pytest.approx(1.0)
        assert cfg.numerics.age_grid("general") == pytest.approx(1.0)


def test_solve_writes_headed_csv(small_config, tmp_path, capsys):
    path = small_config()
    assert main(["solve", "--config", path]) == EXIT_OK
    header, frame = _read_table(tmp_path / "psi.csv")
    assert header["config_hash"] == config_hash(load_config(path))
    assert header["seed"] == "20240601" and "version" in header
    assert list(frame.columns) == ["m", "t", "state", "y", "psi"]
    assert len(frame) == 21 * 3 * 11
    assert np.all(frame.loc[frame["m"] == 0, "psi"] == 1.0)
    top = frame[(frame["m"] == frame["m"].max()) & (frame["state"] == 0) & (frame["y"] == 0.0)]
    assert len(top) == 1
    assert float(header["phi"]) == pytest.approx(-2.0 * np.log(top["psi"].iloc[0]), rel=1e-12)
    assert "phi(v=1" in capsys.readouterr().out


def test_solve_zero_horizon(small_config, tmp_path):
    path = small_config(numerics={"horizon": 0.0, "dt": 0.01})
    assert main(["solve", "--config", path]) == EXIT_OK
    _, frame = _read_table(tmp_path / "psi.csv")
    assert set(frame["m"]) == {0}
    assert np.all(frame["psi"] == 1.0)


def test_solve_general_mode(small_config, tmp_path):
    path = small_config(numerics={"horizon": 0.1, "dt": 0.01, "y_max": 0.2})
    out = tmp_path / "general.csv"
    assert main(["solve", "--config", path, "--mode", "general", "--out", str(out)]) == EXIT_OK
    _, frame = _read_table(out)
    assert set(frame["m"]) == set(range(11))


def test_dt_override_changes_grid(small_config, tmp_path):
    path = small_config()
    assert main(["solve", "--config", path, "--dt", "0.02"]) == EXIT_OK
    _, frame = _read_table(tmp_path / "psi.csv")
    assert frame["m"].max() == 10


def test_oracle_on_frozen_chain(frozen_config, tmp_path):
    assert main(["oracle", "--config", frozen_config, "--paths", "500"]) == EXIT_OK
    header, frame = _read_table(tmp_path / "oracle.csv")
    assert list(frame.columns) == ["point", "psi_solver", "psi_mc", "se", "z"]
    assert np.all(frame["se"] == 0.0) and np.all(frame["z"] == 0.0)
    assert frame["psi_mc"].to_numpy() == pytest.approx(frame["psi_solver"].to_numpy(), rel=1e-12)


def test_residual_table(small_config, tmp_path):
    path = small_config()
    assert main(["residual", "--config", path]) == EXIT_OK
    header, frame = _read_table(tmp_path / "residual.csv")
    assert list(frame.columns) == ["t", "point", "residual"]
    assert len(frame) == 2 * 6
    assert float(header["eps"]) == pytest.approx(0.02)
    assert np.all(np.isfinite(frame["residual"]))


def test_sweep_over_wealth_is_log_shift(small_config, tmp_path):
    path = small_config()
    assert main(["sweep", "--config", path, "--axis", "v"]) == EXIT_OK
    _, frame = _read_table(tmp_path / "sweep.csv")
    assert list(frame.columns) == ["axis", "value", "phi"]
    assert np.allclose(np.diff(frame["phi"]), np.diff(np.log(frame["value"])), atol=1e-12)


@pytest.mark.slow
@pytest.mark.parametrize("axis", ["T", "theta"])
def test_sweep_trends(small_config, tmp_path, axis):
    path = small_config()
    assert main(["sweep", "--config", path, "--axis", axis]) == EXIT_OK
    _, frame = _read_table(tmp_path / "sweep.csv")
    steps = np.diff(frame["phi"])
    assert np.all(steps > 0) if axis == "T" else np.all(steps < 0)


def test_check_monotone():
    assert check_monotone("v", [0.1, 0.2, 0.3]) == []
    assert check_monotone("theta", [0.3, 0.2, 0.25]) == [1]
    assert check_monotone("T", [0.1, 0.1]) == [0]


def test_sweep_reports_monotonicity_violation(small_config, monkeypatch):
    path = small_config()
    monkeypatch.setitem(cli.MONOTONE_DIRECTION, "v", -1)
    assert main(["sweep", "--config", path, "--axis", "v"]) == EXIT_MONOTONICITY
