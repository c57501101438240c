"""The metacog command line: exit codes and output bundles."""
import json
import os

import pytest

from metacog_rl.cli import main
from metacog_rl.common.utils import read_csv


SMALL = """
[vehicle]
v_T = 16.0

[scenario]
seed = 0
horizon = 3.0
dt = 0.01
setpoints = [0.0, 0.5]
switch_time = 1.0
switch_duration = 1.0
change_time = 1.5
delta_v = 8.0

[stl]
spec = "G[0,1](abs(x1 - r) < 1)"
safety = ["1 - abs(x1 - r)"]

[sbo]
budget = 2
resolution = 3
eval_horizon = 1.0

[rl]
N = 30
input_scale = 1.0
noise_scale = 0.2
"""


def write_config(tmp_path, text=SMALL, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_simulate(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", write_config(tmp_path), "--out", str(out), "--plot"]) == 0
    for name in ("trajectory.csv", "robustness.csv", "config.json", "manifest.json", "results.pdf"):
        assert (out / name).exists()
    header, rows = read_csv(str(out / "trajectory.csv"))
    assert header[0] == "t"
    assert len(rows) == 301
    with open(out / "manifest.json") as f:
        info = json.load(f)
    assert info["command"] == "simulate"
    assert info["seed"] == 0
    assert len(info["exploration"]) == 1


def test_seed_override(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", write_config(tmp_path), "--out", str(out), "--seed", "7"]) == 0
    with open(out / "config.json") as f:
        assert json.load(f)["scenario"]["seed"] == 7


def test_simulate_is_reproducible(tmp_path):
    config = write_config(tmp_path)
    for name in ("a", "b"):
        assert main(["simulate", config, "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "trajectory.csv").read_bytes() == (tmp_path / "b" / "trajectory.csv").read_bytes()


def test_learn_fitness(tmp_path):
    out = tmp_path / "fitness"
    assert main(["learn-fitness", write_config(tmp_path), "--out", str(out)]) == 0
    header, rows = read_csv(str(out / "fitness.csv"))
    assert header == ["t", "fitness_direct", "fitness_pred_mean", "fitness_pred_var"]
    assert len(rows) == 31
    with open(out / "fitness_gp.json") as f:
        assert json.load(f)["format_version"] == 1


def test_end2end(tmp_path):
    out = tmp_path / "e2e"
    assert main(["end2end", write_config(tmp_path), "--out", str(out), "--plot"]) == 0
    for name in ("trajectory.csv", "monitor.csv", "sbo_history.csv", "adaptations.csv", "manifest.json", "results.pdf"):
        assert os.path.exists(out / name)
    _, rows = read_csv(str(out / "monitor.csv"))
    assert len(rows) == 30


@pytest.mark.parametrize(
    "old,new",
    [
        ("seed = 0\n", ""),
        ("seed = 0\n", 'seed = "zero"\n'),
        ("v_T = 16.0", "v_T = 16.0\nmass = 1.0"),
        ("N = 30", "N = 10"),
        ("dt = 0.01", "dt = 0.03"),
        ("delta_v = 8.0", "delta_v = 0.0"),
        ("delta_v = 8.0", "delta_v = 8.0\nactuator_gain = 0.0"),
        ('spec = "G[0,1](abs(x1 - r) < 1)"', 'spec = "G[0,1](abs(x1 - r) <"'),
    ],
)
def test_configuration_errors(tmp_path, old, new):
    assert main(["simulate", write_config(tmp_path, SMALL.replace(old, new)), "--out", str(tmp_path)]) == 2


def test_missing_config(tmp_path):
    assert main(["simulate", str(tmp_path / "absent.toml")]) == 2
    assert main(["oracle", "newton"]) == 2
    assert main(["simulate", write_config(tmp_path), "--out", str(tmp_path), "--seed", "abc"]) == 2


def test_divergence_is_a_numerical_failure(tmp_path):
    text = SMALL.replace("switch_duration = 1.0", "switch_duration = 1.0\nx0 = [2e6, 0.0, 0.0, 0.0]")
    assert main(["simulate", write_config(tmp_path, text), "--out", str(tmp_path)]) == 3


@pytest.mark.parametrize("subject", ["riccati", "robustness", "gp"])
def test_oracles(subject):
    assert main(["oracle", subject]) == 0


VEHICLE_AT_REST = """
[vehicle]
v_T = 16.0

[scenario]
seed = 0
dt = 0.001
setpoints = [0.0]
change_time = -1.0
"""


def test_riccati_oracle_on_config(tmp_path, capsys):
    code = main(["oracle", "riccati", write_config(tmp_path, VEHICLE_AT_REST)])
    lines = capsys.readouterr().out.splitlines()
    rows = {line.split()[0]: line for line in lines[1:-1]}
    assert set(rows) == {
        "scalar/gain",
        "scalar/iterations",
        "scalar/holdout_residual",
        "nominal/gain",
        "nominal/iterations",
        "nominal/holdout_residual",
    }
    assert rows["nominal/gain"].endswith("ok")
    assert code == (0 if all(row.endswith("ok") for row in rows.values()) else 1)
