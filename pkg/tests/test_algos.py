"""Mostly tests to make sure the metacognitive episodes are able to run."""
import os

import numpy as np
import pytest

from metacog_rl.common.errors import StageError
from metacog_rl.common.gaussian_process import gp_predict_batch
from metacog_rl.common.hyperparams import HyperParams
from metacog_rl.common.stl import Predicate, PredicateStack, parse_formula
from metacog_rl.common.utils import read_csv
from metacog_rl.envs.lane_change import LtiPlant, ScenarioSchedule
from metacog_rl.low_level.off_policy_adp import RlConfig
from metacog_rl.low_level.riccati import riccati_oracle
from metacog_rl.metacognitive.fitness import Decision, FitnessConfig, MonitorRow, fitness_bound
from metacog_rl.metacognitive.metacognitive_control import (
    EpisodeConfig,
    MetacognitiveControl,
    build_base_library,
    nominal_schedule,
    run_episode,
    stage,
    write_bundle,
)
from metacog_rl.metacognitive.safe_bo import SboConfig


NOMINAL = LtiPlant(np.array([[0.0]]), np.array([[1.0]]), "nominal")
CHANGED = LtiPlant(np.array([[1.5]]), np.array([[1.0]]), "perturbed")
# the initial gain (about 3.1) does not stabilize x' = 4 x + u
STEEP = LtiPlant(np.array([[4.0]]), np.array([[1.0]]), "perturbed")
THETA0 = HyperParams([10.0], [1.0], [0.0])


def scalar_stack():
    return PredicateStack([Predicate.from_expression("1 - abs(x1 - r)")], 1.5, np.zeros(1))


def scalar_episode(monitor=True, adapt=True, change=True, varpi=1.0, beta=0.1, seed=0, changed=CHANGED, horizon=6.0):
    schedule = ScenarioSchedule(
        horizon,
        0.01,
        [(0.0, [0.0]), (1.0, [0.5])],
        events=[(3.0, changed)] if change else [],
        switch_duration=2.0,
    )
    return EpisodeConfig(
        schedule=schedule,
        plant=NOMINAL,
        theta0=THETA0,
        stack=scalar_stack(),
        fitness=FitnessConfig(
            lengthscales_x=(1.0,), beta=beta, varpi=varpi, monitor=monitor, surprise_mode="deterioration"
        ),
        sbo=SboConfig(enabled=adapt, budget=2, resolution=3, eval_horizon=1.0),
        rl=RlConfig(
            N=20, input_scale=1.0, noise_scale=1.0, adapt_noise_scale=0.5, q=(10.0,), r=(1.0,), behavior_q=100.0
        ),
        seed=seed,
        formula=parse_formula("G[0,1](abs(x1 - r) < 1)"),
    )


def test_nominal_episode():
    report = run_episode(scalar_episode(monitor=False, change=False))
    traj = report.trajectory
    assert len(traj) == 601
    assert report.monitor_trace == []
    assert report.adaptations == []
    assert len(report.logs) == 1
    assert abs(traj.states[-1, 0] - 0.5) < 0.05
    _, K = riccati_oracle(NOMINAL.A, NOMINAL.B, THETA0.Q, THETA0.R, gamma=0.1)
    np.testing.assert_allclose(report.final_policy.gain, -K, rtol=1e-2)


def test_monitor_does_not_change_the_closed_loop():
    off = run_episode(scalar_episode(monitor=False))
    watched = run_episode(scalar_episode(monitor=True, adapt=False))
    np.testing.assert_array_equal(off.trajectory.states, watched.trajectory.states)
    assert watched.adaptations == []
    assert len(watched.monitor_trace) == 60
    np.testing.assert_allclose([r.t for r in watched.monitor_trace], 0.1 * np.arange(1, 61))


def test_forced_adaptation():
    cfg = scalar_episode(varpi=1e-9, beta=1e-3)
    report = run_episode(cfg)
    assert report.adaptations
    adapt_times = [r.t for r in report.monitor_trace if r.decision == Decision.ADAPT]
    for a in report.adaptations:
        assert any(abs(a.t - t) < 1e-9 for t in adapt_times)
        assert a.status in ("kept", "adapted", "unsafe")
        assert a.theta_new.setpoint[0] in (0.0, 0.5)
        assert a.min_kl > cfg.fitness.varpi
    assert len(report.logs) == 1 + len(report.adaptations)
    assert [log["seed"] for log in report.logs] == list(range(len(report.logs)))
    # trigger stays disarmed for the re-arm delay after every adaptation
    times = [a.t for a in report.adaptations]
    assert all(t2 - t1 >= cfg.fitness.rearm - 1e-9 for t1, t2 in zip(times, times[1:]))


def tracking_error(traj):
    return np.abs(traj.states[:, 0] - traj.references[:, 0])


def test_unstable_change_violates_without_adaptation():
    report = run_episode(scalar_episode(monitor=False, changed=STEEP, horizon=8.0))
    traj = report.trajectory
    error = tracking_error(traj)
    assert np.all(np.isfinite(traj.states))
    assert error[traj.times < 3.0].max() < 1.0
    assert error.max() >= 1.0
    # the error keeps growing until the end
    assert error[-1] >= 1.0


def test_adaptation_restores_the_envelope():
    cfg = scalar_episode(varpi=1e-9, beta=1.0, changed=STEEP, horizon=8.0)
    report = run_episode(cfg)
    traj = report.trajectory
    after_change = [a for a in report.adaptations if a.t >= 3.0]
    assert after_change
    first = after_change[0]
    assert first.t < 4.0
    assert any(r.decision == Decision.ADAPT and abs(r.t - first.t) < 1e-9 for r in report.monitor_trace)
    assert all(log["plant"] == "perturbed" for log in report.logs[1:] if log["t"] >= 3.0)
    error = tracking_error(traj)
    assert np.all(np.isfinite(traj.states))
    assert error[traj.times >= first.t + 1.0].max() < 1.0
    assert abs(report.final_policy.gain[0, 0]) > 4.0


def test_episode_is_deterministic():
    cfg = scalar_episode(varpi=1e-9, beta=1e-3, seed=3)
    first, second = run_episode(cfg), run_episode(cfg)
    np.testing.assert_array_equal(first.trajectory.states, second.trajectory.states)
    assert [a.t for a in first.adaptations] == [a.t for a in second.adaptations]
    assert [r.decision for r in first.monitor_trace] == [r.decision for r in second.monitor_trace]


def test_base_library_templates():
    cfg = FitnessConfig(lengthscales_x=(1.0,))
    library = build_base_library(scalar_stack(), cfg, THETA0)
    assert library.margins == (0.2, 0.4, 0.8)
    assert len(library.entries) == 3
    for gp, rho in zip(library.entries, library.margins):
        mean, _ = gp_predict_batch(gp, gp.inducing)
        np.testing.assert_allclose(mean, fitness_bound(rho, cfg.a), rtol=1e-6)


def test_nominal_schedule():
    cfg = scalar_episode()
    schedule = nominal_schedule(cfg.schedule, 0.5)
    assert schedule.events == ()
    assert schedule.horizon == 0.5
    assert len(schedule.plan) == 1
    assert nominal_schedule(cfg.schedule).horizon == 6.0


def test_episode_config_checks():
    cfg = scalar_episode()
    with pytest.raises(ValueError):
        EpisodeConfig(cfg.schedule, cfg.plant, HyperParams([1.0, 1.0], [1.0], [0.0, 0.0]), cfg.stack)
    with pytest.raises(ValueError):
        EpisodeConfig(cfg.schedule, cfg.plant, THETA0, cfg.stack, fitness=FitnessConfig())
    with pytest.raises(ValueError):
        EpisodeConfig(cfg.schedule, cfg.plant, THETA0, cfg.stack, fitness=FitnessConfig(lengthscales_x=(1.0,), T=0.015))


def test_stage_annotates_failures():
    with pytest.raises(StageError) as info:
        with stage("adapt", 2.5):
            raise ValueError("boom")
    assert info.value.stage == "adapt"
    assert info.value.time == 2.5
    assert isinstance(info.value.cause, ValueError)


def test_agent_config():
    agent = MetacognitiveControl(scalar_episode(), log=False)
    config = agent.get_config()
    assert config["seed"] == 0
    assert config["theta0"]["q_diag"] == [10.0]
    assert config["sbo"]["budget"] == 2
    assert agent.learner.get_config()["intervals"] is None
    agent.initial_policy()
    assert agent.learner.get_config()["intervals"] == 20


def test_bundle(tmp_path):
    cfg = scalar_episode(varpi=1e-9, beta=1e-3)
    report = run_episode(cfg)
    out = str(tmp_path / "bundle")
    write_bundle(report, out, cfg, {"scenario": {"seed": 0}})
    for name in ("trajectory.csv", "robustness.csv", "monitor.csv", "sbo_history.csv", "adaptations.csv"):
        assert os.path.exists(os.path.join(out, name))
    header, rows = read_csv(os.path.join(out, "monitor.csv"))
    assert header == list(MonitorRow.HEADER)
    assert len(rows) == len(report.monitor_trace)
    header, rows = read_csv(os.path.join(out, "adaptations.csv"))
    assert header[:4] == ["t", "status", "min_kl", "evaluations"]
    assert "new_q1" in header
    assert len(rows) == len(report.adaptations)
    header, rows = read_csv(os.path.join(out, "robustness.csv"))
    assert header == ["t", "rho"]
    # the one-second window is incomplete over the last second
    assert rows[-1][1] == ""
    assert rows[0][1] != ""
