"""Meta-rewards, fitness learning and the metacognitive trigger."""
import numpy as np
import pytest

from metacog_rl.common.buffer import ContextBuffer, SurpriseWindow
from metacog_rl.common.errors import EmptyWindowError
from metacog_rl.common.gaussian_process import BaseGpLibrary
from metacog_rl.common.hyperparams import HyperParams
from metacog_rl.common.stl import Predicate, PredicateStack, smooth_conjunction
from metacog_rl.common.trajectory import Trajectory
from metacog_rl.metacognitive.fitness import (
    Decision,
    FitnessConfig,
    MetacognitiveMonitor,
    MonitorRow,
    discounted_reward_integral,
    fitness_bound,
    fitness_direct,
    fitness_kernel,
    integrated_reward,
    interval_rewards,
    learn_fitness,
    meta_reward,
    monitor_rows,
    surprise,
    trigger,
)


THETA = HyperParams([1.0], [1.0], [0.0])


def scalar_stack():
    return PredicateStack([Predicate.from_expression("1 - abs(x1 - r)")], 1.5, np.zeros(1))


def config(**kwargs):
    return FitnessConfig(lengthscales_x=(1.0,), **kwargs)


def at_rest(L=301, dt=0.01, offset=0.0):
    return Trajectory(0.0, dt, np.full((L, 1), offset), np.zeros((L, 1)), np.zeros((L, 1)))


def test_meta_reward():
    cfg = config()
    assert meta_reward(1.0, cfg) == pytest.approx(2 * np.log(2))
    assert meta_reward(0.0, cfg) == cfg.rm_cap
    np.testing.assert_allclose(meta_reward(np.array([-1.0, 1.0]), cfg), [cfg.rm_cap, 2 * np.log(2)])
    assert fitness_bound(1.0, 0.5) == pytest.approx(4 * np.log(2))
    with pytest.raises(ValueError):
        fitness_bound(0.0, 0.5)


def test_config_checks():
    cfg = config()
    assert cfg.rearm == pytest.approx(2 * cfg.delta)
    assert config(rearm_delay=0.3).rearm == 0.3
    assert cfg.discount == pytest.approx(np.exp(-cfg.a * cfg.T))
    assert cfg.kl_jitter == pytest.approx(0.01)
    for bad in ({"a": 0.0}, {"td_discount": "none"}, {"surprise_mode": "square"}, {"surprise_mode": "abs"}, {"kl_points": 0}):
        with pytest.raises(ValueError):
            config(**bad)
    with pytest.raises(ValueError):
        fitness_kernel(cfg, 4, 3)


def test_discounted_reward_integral():
    dt, a = 0.01, 0.5
    expected = (1 - np.exp(-a)) / a
    assert discounted_reward_integral(np.ones(101), dt, a) == pytest.approx(expected, rel=1e-4)


def test_direct_fitness_at_rest():
    cfg, stack = config(), scalar_stack()
    traj = at_rest()
    xi = smooth_conjunction(np.array([1.0, 1.5]))
    r_m = 2 * np.log1p(1 / xi)
    expected = r_m * (1 - np.exp(-cfg.a * 3.0)) / cfg.a
    assert fitness_direct(traj, stack, cfg, 0.0) == pytest.approx(expected, rel=1e-4)
    assert fitness_direct(traj, stack, cfg, 3.0) == 0.0
    assert fitness_direct(traj, stack, cfg, 0.0) <= fitness_bound(xi, cfg.a)


def test_interval_rewards():
    cfg, stack = config(), scalar_stack()
    rng = np.random.default_rng(0)
    traj = Trajectory(0.0, 0.01, 0.2 * rng.normal(size=(101, 1)), np.zeros((101, 1)), np.zeros((101, 1)))
    bounds, rewards = interval_rewards(traj, stack, cfg)
    np.testing.assert_array_equal(bounds, np.arange(0, 101, 10))
    assert rewards.shape == (10,)
    for i in (1, 5, 10):
        assert rewards[i - 1] == pytest.approx(integrated_reward(traj, stack, cfg, i))
    with pytest.raises(ValueError):
        integrated_reward(traj, stack, cfg, 0)
    with pytest.raises(ValueError):
        integrated_reward(traj, stack, cfg, 11)


def test_learned_fitness_has_no_surprise_at_rest():
    cfg, stack = config(), scalar_stack()
    gp = learn_fitness(at_rest(), stack, THETA, cfg)
    _, rewards = interval_rewards(at_rest(), stack, cfg)
    z = np.concatenate([[0.0], THETA.to_vector()])
    assert surprise(gp, z, z, rewards[0], cfg) == pytest.approx(0.0, abs=1e-8)


def test_surprise_window():
    window = SurpriseWindow(0.5, 0.1)
    for k in range(1, 6):
        window.add(0.1 * k, -1.0)
    assert not window.is_full()
    window.add(0.6, -1.0)
    assert window.is_full()
    assert window.integral("deterioration") == pytest.approx(0.5)
    assert window.integral("signed") == pytest.approx(-0.5)
    with pytest.raises(ValueError):
        window.add(0.75, 1.0)
    window.reset()
    assert len(window) == 0
    assert window.integral() == 0.0


def test_context_buffer():
    buffer = ContextBuffer(2)
    for k in range(3):
        buffer.add(np.full(3, k), np.full((3, 2), k), np.full(2, k))
    assert len(buffer) == 2
    assert [float(r[0]) for _, r in buffer.segments()] == [1.0, 2.0]
    with pytest.raises(ValueError):
        buffer.add(np.zeros(3), np.zeros((3, 2)), np.zeros(3))


def test_trigger_decisions():
    cfg, stack = config(), scalar_stack()
    gp = learn_fitness(at_rest(), stack, THETA, cfg)
    bases = BaseGpLibrary((gp,), (0.2,))
    window = SurpriseWindow(cfg.delta, cfg.T)
    window.add(0.1, 1.0)
    with pytest.raises(EmptyWindowError):
        trigger(window, gp, bases, cfg)
    for k in range(2, 7):
        window.add(0.1 * k, 1.0)
    outcome = trigger(window, gp, bases, cfg)
    assert outcome.decision == Decision.INFER_ONLY
    assert outcome.integral_sp == pytest.approx(0.5)
    assert outcome.min_kl == pytest.approx(0.0, abs=1e-6)

    quiet = SurpriseWindow(cfg.delta, cfg.T)
    for k in range(1, 7):
        quiet.add(0.1 * k, 0.0)
    outcome = trigger(quiet, gp, bases, cfg)
    assert outcome.decision == Decision.NO_ACTION
    assert np.isnan(outcome.min_kl)


def filled(values, cfg):
    window = SurpriseWindow(cfg.delta, cfg.T)
    for k, v in enumerate(values, start=1):
        window.add(0.1 * k, v)
    return window


@pytest.mark.parametrize("mode", ["signed", "deterioration"])
def test_trigger_is_monotone_in_surprise(mode):
    cfg, stack = config(surprise_mode=mode), scalar_stack()
    gp = learn_fitness(at_rest(), stack, THETA, cfg)
    bases = BaseGpLibrary((gp,), (0.2,))

    def fired(values):
        return trigger(filled(values, cfg), gp, bases, cfg).decision != Decision.NO_ACTION

    # signed: raising every sample never silences the trigger; deterioration: lowering never does
    direction = 1.0 if mode == "signed" else -1.0
    rng = np.random.default_rng(0)
    for _ in range(20):
        values = rng.normal(scale=0.5, size=6)
        shifted = values + direction * rng.uniform(0.0, 1.0, size=6)
        if fired(values):
            assert fired(shifted)
    assert not fired(np.zeros(6))
    assert fired(np.full(6, direction))
    assert not fired(np.full(6, -direction))


def run_monitor(cfg, deviation=0.3, start=50, L=201):
    stack = scalar_stack()
    gp = learn_fitness(at_rest(), stack, THETA, cfg)
    monitor = MetacognitiveMonitor(cfg, stack, BaseGpLibrary((gp,), (0.2,)), gp, THETA, 0.01)
    rows = []
    for k in range(L):
        x = np.array([deviation if k >= start else 0.0])
        row = monitor.observe(k * 0.01, x, np.zeros(1))
        if row is not None:
            rows.append(row)
    return monitor, rows


def test_monitor_at_rest():
    monitor, rows = run_monitor(config(beta=0.01), deviation=0.0)
    assert len(rows) == 20
    np.testing.assert_allclose([r.t for r in rows], 0.1 * np.arange(1, 21))
    assert all(r.decision == Decision.NO_ACTION for r in rows)
    assert max(abs(r.surprise) for r in rows) < 1e-8
    assert np.all(np.diff([r.overall_fitness for r in rows]) > 0)
    assert monitor.trace == rows
    table = monitor_rows(rows)
    assert len(table[0]) == len(MonitorRow.HEADER)
    assert table[0][MonitorRow.HEADER.index("decision")] == "NoAction"


def test_monitor_infers_then_rearms():
    cfg = config(beta=0.01, varpi=1e12, surprise_mode="deterioration")
    monitor, rows = run_monitor(cfg)
    assert all(r.decision == Decision.NO_ACTION for r in rows[:4])
    fired = [r for r in rows if r.decision != Decision.NO_ACTION]
    assert fired
    first = fired[0]
    assert first.decision == Decision.INFER_ONLY
    assert first.integral_sp >= cfg.beta
    quiet = [r for r in rows if first.t < r.t < first.t + cfg.rearm - 1e-9]
    assert quiet and all(r.decision == Decision.NO_ACTION for r in quiet)
    inputs, rewards = monitor.recent_segment()
    assert inputs.shape[0] == rewards.size + 1


def test_monitor_adapts_when_far_from_bases():
    monitor, rows = run_monitor(config(beta=0.01, varpi=1e-9, surprise_mode="deterioration"))
    fired = [r for r in rows if r.decision != Decision.NO_ACTION]
    assert fired[0].decision == Decision.ADAPT
    assert fired[0].min_kl > 1e-9
    theta = THETA.with_setpoint([0.3])
    monitor.adopt(monitor.gp, theta, rows[-1].t)
    assert monitor.theta == theta
    assert monitor.armed_at == pytest.approx(rows[-1].t + monitor.cfg.rearm)
