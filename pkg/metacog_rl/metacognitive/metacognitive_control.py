"""Metacognitive control.

The low-level learner tracks the setpoint with the policy of the current hyperparameters. The fitness
monitor watches the closed loop every T; when the fitness GP drifts away from every safe base GP, a fresh
exploration log is recorded on the changed plant and safe Bayesian optimization picks new hyperparameters,
whose policy is computed from that single log and redeployed.
"""
import json
import logging
import os
import platform
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import scipy

from metacog_rl import __version__
from metacog_rl.common.buffer import ContextBuffer
from metacog_rl.common.config import RunConfig
from metacog_rl.common.errors import MetacogError, NumericalError, SafeSetError, SimulationDivergedError, StageError
from metacog_rl.common.gaussian_process import BaseGpLibrary, GpPosterior, gptd_fit, gptd_fit_segments
from metacog_rl.common.hyperparams import HyperParams
from metacog_rl.common.metacog_algorithm import MetacogAgent
from metacog_rl.common.stl import Formula, PredicateStack, robustness_signal
from metacog_rl.common.trajectory import Trajectory
from metacog_rl.common.utils import grid_steps, write_csv
from metacog_rl.envs.lane_change import Controller, LtiPlant, ScenarioSchedule, simulate
from metacog_rl.low_level.off_policy_adp import (
    BehaviorPolicy,
    OffPolicyADP,
    PolicyWeights,
    RlConfig,
    solve_policy,
)
from metacog_rl.low_level.riccati import riccati_oracle
from metacog_rl.metacognitive.fitness import (
    Decision,
    FitnessConfig,
    MetacognitiveMonitor,
    MonitorRow,
    fitness_bound,
    fitness_kernel,
    fitness_segment,
    joint_inputs,
    meta_reward,
    monitor_rows,
    steady_state_mean,
)
from metacog_rl.metacognitive.safe_bo import SafeBayesOpt, SboConfig, SboRecord, history_header, history_rows, survival_score


logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EpisodeConfig:
    """Everything one episode needs, checked for consistent dimensions."""

    schedule: ScenarioSchedule
    plant: LtiPlant
    theta0: HyperParams
    stack: PredicateStack
    fitness: FitnessConfig = field(default_factory=FitnessConfig)
    sbo: SboConfig = field(default_factory=SboConfig)
    rl: RlConfig = field(default_factory=RlConfig)
    seed: int = 0
    formula: Optional[Formula] = None

    def __post_init__(self):
        n, m = self.plant.n, self.plant.m
        if self.theta0.n != n or self.theta0.m != m:
            raise ValueError(f"hyperparameters are for n={self.theta0.n}, m={self.theta0.m}; plant has n={n}, m={m}")
        if self.stack.setpoint.size != n:
            raise ValueError(f"predicate stack setpoint has {self.stack.setpoint.size} entries, plant state {n}")
        if len(self.fitness.lengthscales_x) != n:
            raise ValueError(f"{len(self.fitness.lengthscales_x)} fitness lengthscales for a {n}-dimensional state")
        grid_steps(self.fitness.T, self.schedule.dt, "fitness.T")
        grid_steps(self.rl.T_int, self.schedule.dt, "rl.T_int")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "EpisodeConfig":
        return cls(
            schedule=cfg.schedule(),
            plant=cfg.plant(),
            theta0=cfg.theta0(),
            stack=cfg.stack(),
            fitness=cfg.fitness,
            sbo=cfg.sbo,
            rl=cfg.rl,
            seed=cfg.seed,
            formula=cfg.formula(),
        )


class Adaptation(NamedTuple):
    t: float
    theta_old: HyperParams
    theta_new: HyperParams
    history: List[SboRecord]
    status: str
    min_kl: float


@dataclass(eq=False)
class EpisodeReport:
    trajectory: Trajectory
    monitor_trace: List[MonitorRow]
    adaptations: List[Adaptation]
    final_policy: PolicyWeights
    fitness_gp: Optional[GpPosterior] = None
    logs: List[dict] = field(default_factory=list)


def build_base_library(stack: PredicateStack, cfg: FitnessConfig, theta0: HyperParams, n_points: int = 21) -> BaseGpLibrary:
    """Base GPs of the minimum acceptable margins ``rho_min``, ``2 rho_min`` and ``4 rho_min``.

    Each template holds the smooth margin at its level along a sweep of the first tracking-error coordinate in
    ``[-1, 1]``, so its interval rewards are constant and its fitness is the bound ``(2/a) log(1 + 1/margin)``.
    Only the STL requirement enters: the library does not depend on the plant.
    """
    n = stack.setpoint.size
    margins = (cfg.rho_min, 2 * cfg.rho_min, 4 * cfg.rho_min)
    errors = np.zeros((n_points, n))
    errors[:, 0] = np.linspace(-1.0, 1.0, n_points)
    inputs = joint_inputs(errors, np.zeros_like(errors), theta0)
    kernel = fitness_kernel(cfg, n, theta0.to_vector().size)
    entries = []
    for rho in margins:
        reward = meta_reward(rho, cfg) * (1.0 - np.exp(-cfg.a * cfg.T)) / cfg.a
        rewards = np.full(n_points - 1, reward)
        gp = gptd_fit(inputs, rewards, kernel, cfg.noise_w2, cfg.a, cfg.T, fitness_bound(rho, cfg.a), cfg.td_discount)
        entries.append(gp)
    return BaseGpLibrary(tuple(entries), margins)


def nominal_schedule(schedule: ScenarioSchedule, horizon: Optional[float] = None) -> ScenarioSchedule:
    """The schedule without plant changes, optionally cut to ``horizon``."""
    horizon = schedule.horizon if horizon is None else min(horizon, schedule.horizon)
    return ScenarioSchedule(
        horizon=horizon,
        dt=schedule.dt,
        setpoint_plan=[(t, r) for t, r in schedule.plan if t <= horizon],
        stl_spec=schedule.stl_spec,
        seed=schedule.seed,
        switch_duration=schedule.switch_duration,
        x0=schedule.x0,
        x0_noise=schedule.x0_noise,
    )


def weights_controller(weights: PolicyWeights) -> Controller:
    return lambda t, x, r: weights.act(x, r)


@contextmanager
def stage(name: str, time: float):
    """Annotates any failure inside the block with the stage name and the episode time."""
    try:
        yield
    except StageError:
        raise
    except (MetacogError, ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        raise StageError(name, time, e) from e


class MetacognitiveControl(MetacogAgent):
    """Two-layer controller: off-policy ADP at the bottom, fitness monitor and safe BO on top."""

    def __init__(
        self,
        cfg: EpisodeConfig,
        verbose: bool = False,
        log: bool = False,
        project_name: str = "metacog-rl",
        experiment_name: str = "metacog",
    ):
        """Initializes the controller.

        Args:
            cfg: episode configuration
            verbose: print monitor decisions and SBO evaluations
            log: track the run with wandb and tensorboard
            project_name: The name of the project used for logging
            experiment_name: The name of the experiment used for logging
        """
        MetacogAgent.__init__(self, env=None)
        self.cfg = cfg
        self.verbose = verbose
        self.log = log
        if self.log:
            self.setup_wandb(project_name, experiment_name)
        rl = cfg.rl
        self.learner = OffPolicyADP(
            gamma=rl.gamma,
            eps=rl.eps,
            max_iter=rl.max_iter,
            quadrature=rl.quadrature,
            verbose=verbose,
            log=log,
            parent_writer=self.writer,
        )
        self.theta = cfg.theta0
        self.weights: Optional[PolicyWeights] = None
        self.bases: Optional[BaseGpLibrary] = None
        self.contexts = ContextBuffer(cfg.fitness.contexts)
        self.adaptations: List[Adaptation] = []
        self.logs: List[dict] = []
        self.t_now = 0.0

    def get_config(self) -> dict:
        cfg = self.cfg
        return {
            "seed": cfg.seed,
            "theta0": cfg.theta0.to_dict(),
            "fitness": vars(cfg.fitness),
            "sbo": vars(cfg.sbo),
            "rl": vars(cfg.rl),
        }

    def prior_behavior(self, setpoint: np.ndarray) -> BehaviorPolicy:
        """Undiscounted LQR of the nominal model with ``behavior_q I`` and ``behavior_r I``."""
        plant, rl = self.cfg.plant, self.cfg.rl
        _, K = riccati_oracle(plant.A, plant.B, rl.behavior_q * np.eye(plant.n), rl.behavior_r * np.eye(plant.m), gamma=0.0)
        return BehaviorPolicy.from_lqr(K, setpoint)

    def _record(self, plant: LtiPlant, behavior: BehaviorPolicy, seed: int, theta: HyperParams, x0: np.ndarray, adapt: bool):
        cfg, rl = self.cfg, self.cfg.rl
        noise = rl.exploration(plant.n, plant.m, seed, adapt=adapt)
        log = self.learner.collect(plant, behavior, noise, theta, rl.N, rl.T_int, cfg.schedule.dt, x0=x0)
        self.logs.append({"t": self.t_now, "plant": plant.label, "seed": seed, "noise": noise.to_dict()})
        return log

    def initial_policy(self) -> PolicyWeights:
        """Records the first log under the LQR prior and solves the policy of theta0."""
        cfg = self.cfg
        behavior = self.prior_behavior(cfg.theta0.setpoint)
        self._record(cfg.plant, behavior, cfg.seed, cfg.theta0, cfg.schedule.initial_state(), adapt=False)
        self.weights = self.learner.learn(cfg.theta0)
        return self.weights

    def learn_nominal_fitness(self) -> Tuple[GpPosterior, Trajectory]:
        """Fitness GP of theta0 from a replay of the scenario without plant changes."""
        cfg = self.cfg
        schedule = nominal_schedule(cfg.schedule, cfg.fitness.learn_horizon)
        replay = simulate(cfg.plant, weights_controller(self.weights), schedule)
        inputs, rewards = fitness_segment(replay, cfg.stack, cfg.theta0, cfg.fitness)
        self.contexts.add(cfg.theta0.to_vector(), inputs, rewards)
        return self._fit(inputs, rewards), replay

    def _fit(self, inputs: np.ndarray, rewards: np.ndarray) -> GpPosterior:
        f = self.cfg.fitness
        kernel = fitness_kernel(f, self.cfg.plant.n, self.theta.to_vector().size)
        return gptd_fit(inputs, rewards, kernel, f.noise_w2, f.a, f.T, steady_state_mean(rewards, f), f.td_discount)

    def run(self) -> EpisodeReport:
        """Runs the whole episode.

        Raises:
            StageError: wrapping the failure of any stage with its name and time
        """
        cfg = self.cfg
        with stage("collect", 0.0):
            self.initial_policy()
        controller = weights_controller(self.weights)

        if not cfg.fitness.monitor:
            with stage("deploy", 0.0):
                traj = simulate(cfg.plant, controller, cfg.schedule)
            if self.log:
                self.close_wandb()
            return EpisodeReport(traj, [], [], self.weights, None, self.logs)

        with stage("learn_fitness", 0.0):
            gp0, _ = self.learn_nominal_fitness()
            self.bases = build_base_library(cfg.stack, cfg.fitness, cfg.theta0)
        monitor = MetacognitiveMonitor(
            cfg.fitness, cfg.stack, self.bases, gp0, cfg.theta0, cfg.schedule.dt, 0.0, self.verbose, self.writer
        )
        plants: Dict[str, LtiPlant] = {cfg.plant.label: cfg.plant}
        plants.update({p.label: p for _, p in cfg.schedule.events})

        def observer(t, x, r, label):
            self.t_now = t
            with stage("monitor", t):
                row = monitor.observe(t, x, r)
            if row is None or row.decision != Decision.ADAPT:
                return None
            if not cfg.sbo.enabled:
                logger.info("t=%.3fs: Adapt decision ignored, adaptation disabled", t)
                return None
            with stage("adapt", t):
                return self.adapt(t, x, plants[label], monitor, row.min_kl)

        try:
            traj = simulate(cfg.plant, controller, cfg.schedule, observer=observer)
        except StageError:
            raise
        except (MetacogError, ValueError, ArithmeticError) as e:
            raise StageError("deploy", self.t_now, e) from e
        if self.log:
            self.close_wandb()
        return EpisodeReport(traj, list(monitor.trace), list(self.adaptations), self.weights, monitor.gp, self.logs)

    def adapt(self, t: float, x: np.ndarray, plant: LtiPlant, monitor: MetacognitiveMonitor, min_kl: float) -> Controller:
        """Records a log on the current plant, runs safe BO over the hyperparameters and redeploys.

        The log is recorded under the LQR prior (``rl.behavior_q``, ``rl.behavior_r``) from the current state, so
        policy iteration on the changed plant starts from that behavior. If the recording diverges the deployed
        policy stays and the adaptation is reported as ``unsafe``.
        """
        cfg = self.cfg
        fit = cfg.fitness
        window = cfg.schedule.window(t, cfg.sbo.eval_horizon, x)
        target = window.plan[0][1]
        theta_old = self.theta
        theta_star = theta_old.with_setpoint(target)
        seed = cfg.seed + 1 + len(self.adaptations)
        try:
            log = self._record(plant, self.prior_behavior(target), seed, theta_star, x, adapt=True)
        except SimulationDivergedError as e:
            logger.warning("t=%.3fs: recording under the LQR prior diverged (%s); the deployed policy stays", t, e)
            monitor.disarm(t)
            self.adaptations.append(Adaptation(t, theta_old, theta_old, [], "unsafe", min_kl))
            return weights_controller(self.weights)

        opt = SafeBayesOpt(theta_star, cfg.sbo, fit.varpi, verbose=self.verbose, writer=self.writer)
        scale = np.ones(theta_star.to_vector().size)
        scale[opt.free_idx] = opt.grid.widths
        unsafe = opt.p_min - 1.0
        cache: Dict[Tuple[float, ...], Tuple[np.ndarray, np.ndarray]] = {}

        def rollout_segment(theta: HyperParams) -> Tuple[np.ndarray, np.ndarray]:
            key = tuple(theta.to_vector())
            if key not in cache:
                weights, _ = solve_policy(log, theta, cfg.rl.eps, cfg.rl.max_iter, None, cfg.rl.quadrature)
                traj = simulate(plant, weights_controller(weights), window)
                cache[key] = fitness_segment(traj, cfg.stack, theta, fit)
            return cache[key]

        def evaluate(theta: HyperParams) -> float:
            try:
                inputs, rewards = rollout_segment(theta)
                gp = self._fit(inputs, rewards)
            except NumericalError as e:
                logger.warning("candidate %s failed (%s); scored unsafe", theta.to_vector()[opt.free_idx].round(4).tolist(), e)
                return unsafe
            return survival_score(theta, gp, self.bases, theta_star, fit.varpi, opt.p_min, fit.kl_points, scale, fit.kl_jitter)

        try:
            best, history = opt.run(evaluate)
            status = "kept" if best == theta_star else "adapted"
        except SafeSetError as e:
            logger.warning("t=%.3fs: keeping the current hyperparameters: %s", t, e)
            best, history, status = theta_star, opt.history, "unsafe"

        try:
            weights = self.learner.learn(best)
            best_inputs, best_rewards = rollout_segment(best)
        except NumericalError as e:
            if status != "unsafe":
                raise
            logger.warning("t=%.3fs: no policy for %s on the new log (%s); the deployed policy stays", t, best, e)
            monitor.disarm(t)
            self.adaptations.append(Adaptation(t, theta_old, theta_old, list(history), status, min_kl))
            return weights_controller(self.weights)
        self.weights = weights
        inputs, rewards = monitor.recent_segment()
        if rewards.size:
            self.contexts.add(theta_old.to_vector(), inputs, rewards)
        self.contexts.add(best.to_vector(), best_inputs, best_rewards)
        prior = steady_state_mean(best_rewards, fit)
        gp = gptd_fit_segments(self.contexts.segments(), monitor.gp.kernel, fit.noise_w2, fit.a, fit.T, prior, fit.td_discount)
        monitor.adopt(gp, best, t)
        self.theta = best
        self.adaptations.append(Adaptation(t, theta_old, best, list(history), status, min_kl))
        old, new = theta_old.to_vector().round(4).tolist(), best.to_vector().round(4).tolist()
        logger.info("t=%.3fs: %s, theta %s -> %s", t, status, old, new)
        return weights_controller(self.weights)


def run_episode(cfg: EpisodeConfig, verbose: bool = False) -> EpisodeReport:
    """Runs one metacognitive episode; deterministic given the configuration and its seeds."""
    return MetacognitiveControl(cfg, verbose=verbose).run()


def manifest(seed: int, logs: Optional[List[dict]] = None, command: str = "") -> dict:
    """Seeds, exploration signals and library versions of a run."""
    return {
        "command": command,
        "seed": seed,
        "versions": {
            "metacog_rl": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "exploration": logs or [],
    }


def write_json(path: str, payload: dict):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(payload, indent=2, sort_keys=True))
        f.write("\n")


def write_trajectory(out_dir: str, traj: Trajectory, formula: Optional[Formula] = None):
    """``trajectory.csv`` and, with a formula, ``robustness.csv`` (t, rho; empty where the window is incomplete)."""
    write_csv(os.path.join(out_dir, "trajectory.csv"), traj.header(), traj.rows())
    if formula is not None:
        rho = robustness_signal(formula, traj)
        rows = [[t, "" if np.isnan(v) else v] for t, v in zip(traj.times, rho)]
        write_csv(os.path.join(out_dir, "robustness.csv"), ["t", "rho"], rows)


def write_bundle(report: EpisodeReport, out_dir: str, cfg: EpisodeConfig, config_echo: dict, command: str = "end2end"):
    """Writes the episode bundle: trajectory, robustness, monitor trace, SBO history, adaptations, config and manifest."""
    os.makedirs(out_dir, exist_ok=True)
    write_trajectory(out_dir, report.trajectory, cfg.formula)
    write_csv(os.path.join(out_dir, "monitor.csv"), MonitorRow.HEADER, monitor_rows(report.monitor_trace))

    names = cfg.theta0.coordinate_names()
    rows = [[k, *row] for k, a in enumerate(report.adaptations) for row in history_rows(a.history)]
    write_csv(os.path.join(out_dir, "sbo_history.csv"), ["adaptation", *history_header(cfg.sbo.free)], rows)
    header = ["t", "status", "min_kl", "evaluations"] + [f"old_{n}" for n in names] + [f"new_{n}" for n in names]
    rows = [
        [a.t, a.status, a.min_kl, len(a.history), *a.theta_old.to_vector(), *a.theta_new.to_vector()]
        for a in report.adaptations
    ]
    write_csv(os.path.join(out_dir, "adaptations.csv"), header, rows)

    write_json(os.path.join(out_dir, "config.json"), config_echo)
    write_json(os.path.join(out_dir, "manifest.json"), manifest(cfg.seed, report.logs, command))
