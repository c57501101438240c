"""Meta-rewards, the fitness function, the surprise signal and the metacognitive trigger."""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid

from metacog_rl.common.buffer import SurpriseWindow
from metacog_rl.common.errors import EmptyWindowError
from metacog_rl.common.gaussian_process import (
    BaseGpLibrary,
    GpPosterior,
    Kernel,
    gp_predict,
    gptd_fit,
    joint_kernel,
    min_kl_to_library,
    spread_targets,
    td_factor,
)
from metacog_rl.common.hyperparams import HyperParams
from metacog_rl.common.stl import PredicateStack, robustness_matrix, smooth_conjunction
from metacog_rl.common.trajectory import Trajectory
from metacog_rl.common.utils import grid_steps


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitnessConfig:
    """Fitness, surprise and trigger settings (the ``[fitness]`` section).

    Args:
        a: fitness discount rate (1/s)
        T: TD sampling interval (s), an integer multiple of the simulation step
        beta: threshold of the integrated surprise
        delta: surprise integration window (s)
        varpi: KL threshold
        eps: tracking envelope of the liveness predicate
        t_s: expected settling time (s)
        rm_cap: meta-reward substituted when the smooth margin is not positive
        surprise_mode: ``"signed"`` triggers on the integral of SP; ``"deterioration"`` on the integral of
            ``max(0, -SP)``, i.e. on meta-rewards above the prediction (a margin collapse)
    """

    a: float = 0.5
    T: float = 0.1
    beta: float = 0.1
    delta: float = 0.5
    varpi: float = 1.0
    eps: float = 1.5
    t_s: float = 3.0
    rm_cap: float = 1e6
    td_discount: str = "discounted"
    surprise_mode: str = "signed"
    noise_w2: float = 0.25
    signal_variance: float = 25.0
    lengthscales_x: Tuple[float, ...] = (1.0, 0.2, 0.2, 0.5)
    lengthscale_theta: float = 50.0
    rho_min: float = 0.2
    kl_points: int = 4
    contexts: int = 4
    refit_window: float = 2.0
    rearm_delay: Optional[float] = None
    monitor: bool = True
    learn_horizon: Optional[float] = None

    def __post_init__(self):
        for name in ("a", "T", "beta", "delta", "varpi", "eps", "t_s", "rm_cap", "noise_w2", "signal_variance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lengthscale_theta", "rho_min", "refit_window"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.td_discount not in ("discounted", "literal"):
            raise ValueError(f"td_discount must be 'discounted' or 'literal', got '{self.td_discount}'")
        if self.surprise_mode not in ("signed", "deterioration"):
            raise ValueError(f"surprise_mode must be 'signed' or 'deterioration', got '{self.surprise_mode}'")
        if self.kl_points < 1 or self.contexts < 1:
            raise ValueError(f"kl_points and contexts must be at least 1, got {self.kl_points}, {self.contexts}")
        if self.rearm_delay is not None and self.rearm_delay < 0:
            raise ValueError(f"rearm_delay must be non-negative, got {self.rearm_delay}")
        object.__setattr__(self, "lengthscales_x", tuple(float(v) for v in self.lengthscales_x))

    @property
    def rearm(self) -> float:
        return 2 * self.delta if self.rearm_delay is None else self.rearm_delay

    @property
    def discount(self) -> float:
        """Weight of the successor fitness in a TD relation."""
        return td_factor(self.a, self.T, self.td_discount)

    @property
    def kl_jitter(self) -> float:
        """KL covariances are those of noisy observations: ``noise_w2`` relative to the prior variance."""
        return self.noise_w2 / self.signal_variance


def meta_reward(xi_a, cfg: FitnessConfig):
    """``2 log(1 + 1/xi_a)`` for a positive smooth margin, ``rm_cap`` otherwise (vectorized)."""
    xi = np.asarray(xi_a, dtype=float)
    out = np.full(xi.shape, float(cfg.rm_cap))
    pos = xi > 0
    out[pos] = 2.0 * np.log1p(1.0 / xi[pos])
    return float(out) if out.ndim == 0 else out


def fitness_bound(eps0: float, a: float) -> float:
    """Upper bound ``(2/a) log(1 + 1/eps0)`` of the fitness when the smooth margin never drops below ``eps0``."""
    if eps0 <= 0 or a <= 0:
        raise ValueError(f"eps0 and a must be positive, got {eps0}, {a}")
    return 2.0 / a * np.log1p(1.0 / eps0)


def meta_reward_signal(traj: Trajectory, stack: PredicateStack, cfg: FitnessConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Smooth margin ``xi_a`` and meta-reward ``r_m`` at every sample of a trajectory."""
    xi = smooth_conjunction(robustness_matrix(stack, traj.states, traj.references), axis=1)
    return xi, meta_reward(xi, cfg)


def discounted_reward_integral(r_m: np.ndarray, dt: float, a: float) -> float:
    """Trapezoidal ``int e^{-a (tau - t_start)} r_m(tau) dtau`` over uniformly spaced samples."""
    return float(trapezoid(np.exp(-a * dt * np.arange(r_m.size)) * r_m, dx=dt))


def integrated_reward(traj: Trajectory, stack: PredicateStack, cfg: FitnessConfig, i: int) -> float:
    """Integrated meta-reward of interval i, ``[t0 + (i-1) T, t0 + i T]`` (i >= 1).

    Raises:
        ValueError: when the interval is not fully sampled
    """
    s = grid_steps(cfg.T, traj.dt, "fitness.T")
    start, stop = (i - 1) * s, i * s
    if i < 1 or stop >= len(traj):
        raise ValueError(f"interval {i} is not fully sampled by a trajectory of {len(traj)} samples")
    _, r_m = meta_reward_signal(traj.slice(start, stop + 1), stack, cfg)
    return discounted_reward_integral(r_m, traj.dt, cfg.a)


def interval_rewards(traj: Trajectory, stack: PredicateStack, cfg: FitnessConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Sample indices of the interval boundaries ``0, s, 2s, ...`` and the integrated reward of every interval."""
    s = grid_steps(cfg.T, traj.dt, "fitness.T")
    _, r_m = meta_reward_signal(traj, stack, cfg)
    bounds = np.arange(0, len(traj), s)
    rewards = np.array([discounted_reward_integral(r_m[b : b + s + 1], traj.dt, cfg.a) for b in bounds[:-1]])
    return bounds, rewards


def fitness_direct(traj: Trajectory, stack: PredicateStack, cfg: FitnessConfig, t: float) -> float:
    """Discounted meta-reward accumulated from ``t`` to the end of the trajectory.

    The trapezoidal rule weights the samples at ``t`` and at the trajectory end by ``dt / 2``. At the last
    sample the integral is empty and 0.0 is returned.
    """
    i = traj.index_of(t)
    if traj.t_end - traj.times[i] < 10.0 / cfg.a:
        logger.debug("fitness at t=%.3g is truncated by the trajectory end %.3g", t, traj.t_end)
    if i == len(traj) - 1:
        return 0.0
    _, r_m = meta_reward_signal(traj.slice(i, len(traj)), stack, cfg)
    return discounted_reward_integral(r_m, traj.dt, cfg.a)


def fitness_kernel(cfg: FitnessConfig, n: int, n_theta: int) -> Kernel:
    """``k_x * k_theta`` over joint inputs ``[x - r, theta]``."""
    if len(cfg.lengthscales_x) != n:
        raise ValueError(f"{len(cfg.lengthscales_x)} state lengthscales for a {n}-dimensional state")
    return joint_kernel(cfg.lengthscales_x, [cfg.lengthscale_theta] * n_theta, cfg.signal_variance)


def joint_inputs(states: np.ndarray, references: np.ndarray, theta: HyperParams) -> np.ndarray:
    """Rows ``[x - r, theta]`` of the fitness GP."""
    states = np.atleast_2d(states)
    errors = states - np.atleast_2d(references)
    return np.hstack([errors, np.tile(theta.to_vector(), (states.shape[0], 1))])


def steady_state_mean(rewards: np.ndarray, cfg: FitnessConfig) -> float:
    """Fitness of a constant interval reward equal to the mean of ``rewards``; used as the GP prior mean."""
    return float(np.mean(rewards)) / (1.0 - cfg.discount) if cfg.td_discount == "discounted" else 0.0


def fitness_segment(
    traj: Trajectory, stack: PredicateStack, theta: HyperParams, cfg: FitnessConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Joint inputs sampled every T and the integrated rewards between them."""
    if traj.references is None:
        raise ValueError("fitness learning needs a trajectory with references")
    bounds, rewards = interval_rewards(traj, stack, cfg)
    return joint_inputs(traj.states[bounds], traj.references[bounds], theta), rewards


def learn_fitness(traj: Trajectory, stack: PredicateStack, theta: HyperParams, cfg: FitnessConfig) -> GpPosterior:
    """Fits the fitness GP of ``theta`` to a closed-loop trajectory."""
    inputs, rewards = fitness_segment(traj, stack, theta, cfg)
    kernel = fitness_kernel(cfg, traj.n, theta.to_vector().size)
    return gptd_fit(inputs, rewards, kernel, cfg.noise_w2, cfg.a, cfg.T, steady_state_mean(rewards, cfg), cfg.td_discount)


def surprise(gp: GpPosterior, x_t: np.ndarray, x_tT: np.ndarray, R: float, cfg: FitnessConfig) -> float:
    """``nu(x_t) - g nu(x_{t+T}) - R`` with ``nu`` the posterior mean of the current fitness GP."""
    mean_t, _ = gp_predict(gp, x_t)
    mean_tT, _ = gp_predict(gp, x_tT)
    return mean_t - cfg.discount * mean_tT - R


class Decision(str, Enum):
    NO_ACTION = "NoAction"
    INFER_ONLY = "InferOnly"
    ADAPT = "Adapt"


class TriggerOutcome(NamedTuple):
    decision: Decision
    integral_sp: float
    min_kl: float


def trigger(
    window: SurpriseWindow,
    current_gp: GpPosterior,
    bases: BaseGpLibrary,
    cfg: FitnessConfig,
    targets: Optional[np.ndarray] = None,
) -> TriggerOutcome:
    """Adapt when the integrated surprise reaches beta and the GP is farther than varpi from every base GP.

    The outcome carries the integrated surprise and the minimum KL behind the decision. The KL is only
    computed when the surprise condition holds (``min_kl`` is NaN otherwise). Targets default to the most
    recent well-separated inducing inputs of ``current_gp``.

    Raises:
        EmptyWindowError: when the window spans less than ``delta``
    """
    if not window.is_full():
        raise EmptyWindowError(f"surprise window spans {window.span():.3g}s, needs {cfg.delta}s")
    integral = window.integral(cfg.surprise_mode)
    if integral < cfg.beta:
        return TriggerOutcome(Decision.NO_ACTION, integral, float("nan"))
    if targets is None:
        targets = spread_targets(current_gp.inducing, cfg.kl_points, current_gp.kernel)
    min_kl, _ = min_kl_to_library(current_gp, bases, targets, cfg.kl_jitter)
    decision = Decision.ADAPT if min_kl > cfg.varpi else Decision.INFER_ONLY
    return TriggerOutcome(decision, integral, min_kl)


@dataclass(frozen=True)
class MonitorRow:
    t: float
    xi_a: float
    r_m: float
    R_interval: float
    fitness_pred_mean: float
    fitness_pred_var: float
    surprise: float
    integral_sp: float
    min_kl: float
    decision: Decision
    overall_fitness: float

    HEADER = (
        "t",
        "xi_a",
        "r_m",
        "R_interval",
        "fitness_pred_mean",
        "fitness_pred_var",
        "surprise",
        "integral_sp",
        "min_kl",
        "decision",
        "overall_fitness",
    )

    def as_row(self) -> list:
        return [
            self.t,
            self.xi_a,
            self.r_m,
            self.R_interval,
            self.fitness_pred_mean,
            self.fitness_pred_var,
            self.surprise,
            self.integral_sp,
            self.min_kl,
            self.decision.value,
            self.overall_fitness,
        ]


class MetacognitiveMonitor:
    """Online monitor fed one sample at a time; evaluates fitness, surprise and the trigger every T.

    Only data up to the current sample is used. After any InferOnly or Adapt decision the window is cleared
    and the trigger stays disarmed for ``cfg.rearm`` seconds.
    """

    def __init__(
        self,
        cfg: FitnessConfig,
        stack: PredicateStack,
        bases: BaseGpLibrary,
        gp: GpPosterior,
        theta: HyperParams,
        dt: float,
        t_start: float = 0.0,
        verbose: bool = False,
        writer=None,
    ):
        """Initializes the monitor.

        Args:
            cfg: fitness settings
            stack: predicate stack (its setpoint is replaced by the current reference at every sample)
            bases: library of safe base GPs
            gp: fitness GP of the deployed hyperparameters
            theta: deployed hyperparameters
            dt: sampling step of the observed signals
            t_start: time of the first sample
            verbose: print every non-trivial decision
            writer: optional tensorboard writer
        """
        self.cfg = cfg
        self.stack = stack
        self.bases = bases
        self.gp = gp
        self.theta = theta
        self.dt = dt
        self.s = grid_steps(cfg.T, dt, "fitness.T")
        self.window = SurpriseWindow(cfg.delta, cfg.T)
        self.t_start = t_start
        self.armed_at = t_start
        self.verbose = verbose
        self.writer = writer
        self.global_step = 0

        self.states: List[np.ndarray] = []
        self.refs: List[np.ndarray] = []
        self.inputs_hist: List[np.ndarray] = []
        self.reward_hist: List[float] = []
        self.t_prev: Optional[float] = None
        self.overall_fitness = 0.0
        self.trace: List[MonitorRow] = []

    def _joint(self, x: np.ndarray, r: np.ndarray) -> np.ndarray:
        return joint_inputs(x, r, self.theta)[0]

    def observe(self, t: float, x: np.ndarray, r: np.ndarray) -> Optional[MonitorRow]:
        """Feeds one sample; returns the monitor row when it closes an interval of length T."""
        self.states.append(np.asarray(x, dtype=float).copy())
        self.refs.append(np.asarray(r, dtype=float).copy())
        if len(self.states) == 1:
            self.inputs_hist.append(self._joint(x, r))
            self.t_prev = t
            return None
        if len(self.states) < self.s + 1:
            return None

        cfg = self.cfg
        segment = Trajectory(self.t_prev, self.dt, np.array(self.states), references=np.array(self.refs))
        xi, r_m = meta_reward_signal(segment, self.stack, cfg)
        R = discounted_reward_integral(r_m, self.dt, cfg.a)
        z_prev, z_now = self.inputs_hist[-1], self._joint(x, r)
        sp = surprise(self.gp, z_prev, z_now, R, cfg)
        self.window.add(t, sp)
        self.overall_fitness += np.exp(-cfg.a * (self.t_prev - self.t_start)) * R
        self.inputs_hist.append(z_now)
        self.reward_hist.append(R)
        mean, var = gp_predict(self.gp, z_now)

        decision, min_kl = Decision.NO_ACTION, float("nan")
        integral = self.window.integral(cfg.surprise_mode)
        if t >= self.armed_at - 1e-9 and self.window.is_full() and integral >= cfg.beta:
            reinferred = self.reinfer()
            outcome = trigger(self.window, reinferred, self.bases, cfg)
            decision, min_kl = outcome.decision, outcome.min_kl
            if decision == Decision.INFER_ONLY:
                self.gp = reinferred
            self.disarm(t)
            if self.verbose:
                print(f"t={t:.3f}s: {decision.value} (integral {integral:.3g}, min KL {min_kl:.3g})")
            logger.info("t=%.3fs: %s (integral %.3g, min KL %.3g)", t, decision.value, integral, min_kl)

        row = MonitorRow(t, float(xi[-1]), float(r_m[-1]), R, mean, var, sp, integral, min_kl, decision, self.overall_fitness)
        self.trace.append(row)
        self._report(row)
        self.states, self.refs = self.states[-1:], self.refs[-1:]
        self.t_prev = t
        return row

    def reinfer(self) -> GpPosterior:
        """Fitness GP re-inferred from the last ``refit_window`` seconds of monitored data."""
        k = max(1, int(round(self.cfg.refit_window / self.cfg.T)))
        rewards = np.array(self.reward_hist[-k:])
        inputs = np.array(self.inputs_hist[-(rewards.size + 1) :])
        return gptd_fit(
            inputs,
            rewards,
            self.gp.kernel,
            self.cfg.noise_w2,
            self.cfg.a,
            self.cfg.T,
            steady_state_mean(rewards, self.cfg),
            self.cfg.td_discount,
        )

    def disarm(self, t: float):
        self.window.reset()
        self.armed_at = t + self.cfg.rearm

    def adopt(self, gp: GpPosterior, theta: HyperParams, t: float):
        """Switches to a redeployed policy: its hyperparameters and fitness GP; the trigger is re-armed later."""
        self.gp = gp
        self.theta = theta
        self.inputs_hist[-1] = self._joint(self.states[-1], self.refs[-1])
        self.disarm(t)

    def recent_segment(self) -> Tuple[np.ndarray, np.ndarray]:
        """Joint inputs and rewards of the last ``refit_window`` seconds."""
        k = max(1, int(round(self.cfg.refit_window / self.cfg.T)))
        rewards = np.array(self.reward_hist[-k:])
        return np.array(self.inputs_hist[-(rewards.size + 1) :]), rewards

    def _report(self, row: MonitorRow):
        self.global_step += 1
        if self.writer is not None:
            self.writer.add_scalar("monitor/surprise", row.surprise, self.global_step)
            self.writer.add_scalar("monitor/integral_sp", row.integral_sp, self.global_step)
            self.writer.add_scalar("monitor/fitness_pred_mean", row.fitness_pred_mean, self.global_step)
            self.writer.add_scalar("monitor/overall_fitness", row.overall_fitness, self.global_step)


def monitor_rows(trace: Sequence[MonitorRow]) -> List[list]:
    return [row.as_row() for row in trace]
