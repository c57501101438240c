"""Lateral vehicle dynamics, scenario schedules and the lane-change environment."""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import gymnasium as gym
import numpy as np
from gymnasium import spaces

from metacog_rl.common.errors import SimulationDivergedError
from metacog_rl.common.stl import PredicateStack, robustness_vector
from metacog_rl.common.trajectory import Trajectory


logger = logging.getLogger(__name__)

BLOW_UP = 1e6


@dataclass(frozen=True, eq=False)
class LtiPlant:
    """Linear time-invariant plant ``x' = A x + B u``."""

    A: np.ndarray
    B: np.ndarray
    label: str = "plant"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ValueError(f"inconsistent plant dimensions A{A.shape}, B{B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("plant matrices must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def deriv(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ x + self.B @ u


@dataclass(frozen=True)
class VehicleParams:
    """Lateral bicycle-model parameters (SI units)."""

    m_T: float = 1300.0
    I_T: float = 10000.0
    v_T: float = 16.0
    k_f: float = 91000.0
    k_r: float = 91000.0
    a: float = 1.6154
    b: float = 1.8846

    def __post_init__(self):
        for name in ("m_T", "I_T", "v_T", "k_f", "k_r", "a", "b"):
            if not getattr(self, name) > 0:
                raise ValueError(f"vehicle parameter {name} must be positive, got {getattr(self, name)}")


def _lateral_blocks(p: VehicleParams, v: float) -> Tuple[float, float, float, float]:
    mv = p.m_T * v
    a22 = -(p.k_f + p.k_r) / mv
    a23 = -(mv + (p.a * p.k_f - p.b * p.k_r) / v) / mv
    a33 = -(p.a**2 * p.k_f + p.b**2 * p.k_r) / (p.I_T * v)
    b2 = p.k_f / mv
    return a22, a23, a33, b2


def vehicle_matrices(p: VehicleParams) -> LtiPlant:
    """Steering dynamics with state ``[y, psi, alpha, psi_dot]`` and input the steering angle."""
    a22, a23, a33, b2 = _lateral_blocks(p, p.v_T)
    A = np.array(
        [
            [0.0, p.v_T, p.v_T, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, a22, a23],
            [0.0, 0.0, -(p.a * p.k_f - p.b * p.k_r) / p.I_T, a33],
        ]
    )
    B = np.array([[0.0], [0.0], [b2], [p.a * p.k_f / p.I_T]])
    return LtiPlant(A, B, label="nominal")


def vehicle_perturbation(p: VehicleParams, dv: float) -> Tuple[np.ndarray, np.ndarray]:
    """``(dA, dB)`` of a speed change ``dv``; the yaw-angle row and the yaw-rate input entry stay zero."""
    if dv == 0:
        raise ValueError("speed change dv must be non-zero")
    a22, a23, a33, b2 = _lateral_blocks(p, dv)
    dA = np.array(
        [
            [0.0, dv, dv, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, a22, a23],
            [0.0, 0.0, 0.0, a33],
        ]
    )
    dB = np.array([[0.0], [0.0], [b2], [0.0]])
    return dA, dB


def perturbed_matrices(p: VehicleParams, dv: float) -> LtiPlant:
    """Nominal plant plus the speed-change perturbation."""
    nominal = vehicle_matrices(p)
    dA, dB = vehicle_perturbation(p, dv)
    return LtiPlant(nominal.A + dA, nominal.B + dB, label="perturbed")


def actuator_loss(plant: LtiPlant, gain: float) -> LtiPlant:
    """The plant with only a fraction ``gain`` of its input effectiveness left."""
    if not 0 < gain <= 1:
        raise ValueError(f"actuator gain must be in (0, 1], got {gain}")
    return LtiPlant(plant.A, gain * plant.B, label="perturbed")


def rk4_step(f: Callable[[float, np.ndarray], np.ndarray], t: float, x: np.ndarray, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step of ``x' = f(t, x)``."""
    k1 = f(t, x)
    k2 = f(t + dt / 2, x + dt / 2 * k1)
    k3 = f(t + dt / 2, x + dt / 2 * k2)
    k4 = f(t + dt, x + dt * k3)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


@dataclass(frozen=True, eq=False)
class ScenarioSchedule:
    """Horizon, step size, setpoint plan and plant-replacement events of one run.

    A setpoint switch blends from the previous value with a half-cosine over ``switch_duration`` seconds
    (0 gives a step).
    """

    horizon: float
    dt: float
    setpoint_plan: Sequence[Tuple[float, np.ndarray]]
    events: Sequence[Tuple[float, LtiPlant]] = ()
    stl_spec: str = "T"
    seed: int = 0
    switch_duration: float = 0.0
    x0: Optional[np.ndarray] = None
    x0_noise: float = 0.0
    plan: List[Tuple[float, np.ndarray]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dt <= 0 or self.horizon <= 0:
            raise ValueError(f"dt and horizon must be positive, got {self.dt}, {self.horizon}")
        plan = [(float(t), np.asarray(r, dtype=float).ravel()) for t, r in self.setpoint_plan]
        if not plan:
            raise ValueError("setpoint plan must hold at least one entry")
        if plan[0][0] != 0.0:
            raise ValueError("the setpoint plan must start at t=0")
        self._check_times([t for t, _ in plan], "setpoint plan")
        self._check_times([t for t, _ in self.events], "event")
        if self.switch_duration < 0:
            raise ValueError(f"switch_duration must be non-negative, got {self.switch_duration}")
        object.__setattr__(self, "plan", plan)
        object.__setattr__(self, "events", tuple(self.events))

    def _check_times(self, times: Sequence[float], what: str):
        for t in times:
            if t < 0 or t > self.horizon:
                raise ValueError(f"{what} time {t} outside [0, {self.horizon}]")
        if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
            raise ValueError(f"{what} times must be strictly increasing, got {list(times)}")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def step_of(self, t: float) -> int:
        """Grid index a scheduled time snaps to."""
        return int(round(t / self.dt))

    def reference(self, t: float) -> np.ndarray:
        """Setpoint at time ``t``."""
        i = 0
        for k, (t_from, _) in enumerate(self.plan):
            if t_from <= t + 1e-12:
                i = k
        t_from, r = self.plan[i]
        if i == 0 or self.switch_duration == 0 or t >= t_from + self.switch_duration:
            return r.copy()
        r_prev = self.plan[i - 1][1]
        s = (t - t_from) / self.switch_duration
        w = 0.5 * (1.0 - np.cos(np.pi * s))
        return r_prev + w * (r - r_prev)

    def initial_state(self) -> np.ndarray:
        return self.plan[0][1].copy() if self.x0 is None else np.asarray(self.x0, dtype=float).copy()

    def window(self, t_start: float, horizon: float, x0: np.ndarray) -> "ScenarioSchedule":
        """Event-free schedule starting at ``t_start`` of this one, from state ``x0``.

        The setpoint active at ``t_start`` is held at its target value; later switches keep their offsets.
        """
        t_start = float(t_start)
        active = [r for t, r in self.plan if t <= t_start + 1e-12][-1]
        later = [(t - t_start, r) for t, r in self.plan if t_start + 1e-12 < t < t_start + horizon]
        return ScenarioSchedule(
            horizon=horizon,
            dt=self.dt,
            setpoint_plan=[(0.0, active)] + later,
            stl_spec=self.stl_spec,
            seed=self.seed,
            switch_duration=self.switch_duration,
            x0=np.asarray(x0, dtype=float),
        )


class LaneChangeEnv(gym.Env):
    """Vehicle (or any LTI plant) following a setpoint schedule.

    Observations are ``[x, r(t)]``, actions the plant input held constant over one step ``dt``.
    The vector reward holds the robustness of every predicate of the stack at the new state.
    """

    metadata = {"render_modes": []}

    def __init__(self, plant: LtiPlant, schedule: ScenarioSchedule, stack: Optional[PredicateStack] = None):
        """Initializes the environment.

        Args:
            plant: plant in force at t=0
            schedule: horizon, setpoints and plant-replacement events
            stack: predicates whose robustness forms the reward vector
        """
        self.base_plant = plant
        self.schedule = schedule
        self.stack = stack
        n, m = plant.n, plant.m
        self.observation_space = spaces.Box(-np.inf, np.inf, shape=(2 * n,), dtype=np.float64)
        self.action_space = spaces.Box(-np.inf, np.inf, shape=(m,), dtype=np.float64)
        reward_dim = stack.size if stack is not None else 1
        self.reward_space = spaces.Box(-np.inf, np.inf, shape=(reward_dim,), dtype=np.float64)
        self._events = {schedule.step_of(t): p for t, p in schedule.events}
        self.k = 0
        self.plant = plant
        self.x = schedule.initial_state()

    @property
    def t(self) -> float:
        return self.k * self.schedule.dt

    def _apply_events(self):
        if self.k in self._events:
            self.plant = self._events[self.k]
            logger.info("plant replaced by '%s' at t=%.6g", self.plant.label, self.t)

    def _obs(self) -> np.ndarray:
        return np.concatenate([self.x, self.schedule.reference(self.t)])

    def _info(self) -> dict:
        return {"t": self.t, "plant_label": self.plant.label}

    def reset(self, *, seed: Optional[int] = None, options: Optional[dict] = None):
        super().reset(seed=seed if seed is not None else self.schedule.seed)
        self.k = 0
        self.plant = self.base_plant
        self.x = self.schedule.initial_state()
        if self.schedule.x0_noise > 0:
            self.x = self.x + self.schedule.x0_noise * self.np_random.standard_normal(self.x.shape)
        self._apply_events()
        return self._obs(), self._info()

    def step(self, action):
        u = np.asarray(action, dtype=float).reshape(self.plant.m)
        plant = self.plant
        self.x = rk4_step(lambda t, x: plant.deriv(x, u), self.t, self.x, self.schedule.dt)
        self.k += 1
        norm = float(np.linalg.norm(self.x))
        if not np.isfinite(norm) or norm > BLOW_UP:
            raise SimulationDivergedError(self.t, norm)
        self._apply_events()
        r = self.schedule.reference(self.t)
        if self.stack is not None:
            reward = robustness_vector(self.stack.with_setpoint(r), self.x)
        else:
            reward = np.array([-np.linalg.norm(self.x - r)])
        truncated = self.k >= self.schedule.n_steps
        return self._obs(), reward, False, truncated, self._info()


Controller = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
Observer = Callable[[float, np.ndarray, np.ndarray, str], Optional[Controller]]


def simulate(
    plant: LtiPlant,
    controller: Controller,
    schedule: ScenarioSchedule,
    stack: Optional[PredicateStack] = None,
    observer: Optional[Observer] = None,
) -> Trajectory:
    """Runs one closed-loop episode with zero-order-hold inputs.

    Args:
        plant: plant in force at t=0 (later plants come from the schedule's events)
        controller: ``controller(t, x, r) -> u``
        schedule: scenario schedule
        stack: optional predicate stack forwarded to the environment
        observer: called as ``observer(t, x, r, plant_label)`` at every sample before the input is computed;
            a returned controller replaces the current one from that sample on

    Returns:
        Trajectory: states, inputs, references and plant labels on the grid ``k * dt``
    """
    env = LaneChangeEnv(plant, schedule, stack)
    n = plant.n
    obs, info = env.reset()
    states, inputs, refs, labels = [], [], [], []
    done = False
    while True:
        x, r = obs[:n], obs[n:]
        if observer is not None:
            replacement = observer(info["t"], x, r, info["plant_label"])
            if replacement is not None:
                controller = replacement
        u = np.asarray(controller(info["t"], x, r), dtype=float).reshape(plant.m)
        states.append(x)
        inputs.append(u)
        refs.append(r)
        labels.append(info["plant_label"])
        if done:
            break
        obs, _, terminated, truncated, info = env.step(u)
        done = terminated or truncated
    return Trajectory(0.0, schedule.dt, np.array(states), np.array(inputs), np.array(refs), labels)


def simulate_lti(plant: LtiPlant, x0: np.ndarray, dt: float, n_steps: int, u: Optional[np.ndarray] = None) -> np.ndarray:
    """States of the plant under a constant input, ``n_steps + 1`` samples."""
    u = np.zeros(plant.m) if u is None else np.asarray(u, dtype=float)
    xs = [np.asarray(x0, dtype=float)]
    for k in range(n_steps):
        xs.append(rk4_step(lambda t, x: plant.deriv(x, u), k * dt, xs[-1], dt))
    return np.array(xs)
