"""Off-policy, data-reuse policy iteration for discounted quadratic setpoint tracking.

One exploration log recorded under a stabilizing behavior policy is enough to compute the optimal tracking
policy of any reward hyperparameters: the regression is rebuilt from the raw samples for each candidate.

The regression basis is ``Z = [x - r; 1]``: the value is ``Z^T P Z`` with ``P`` encoded by the distinct
monomials ``Z_i Z_j (i <= j)`` and the policy is ``u = W^T Z``.
"""
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple
from typing_extensions import override

import gymnasium as gym
import numpy as np
from scipy.integrate import simpson, trapezoid
from scipy.linalg import block_diag

from metacog_rl.common.errors import (
    DataCountError,
    NonConvergenceError,
    RankDeficiencyError,
    SimulationDivergedError,
)
from metacog_rl.common.hyperparams import HyperParams
from metacog_rl.common.metacog_algorithm import ControlPolicy, MetacogAgent
from metacog_rl.common.utils import grid_steps
from metacog_rl.envs.lane_change import BLOW_UP, LtiPlant, rk4_step


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAX_COND = 1e10


@dataclass(frozen=True)
class RlConfig:
    """Low-level learner settings (the ``[rl]`` section).

    Args:
        gamma: discount rate (1/s)
        N: number of recorded intervals
        T_int: interval length (s)
        eps: policy-iteration stopping threshold
        max_iter: policy-iteration cap
        input_scale: typical input magnitude
        noise_scale: exploration amplitude of the first log, relative to ``input_scale``
        adapt_noise_scale: exploration amplitude of the logs recorded on adaptation
        q: diagonal of the initial state weight
        r: diagonal of the initial input weight
        behavior_q: state weight of the LQR behavior policy (nominal model) of every recorded log
        behavior_r: input weight of the LQR behavior policy (nominal model) of every recorded log
        quadrature: 'simpson' or 'trapezoid'
        n_sinusoids: sinusoids per input channel (``2 (n + 1)`` when None)
    """

    gamma: float = 0.1
    N: int = 120
    T_int: float = 0.1
    eps: float = 1e-6
    max_iter: int = 30
    input_scale: float = 0.1
    noise_scale: float = 0.1
    adapt_noise_scale: float = 0.05
    q: Tuple[float, ...] = (10.0, 10.0, 10.0, 10.0)
    r: Tuple[float, ...] = (2.0,)
    behavior_q: float = 1.0
    behavior_r: float = 1.0
    quadrature: str = "simpson"
    n_sinusoids: Optional[int] = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.N < 1 or self.max_iter < 1:
            raise ValueError(f"N and max_iter must be at least 1, got {self.N}, {self.max_iter}")
        for name in ("T_int", "eps", "input_scale", "behavior_q", "behavior_r"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.noise_scale < 0 or self.adapt_noise_scale < 0:
            raise ValueError(f"noise scales must be non-negative, got {self.noise_scale}, {self.adapt_noise_scale}")
        if self.quadrature not in ("simpson", "trapezoid"):
            raise ValueError(f"quadrature must be 'simpson' or 'trapezoid', got '{self.quadrature}'")
        object.__setattr__(self, "q", tuple(float(v) for v in self.q))
        object.__setattr__(self, "r", tuple(float(v) for v in self.r))

    def sinusoid_count(self, n: int) -> int:
        return 2 * (n + 1) if self.n_sinusoids is None else self.n_sinusoids

    def exploration(self, n: int, m: int, seed: int, adapt: bool = False) -> "ExplorationNoise":
        """Seeded sum-of-sinusoids exploration signal of the first log, or of an adaptation log."""
        scale = self.adapt_noise_scale if adapt else self.noise_scale
        return ExplorationNoise.sinusoids(m, self.sinusoid_count(n), scale * self.input_scale, seed)


def basis_sizes(n: int, m: int) -> Tuple[int, int]:
    """``(l1, l2)``: number of value monomials and of policy features for state dimension ``n``."""
    l2 = n + 1
    return l2 * (l2 + 1) // 2, l2


def required_intervals(n: int, m: int) -> int:
    l1, l2 = basis_sizes(n, m)
    return l1 + m * l2


def augmented_basis(states: np.ndarray, setpoint: np.ndarray) -> np.ndarray:
    """Rows ``[x - r; 1]`` for every state row."""
    states = np.atleast_2d(states)
    return np.hstack([states - np.asarray(setpoint, dtype=float), np.ones((states.shape[0], 1))])


def phi1(Z: np.ndarray) -> np.ndarray:
    """Distinct quadratic monomials ``Z_i Z_j`` with ``i <= j`` along the last axis."""
    iu, ju = np.triu_indices(Z.shape[-1])
    return Z[..., iu] * Z[..., ju]


def value_matrix(w_v: np.ndarray, l2: int) -> np.ndarray:
    """Symmetric ``P`` with ``Z^T P Z = w_v^T phi1(Z)``."""
    iu, ju = np.triu_indices(l2)
    P = np.zeros((l2, l2))
    P[iu, ju] = w_v
    return 0.5 * (P + P.T)


@dataclass(frozen=True)
class AugmentedState:
    """Tracking error ``e_d = x - r`` and setpoint ``r``; ``X = [e_d; r]``."""

    e_d: np.ndarray
    r: np.ndarray

    @classmethod
    def from_state(cls, x: np.ndarray, r: np.ndarray) -> "AugmentedState":
        x = np.asarray(x, dtype=float).ravel()
        r = np.asarray(r, dtype=float).ravel()
        if x.shape != r.shape:
            raise ValueError(f"state has dimension {x.size}, setpoint {r.size}")
        return cls(x - r, r)

    @property
    def X(self) -> np.ndarray:
        return np.concatenate([self.e_d, self.r])

    @property
    def Z(self) -> np.ndarray:
        return np.append(self.e_d, 1.0)


@dataclass(frozen=True, eq=False)
class PolicyWeights:
    """Value weights ``w_v`` (length l1) and policy weights ``w_bar`` (l2 x m)."""

    w_v: np.ndarray
    w_bar: np.ndarray

    def __post_init__(self):
        w_v = np.asarray(self.w_v, dtype=float).ravel()
        w_bar = np.atleast_2d(np.asarray(self.w_bar, dtype=float))
        l2 = w_bar.shape[0]
        if w_v.size != l2 * (l2 + 1) // 2:
            raise ValueError(f"{w_v.size} value weights do not match a policy with {l2} features")
        object.__setattr__(self, "w_v", w_v)
        object.__setattr__(self, "w_bar", w_bar)

    @property
    def l1(self) -> int:
        return self.w_v.size

    @property
    def l2(self) -> int:
        return self.w_bar.shape[0]

    @property
    def n(self) -> int:
        return self.l2 - 1

    @property
    def m(self) -> int:
        return self.w_bar.shape[1]

    @property
    def P(self) -> np.ndarray:
        return value_matrix(self.w_v, self.l2)

    @property
    def gain(self) -> np.ndarray:
        """Feedback on the tracking error, ``m x n`` (``-K`` of an LQR)."""
        return self.w_bar[: self.n].T

    @property
    def bias(self) -> np.ndarray:
        return self.w_bar[self.n]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.w_v, self.w_bar.ravel()])

    def act(self, x: np.ndarray, r: np.ndarray) -> np.ndarray:
        """``u = W^T [x - r; 1]``."""
        return self.w_bar.T @ AugmentedState.from_state(x, r).Z

    def value(self, x: np.ndarray, r: np.ndarray) -> float:
        return float(self.w_v @ phi1(AugmentedState.from_state(x, r).Z))

    def to_dict(self) -> dict:
        return {"w_v": self.w_v.tolist(), "w_bar": self.w_bar.tolist()}


@dataclass(frozen=True, eq=False)
class BehaviorPolicy:
    """Affine state feedback ``u = gain x + offset`` used while recording."""

    gain: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        gain = np.atleast_2d(np.asarray(self.gain, dtype=float))
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(gain.shape[0]))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.gain @ x + self.offset

    @classmethod
    def from_lqr(cls, K: np.ndarray, setpoint: np.ndarray) -> "BehaviorPolicy":
        """``u = -K (x - r)``."""
        K = np.atleast_2d(K)
        return cls(-K, K @ np.asarray(setpoint, dtype=float))

    @classmethod
    def from_weights(cls, weights: PolicyWeights, setpoint: np.ndarray) -> "BehaviorPolicy":
        """The deployed policy ``W^T [x - r; 1]`` at a fixed setpoint."""
        return cls(weights.gain, weights.bias - weights.gain @ np.asarray(setpoint, dtype=float))

    def in_basis(self, setpoint: np.ndarray) -> np.ndarray:
        """Policy weights ``W`` (l2 x m) of this feedback in the basis ``[x - r; 1]``."""
        bias = self.gain @ np.asarray(setpoint, dtype=float) + self.offset
        return np.vstack([self.gain.T, bias[None, :]])

    def to_dict(self) -> dict:
        return {"gain": self.gain.tolist(), "offset": self.offset.tolist()}


@dataclass(frozen=True, eq=False)
class ExplorationNoise:
    """Sum of sinusoids per input, ``e_j(t) = amplitude_j * mean_s sin(2 pi f_js t + phase_js)``."""

    frequencies: np.ndarray
    phases: np.ndarray
    amplitude: np.ndarray

    def __post_init__(self):
        freqs = np.atleast_2d(np.asarray(self.frequencies, dtype=float))
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "phases", np.asarray(self.phases, dtype=float).reshape(freqs.shape))
        object.__setattr__(self, "amplitude", np.broadcast_to(np.asarray(self.amplitude, dtype=float), freqs.shape[:1]).copy())

    @classmethod
    def sinusoids(
        cls, m: int, n_sinusoids: int, amplitude: float, seed: int, f_lo: float = 0.1, f_hi: float = 5.0
    ) -> "ExplorationNoise":
        """Frequencies drawn once in ``[f_lo, f_hi]`` Hz with random phases."""
        rng = np.random.default_rng(seed)
        freqs = np.sort(rng.uniform(f_lo, f_hi, size=(m, n_sinusoids)), axis=1)
        phases = rng.uniform(0.0, 2 * np.pi, size=(m, n_sinusoids))
        return cls(freqs, phases, np.full(m, amplitude))

    @classmethod
    def zero(cls, m: int) -> "ExplorationNoise":
        return cls(np.zeros((m, 1)), np.zeros((m, 1)), np.zeros(m))

    @property
    def m(self) -> int:
        return self.frequencies.shape[0]

    def __call__(self, t: float) -> np.ndarray:
        return self.amplitude * np.mean(np.sin(2 * np.pi * self.frequencies * t + self.phases), axis=1)

    def to_dict(self) -> dict:
        return {
            "frequencies": self.frequencies.tolist(),
            "phases": self.phases.tolist(),
            "amplitude": self.amplitude.tolist(),
        }


@dataclass(frozen=True, eq=False)
class DataLog:
    """Raw ``x(t)``, ``u(t)`` samples of N consecutive intervals of length ``T_int``.

    Samples are stored contiguously (``N * s + 1`` rows with ``s = T_int / dt``); interval ``i`` spans rows
    ``i*s .. (i+1)*s``. ``u`` already contains the exploration noise.
    """

    dt: float
    T_int: float
    gamma: float
    states: np.ndarray
    inputs: np.ndarray
    behavior: BehaviorPolicy
    t0: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        inputs = np.asarray(self.inputs, dtype=float).reshape(states.shape[0], -1)
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        s = grid_steps(self.T_int, self.dt, "T_int")
        if (states.shape[0] - 1) % s != 0 or states.shape[0] < s + 1:
            raise ValueError(f"{states.shape[0]} samples do not form whole intervals of {s} steps")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def steps_per_interval(self) -> int:
        return grid_steps(self.T_int, self.dt, "T_int")

    @property
    def N(self) -> int:
        return (self.states.shape[0] - 1) // self.steps_per_interval

    @property
    def l1(self) -> int:
        return basis_sizes(self.n, self.m)[0]

    @property
    def l2(self) -> int:
        return basis_sizes(self.n, self.m)[1]

    def interval_index(self) -> np.ndarray:
        """``(N, s + 1)`` row indices of every interval."""
        s = self.steps_per_interval
        return s * np.arange(self.N)[:, None] + np.arange(s + 1)[None, :]

    def select(self, start: int, stop: int) -> "DataLog":
        """Intervals ``start .. stop - 1`` as a new log."""
        if not 0 <= start < stop <= self.N:
            raise ValueError(f"interval range [{start}, {stop}) outside [0, {self.N})")
        s = self.steps_per_interval
        rows = slice(start * s, stop * s + 1)
        return DataLog(
            self.dt,
            self.T_int,
            self.gamma,
            self.states[rows],
            self.inputs[rows],
            self.behavior,
            self.t0 + start * self.T_int,
            dict(self.meta),
        )

    def subset(self, n_intervals: int) -> "DataLog":
        """The first ``n_intervals`` intervals."""
        return self.select(0, n_intervals)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "n": self.n,
            "m": self.m,
            "dt": self.dt,
            "gamma": self.gamma,
            "N": self.N,
            "T_int": self.T_int,
            "t0": self.t0,
            "behavior": self.behavior.to_dict(),
            "meta": self.meta,
            "states": self.states.tolist(),
            "inputs": self.inputs.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "DataLog":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported data log format version {d.get('format_version')}")
        log = cls(
            dt=d["dt"],
            T_int=d["T_int"],
            gamma=d["gamma"],
            states=np.array(d["states"], dtype=float).reshape(-1, d["n"]),
            inputs=np.array(d["inputs"], dtype=float).reshape(-1, d["m"]),
            behavior=BehaviorPolicy(np.array(d["behavior"]["gain"]), np.array(d["behavior"]["offset"])),
            t0=d["t0"],
            meta=d.get("meta", {}),
        )
        if log.N != d["N"]:
            raise ValueError(f"header announces {d['N']} intervals, samples hold {log.N}")
        return log

    @classmethod
    def from_json(cls, text: str) -> "DataLog":
        return cls.from_dict(json.loads(text))


def collect_data(
    plant: LtiPlant,
    behavior: BehaviorPolicy,
    noise: ExplorationNoise,
    theta0: HyperParams,
    N: int,
    T_int: float,
    dt: float,
    gamma: float,
    x0: Optional[np.ndarray] = None,
    t0: float = 0.0,
) -> DataLog:
    """Records N intervals of the plant driven by ``behavior(x) + noise(t)``.

    The behavior input and the noise are evaluated at every Runge-Kutta stage, so the recorded ``u`` is the
    input actually applied at each sample.

    Args:
        plant: plant to excite
        behavior: stabilizing affine feedback
        noise: exploration signal
        theta0: hyperparameters whose setpoint is the default initial state
        N: number of intervals
        T_int: interval length (s)
        dt: integration step (s)
        gamma: discount rate stored with the log
        x0: initial state (default: the setpoint of ``theta0``)
        t0: start time of the noise signal

    Raises:
        DataCountError: when N is below ``l1 + m * l2``
        SimulationDivergedError: when the state norm exceeds the blow-up bound
    """
    n, m = plant.n, plant.m
    if theta0.n != n or theta0.m != m:
        raise ValueError(f"hyperparameters are for n={theta0.n}, m={theta0.m}; plant has n={n}, m={m}")
    required = required_intervals(n, m)
    if N < required:
        raise DataCountError(required, N)
    s = grid_steps(T_int, dt, "T_int")
    x = theta0.setpoint.copy() if x0 is None else np.asarray(x0, dtype=float).copy()

    def input_at(t, x):
        return behavior(x) + noise(t)

    def f(t, x):
        return plant.deriv(x, input_at(t, x))

    L = N * s + 1
    states = np.empty((L, n))
    inputs = np.empty((L, m))
    states[0], inputs[0] = x, input_at(t0, x)
    for k in range(L - 1):
        t = t0 + k * dt
        x = rk4_step(f, t, x, dt)
        norm = float(np.linalg.norm(x))
        if not np.isfinite(norm) or norm > BLOW_UP:
            raise SimulationDivergedError(t + dt, norm)
        states[k + 1], inputs[k + 1] = x, input_at(t + dt, x)

    logger.info("recorded %d intervals of %.3g s on plant '%s'", N, T_int, plant.label)
    meta = {"plant_label": plant.label, "setpoint": theta0.setpoint.tolist(), "noise": noise.to_dict()}
    return DataLog(dt, T_int, gamma, states, inputs, behavior, t0, meta)


def discounted_integrals(samples: np.ndarray, dt: float, gamma: float, quadrature: str = "simpson") -> np.ndarray:
    """``int e^{-gamma (tau - t_start)} y(tau) dtau`` of every interval.

    Args:
        samples: ``(N, s + 1, k)`` samples of each interval
        dt: sample spacing
        gamma: discount rate
        quadrature: 'simpson' or 'trapezoid'

    Returns:
        ``(N, k)`` integrals
    """
    weights = np.exp(-gamma * dt * np.arange(samples.shape[1]))
    integrand = samples * weights[None, :, None]
    if quadrature == "simpson":
        return simpson(integrand, dx=dt, axis=1)
    if quadrature == "trapezoid":
        return trapezoid(integrand, dx=dt, axis=1)
    raise ValueError(f"quadrature must be 'simpson' or 'trapezoid', got '{quadrature}'")


@dataclass(frozen=True, eq=False)
class IntervalIntegrals:
    """Policy-independent parts of the regression for one setpoint."""

    delta_phi: np.ndarray
    I_zz: np.ndarray
    I_zu: np.ndarray


def interval_integrals(log: DataLog, theta: HyperParams, quadrature: str = "simpson") -> IntervalIntegrals:
    """Discounted value differences and Kronecker integrals, recomputed from the raw samples for ``theta``."""
    if theta.n != log.n or theta.m != log.m:
        raise ValueError(f"hyperparameters are for n={theta.n}, m={theta.m}; log has n={log.n}, m={log.m}")
    Z = augmented_basis(log.states, theta.setpoint)
    idx = log.interval_index()
    N, s1 = idx.shape
    Zi, Ui = Z[idx], log.inputs[idx]
    zz = np.einsum("nta,ntb->ntab", Zi, Zi).reshape(N, s1, -1)
    zu = np.einsum("nta,ntb->ntab", Zi, Ui).reshape(N, s1, -1)
    phi = phi1(Z[:: log.steps_per_interval])
    delta_phi = np.exp(-log.gamma * log.T_int) * phi[1:] - phi[:-1]
    return IntervalIntegrals(
        delta_phi,
        discounted_integrals(zz, log.dt, log.gamma, quadrature),
        discounted_integrals(zu, log.dt, log.gamma, quadrature),
    )


def build_regressors(
    log: DataLog,
    theta: HyperParams,
    w_bar_k: np.ndarray,
    quadrature: str = "simpson",
    integrals: Optional[IntervalIntegrals] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Least-squares system ``Theta_k w = Xi_k`` of one policy-iteration step.

    Row i reads ``e^{-gamma T} phi1(Z_i) - phi1(Z_{i-1})`` followed by
    ``2 int e^{-gamma s} kron(Z, R (u - W_k^T Z))``; ``Xi_i = -int e^{-gamma s} Z^T (Qbar + W_k R W_k^T) Z``.

    Returns:
        (Theta_k, Xi_k) with shapes ``(N, l1 + m l2)`` and ``(N,)``
    """
    data = integrals if integrals is not None else interval_integrals(log, theta, quadrature)
    l2, m = log.l2, log.m
    W = np.asarray(w_bar_k, dtype=float).reshape(l2, m)
    R = theta.R
    eye = np.eye(l2)
    linear = 2.0 * (data.I_zu @ np.kron(eye, R) - data.I_zz @ np.kron(eye, W @ R))
    Q_bar = block_diag(theta.Q, np.zeros((1, 1)))
    Xi = -data.I_zz @ (Q_bar + W @ R @ W.T).ravel()
    return np.hstack([data.delta_phi, linear]), Xi


def policy_iteration_step(Theta: np.ndarray, Xi: np.ndarray, l2: int, m: int, max_cond: float = MAX_COND) -> PolicyWeights:
    """Least-squares solve of one policy-iteration step via column equilibration and SVD.

    Raises:
        RankDeficiencyError: fewer rows than unknowns, or condition number at least ``max_cond``
    """
    Theta = np.atleast_2d(np.asarray(Theta, dtype=float))
    Xi = np.asarray(Xi, dtype=float).ravel()
    N, p = Theta.shape
    l1 = l2 * (l2 + 1) // 2
    if p != l1 + m * l2:
        raise ValueError(f"regressor has {p} columns, expected {l1 + m * l2}")
    if Xi.size != N:
        raise ValueError(f"regressor has {N} rows but {Xi.size} targets")
    scale = np.linalg.norm(Theta, axis=0)
    scale[scale == 0] = 1.0
    scaled = Theta / scale
    sv = np.linalg.svd(scaled, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 else float("inf")
    if N < p or not cond < max_cond:
        raise RankDeficiencyError(int(np.linalg.matrix_rank(scaled)), N, p, cond)
    y, *_ = np.linalg.lstsq(scaled, Xi, rcond=None)
    w = y / scale
    return PolicyWeights(w[:l1], w[l1:].reshape(l2, m))


def solve_policy(
    log: DataLog,
    theta: HyperParams,
    eps: float = 1e-6,
    max_iter: int = 30,
    w_bar0: Optional[np.ndarray] = None,
    quadrature: str = "simpson",
    callback: Optional[Callable[[int, PolicyWeights, float], None]] = None,
) -> Tuple[PolicyWeights, int]:
    """Policy iteration on the recorded log until ``||w_v,k - w_v,k-1|| <= eps``.

    Args:
        log: exploration log (reused as is for every theta)
        theta: reward hyperparameters
        eps: stopping threshold on the value-weight change (the previous weights start at zero)
        max_iter: iteration cap
        w_bar0: initial evaluated policy (default: the behavior policy of the log)
        quadrature: 'simpson' or 'trapezoid'
        callback: called as ``callback(k, weights, change)`` after every iteration

    Returns:
        (weights, iterations)

    Raises:
        NonConvergenceError: at ``max_iter``, carrying the sequence of changes
    """
    data = interval_integrals(log, theta, quadrature)
    W = log.behavior.in_basis(theta.setpoint) if w_bar0 is None else np.asarray(w_bar0, dtype=float).reshape(log.l2, log.m)
    w_prev = np.zeros(log.l1)
    changes = []
    for k in range(1, max_iter + 1):
        Theta, Xi = build_regressors(log, theta, W, quadrature, integrals=data)
        weights = policy_iteration_step(Theta, Xi, log.l2, log.m)
        change = float(np.linalg.norm(weights.w_v - w_prev))
        changes.append(change)
        if callback is not None:
            callback(k, weights, change)
        if change <= eps:
            return weights, k
        w_prev, W = weights.w_v, weights.w_bar
    raise NonConvergenceError(f"policy iteration did not converge in {max_iter} iterations", changes)


def bellman_residuals(
    log: DataLog, theta: HyperParams, weights: PolicyWeights, quadrature: str = "simpson"
) -> Tuple[np.ndarray, np.ndarray]:
    """Residual of the off-policy Bellman identity of every interval of ``log`` at a converged solution.

    Returns:
        (residuals, magnitudes): residual per interval and the sum of absolute terms of its row
    """
    Theta, Xi = build_regressors(log, theta, weights.w_bar, quadrature)
    w = weights.to_vector()
    return Theta @ w - Xi, np.abs(Theta) @ np.abs(w) + np.abs(Xi)


class OffPolicyADP(ControlPolicy, MetacogAgent):
    """Off-policy ADP tracking controller.

    Records one exploration log, then solves the optimal tracking policy of any hyperparameters from it.
    """

    def __init__(
        self,
        env: Optional[gym.Env] = None,
        id: Optional[int] = None,
        gamma: float = 0.1,
        eps: float = 1e-6,
        max_iter: int = 30,
        quadrature: str = "simpson",
        verbose: bool = False,
        project_name: str = "metacog-rl",
        experiment_name: str = "Off-policy ADP",
        log: bool = False,
        parent_writer=None,
    ):
        """Initializes the learner.

        Args:
            env: environment the policy is deployed on (optional)
            id: The id of the policy
            gamma: discount rate (1/s), must be positive
            eps: stopping threshold of policy iteration
            max_iter: iteration cap of policy iteration
            quadrature: 'simpson' or 'trapezoid'
            verbose: print the value-weight change of every iteration
            project_name: The name of the project used for logging
            experiment_name: The name of the experiment used for logging
            log: Whether to log or not
            parent_writer: The writer to use for logging. If None, a new writer is created.
        """
        MetacogAgent.__init__(self, env)
        ControlPolicy.__init__(self, id)
        if gamma <= 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        self.gamma = gamma
        self.eps = eps
        self.max_iter = max_iter
        self.quadrature = quadrature
        self.verbose = verbose
        self.data_log: Optional[DataLog] = None
        self.theta: Optional[HyperParams] = None
        self.weights: Optional[PolicyWeights] = None
        self.iterations = 0

        self.log = log
        if parent_writer is not None:
            self.writer = parent_writer
        if self.log and parent_writer is None:
            self.setup_wandb(project_name, experiment_name)

    def collect(
        self,
        plant: LtiPlant,
        behavior: BehaviorPolicy,
        noise: ExplorationNoise,
        theta0: HyperParams,
        N: int,
        T_int: float,
        dt: float,
        x0: Optional[np.ndarray] = None,
    ) -> DataLog:
        """Records a fresh exploration log and makes it the one every later solve reuses."""
        self.data_log = collect_data(plant, behavior, noise, theta0, N, T_int, dt, self.gamma, x0)
        return self.data_log

    def _log_iteration(self, k: int, weights: PolicyWeights, change: float):
        self.global_step += 1
        if self.verbose:
            print(f"policy iteration {k}: value-weight change {change:.3e}")
        if self.log and self.writer is not None:
            self.writer.add_scalar("policy_iteration/value_change", change, self.global_step)
            self.writer.add_scalar("policy_iteration/gain_norm", np.linalg.norm(weights.gain), self.global_step)

    def learn(self, theta: HyperParams, w_bar0: Optional[np.ndarray] = None) -> PolicyWeights:
        """Solves the optimal tracking policy of ``theta`` from the stored log and deploys it."""
        if self.data_log is None:
            raise ValueError("no exploration log recorded; call collect() first")
        self.weights, self.iterations = solve_policy(
            self.data_log, theta, self.eps, self.max_iter, w_bar0, self.quadrature, callback=self._log_iteration
        )
        self.theta = theta
        logger.info("policy for %s converged in %d iterations", theta.to_vector().round(4).tolist(), self.iterations)
        return self.weights

    def controller(self) -> Callable[[float, np.ndarray, np.ndarray], np.ndarray]:
        """``controller(t, x, r)`` of the deployed weights."""
        weights = self.weights
        return lambda t, x, r: weights.act(x, r)

    @override
    def eval(self, obs: np.ndarray) -> np.ndarray:
        n = self.weights.n
        return self.weights.act(obs[:n], obs[n:])

    @override
    def update(self) -> None:
        """One policy-iteration step from the deployed weights."""
        Theta, Xi = build_regressors(self.data_log, self.theta, self.weights.w_bar, self.quadrature)
        self.weights = policy_iteration_step(Theta, Xi, self.data_log.l2, self.data_log.m)

    @override
    def get_config(self) -> dict:
        return {
            "gamma": self.gamma,
            "eps": self.eps,
            "max_iter": self.max_iter,
            "quadrature": self.quadrature,
            "intervals": None if self.data_log is None else self.data_log.N,
        }
