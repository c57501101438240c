"""Independent reference computations the implementation is checked against.

Each oracle returns a list of :class:`OracleCase`; a case passes when its error is within its tolerance.
"""
import logging
import math
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg

from metacog_rl.common.errors import EmptyWindowError
from metacog_rl.common.gaussian_process import (
    SquaredExponential,
    difference_operator,
    gp_fit_direct,
    gp_predict_batch,
    gptd_fit,
)
from metacog_rl.common.hyperparams import HyperParams
from metacog_rl.common.stl import (
    Always,
    And,
    BinOp,
    Const,
    Eventually,
    Formula,
    Not,
    Or,
    Pred,
    Predicate,
    Signal,
    Until,
    brute_force_robustness,
    format_formula,
    robustness_signal,
)
from metacog_rl.common.trajectory import Trajectory
from metacog_rl.envs.lane_change import LtiPlant
from metacog_rl.low_level.off_policy_adp import (
    BehaviorPolicy,
    ExplorationNoise,
    RlConfig,
    bellman_residuals,
    collect_data,
    solve_policy,
)
from metacog_rl.low_level.riccati import riccati_oracle


logger = logging.getLogger(__name__)

SUBJECTS = ("riccati", "robustness", "gp")


class OracleCase(NamedTuple):
    name: str
    error: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tolerance


def format_cases(subject: str, cases: Sequence[OracleCase]) -> str:
    """Comparison table: one line per case, then the maximum error."""
    width = max([len(c.name) for c in cases] + [4])
    lines = [f"{'case':<{width}}  {'error':>12}  {'tolerance':>10}  status"]
    for c in cases:
        lines.append(f"{c.name:<{width}}  {c.error:>12.4e}  {c.tolerance:>10.1e}  {'ok' if c.passed else 'FAIL'}")
    worst = max((c.error for c in cases), default=0.0)
    lines.append(f"{subject}: max error {worst:.4e} over {len(cases)} cases")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Off-policy ADP against the model-based discounted Riccati solution


def learned_gain_case(
    name: str,
    plant: LtiPlant,
    theta: HyperParams,
    behavior: BehaviorPolicy,
    noise: ExplorationNoise,
    gamma: float,
    N: int,
    T_int: float,
    dt: float,
    x0: Optional[np.ndarray] = None,
    holdout_noise: Optional[ExplorationNoise] = None,
    eps: float = 1e-9,
    max_iter: int = 30,
) -> List[OracleCase]:
    """Relative Frobenius error of the learned gain, iteration count and held-out Bellman residual."""
    log = collect_data(plant, behavior, noise, theta, N, T_int, dt, gamma, x0)
    weights, iterations = solve_policy(log, theta, eps, max_iter)
    _, K = riccati_oracle(plant.A, plant.B, theta.Q, theta.R, gamma)
    error = float(np.linalg.norm(weights.gain + K) / np.linalg.norm(K))
    cases = [
        OracleCase(f"{name}/gain", error, 1e-3, f"learned {weights.gain.round(6).tolist()}, oracle {(-K).round(6).tolist()}"),
        OracleCase(f"{name}/iterations", float(iterations), 15.0),
    ]
    if holdout_noise is not None:
        held_out = collect_data(plant, behavior, holdout_noise, theta, N, T_int, dt, gamma, x0)
        residuals, magnitudes = bellman_residuals(held_out, theta, weights)
        cases.append(OracleCase(f"{name}/holdout_residual", float(np.max(np.abs(residuals) / magnitudes)), 1e-6))
    return cases


def scalar_benchmark() -> List[OracleCase]:
    """``x' = x + u`` with gamma 0.2 and unit weights; the discounted solution is ``P = 0.9 + sqrt(1.81)``."""
    plant = LtiPlant(np.array([[1.0]]), np.array([[1.0]]), "nominal")
    theta = HyperParams(np.ones(1), np.ones(1), np.zeros(1))
    _, K0 = riccati_oracle(plant.A, plant.B, np.eye(1), np.eye(1))
    behavior = BehaviorPolicy.from_lqr(K0, theta.setpoint)
    return learned_gain_case(
        "scalar",
        plant,
        theta,
        behavior,
        ExplorationNoise.sinusoids(1, 4, 1.0, seed=0),
        gamma=0.2,
        N=20,
        T_int=0.1,
        dt=1e-3,
        holdout_noise=ExplorationNoise.sinusoids(1, 4, 1.0, seed=1),
    )


def run_riccati_oracle(
    plant: Optional[LtiPlant] = None,
    theta: Optional[HyperParams] = None,
    rl: Optional[RlConfig] = None,
    dt: float = 1e-3,
    seed: int = 0,
) -> List[OracleCase]:
    """Scalar benchmark, plus ``plant`` at ``theta`` when given (recorded the way the first episode log is)."""
    cases = scalar_benchmark()
    if plant is not None and theta is not None:
        rl = rl or RlConfig()
        _, K0 = riccati_oracle(plant.A, plant.B, rl.behavior_q * np.eye(plant.n), rl.behavior_r * np.eye(plant.m))
        behavior = BehaviorPolicy.from_lqr(K0, theta.setpoint)
        cases += learned_gain_case(
            plant.label,
            plant,
            theta,
            behavior,
            rl.exploration(plant.n, plant.m, seed),
            rl.gamma,
            rl.N,
            rl.T_int,
            dt,
            holdout_noise=rl.exploration(plant.n, plant.m, seed + 1),
            eps=rl.eps,
            max_iter=rl.max_iter,
        )
    return cases


# ---------------------------------------------------------------------------
# Recursive robustness against the exhaustive window scan


def random_predicate(rng: np.random.Generator, signals: Sequence[str]) -> Predicate:
    lhs = Signal(str(rng.choice(signals)))
    if rng.random() < 0.3:
        lhs = BinOp("-", lhs, Signal(str(rng.choice(signals))))
    c = float(np.round(rng.uniform(-1.0, 1.0), 2))
    return Predicate.from_comparison(lhs, str(rng.choice([">", "<"])), Const(c))


def random_formula(
    rng: np.random.Generator, depth: int, signals: Sequence[str] = ("x1", "x2"), dt: float = 1.0, max_window: int = 3
) -> Formula:
    """Random formula of at most ``depth`` operator levels with windows of at most ``max_window`` samples."""
    if depth <= 1 or rng.random() < 0.2:
        return Pred(random_predicate(rng, signals))
    kind = rng.integers(6)
    a = int(rng.integers(0, max_window))
    b = a + int(rng.integers(0, max_window))
    if kind == 0:
        return Not(random_formula(rng, depth - 1, signals, dt, max_window))
    if kind in (1, 2):
        left = random_formula(rng, depth - 1, signals, dt, max_window)
        right = random_formula(rng, depth - 1, signals, dt, max_window)
        return And(left, right) if kind == 1 else Or(left, right)
    if kind == 3:
        return Always(a * dt, b * dt, random_formula(rng, depth - 1, signals, dt, max_window))
    if kind == 4:
        return Eventually(a * dt, b * dt, random_formula(rng, depth - 1, signals, dt, max_window))
    left = random_formula(rng, depth - 1, signals, dt, max_window)
    return Until(a * dt, b * dt, left, random_formula(rng, depth - 1, signals, dt, max_window))


def _mismatch(fast: float, slow: Optional[float]) -> float:
    if slow is None:
        return 0.0 if math.isnan(fast) else math.inf
    if math.isnan(fast):
        return math.inf
    return 0.0 if fast == slow else abs(fast - slow)


def run_robustness_oracle(
    seed: int = 0, n_cases: int = 100, length: int = 50, depth: int = 4, n_times: int = 5
) -> List[OracleCase]:
    """Random formula ``k`` on random signal ``k``, compared at ``n_times`` sample times."""
    rng = np.random.default_rng(seed)
    cases = []
    for k in range(n_cases):
        f = random_formula(rng, depth)
        traj = Trajectory(0.0, 1.0, rng.normal(size=(length, 2)))
        fast = robustness_signal(f, traj)
        errors = []
        for i in np.linspace(0, length - 1, n_times).astype(int):
            try:
                slow = brute_force_robustness(f, traj, float(i))
            except EmptyWindowError:
                slow = None
            errors.append(_mismatch(float(fast[i]), slow))
        cases.append(OracleCase(f"formula{k}", max(errors), 0.0, format_formula(f)))
    return cases


# ---------------------------------------------------------------------------
# GP posteriors against dense linear algebra


def _dense_kernel(X1: np.ndarray, X2: np.ndarray, lengthscales: np.ndarray, sv: float) -> np.ndarray:
    K = np.empty((X1.shape[0], X2.shape[0]))
    for i, x in enumerate(X1):
        for j, y in enumerate(X2):
            K[i, j] = sv * math.exp(-0.5 * float(np.sum(((x - y) / lengthscales) ** 2)))
    return K


def run_gp_oracle(seed: int = 0, n_points: int = 50, w2: float = 0.01, a: float = 0.5, T: float = 0.1) -> List[OracleCase]:
    """Posterior means of the direct and the temporal-difference observation models on a dense problem."""
    rng = np.random.default_rng(seed)
    ls, sv, m0 = np.array([0.7, 1.3]), 2.0, 0.5
    kernel = SquaredExponential(tuple(ls), sv)
    X = rng.uniform(-2.0, 2.0, size=(n_points, 2))
    Xq = rng.uniform(-2.0, 2.0, size=(n_points, 2))
    K = _dense_kernel(X, X, ls, sv)
    Kq = _dense_kernel(Xq, X, ls, sv)

    y = np.sin(X[:, 0]) * np.cos(X[:, 1]) + 0.1 * rng.normal(size=n_points)
    mean, _ = gp_predict_batch(gp_fit_direct(X, y, kernel, w2, m0), Xq)
    dense = m0 + Kq @ linalg.solve(K + w2 * np.eye(n_points), y - m0, assume_a="pos")
    cases = [OracleCase("direct/mean", float(np.max(np.abs(mean - dense))), 1e-8)]

    g = math.exp(-a * T)
    rewards = rng.normal(size=n_points - 1)
    H = difference_operator(n_points, g)
    mean, _ = gp_predict_batch(gptd_fit(X, rewards, kernel, w2, a, T, m0), Xq)
    S = H @ K @ H.T + w2 * np.eye(n_points - 1)
    dense = m0 + Kq @ H.T @ linalg.solve(S, rewards - m0 * (1.0 - g), assume_a="pos")
    cases.append(OracleCase("temporal_difference/mean", float(np.max(np.abs(mean - dense))), 1e-8))
    return cases
