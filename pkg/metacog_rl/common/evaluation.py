"""Utilities related to evaluation."""
from typing import Callable, Tuple

import numpy as np
from scipy.integrate import simpson

from metacog_rl.common.trajectory import Trajectory
from metacog_rl.envs.lane_change import LtiPlant, ScenarioSchedule, simulate


def eval_control(agent, env, gamma: float = 1.0) -> Tuple[float, np.ndarray, np.ndarray]:
    """Evaluates one episode of the agent in the environment.

    Args:
        agent: Agent with an ``eval(obs)`` method
        env: environment whose reward is a robustness vector
        gamma: per-step discount of the vector return

    Returns:
        (float, np.ndarray, np.ndarray): worst robustness over all predicates, worst robustness per predicate,
        discounted vector return
    """
    obs, _ = env.reset()
    done = False
    worst = np.full(env.reward_space.shape[0], np.inf)
    disc_vec_return = np.zeros(env.reward_space.shape[0])
    discount = 1.0
    while not done:
        obs, r, terminated, truncated, info = env.step(agent.eval(obs))
        done = terminated or truncated
        worst = np.minimum(worst, r)
        disc_vec_return += discount * r
        discount *= gamma

    return float(np.min(worst)), worst, disc_vec_return


def discounted_quadratic_cost(traj: Trajectory, Q: np.ndarray, R: np.ndarray, gamma: float) -> float:
    """``int e^{-gamma t} (e^T Q e + u^T R u) dt`` over a trajectory, by Simpson quadrature."""
    e = traj.tracking_error()
    u = traj.inputs if traj.inputs is not None else np.zeros((len(traj), 0))
    stage = np.einsum("ti,ij,tj->t", e, Q, e) + np.einsum("ti,ij,tj->t", u, np.atleast_2d(R), u)
    weights = np.exp(-gamma * (traj.times - traj.t0))
    return float(simpson(weights * stage, dx=traj.dt))


def policy_cost(
    controller: Callable[[float, np.ndarray, np.ndarray], np.ndarray],
    plant: LtiPlant,
    schedule: ScenarioSchedule,
    Q: np.ndarray,
    R: np.ndarray,
    gamma: float,
) -> float:
    """Discounted closed-loop cost of a controller on a fresh rollout of ``plant`` under ``schedule``.

    Args:
        controller: ``controller(t, x, r) -> u``
        plant: LTI plant
        schedule: scenario schedule (initial state, setpoints, horizon, step)
        Q: state weight on the tracking error
        R: input weight
        gamma: discount rate (1/s)
    """
    traj = simulate(plant, controller, schedule)
    return discounted_quadratic_cost(traj, Q, R, gamma)
