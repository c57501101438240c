"""Base classes shared by the low-level learner and the metacognitive layer."""
from abc import ABC, abstractmethod
from typing import Optional

import gymnasium as gym
import numpy as np

from metacog_rl.common.evaluation import eval_control


class ControlPolicy(ABC):
    """A deployable feedback policy.

    It has an underlying learning structure which can be:
    - used to get the control input via eval()
    - improved using recorded data via update()
    """

    def __init__(self, id: Optional[int] = None) -> None:
        """Initializes the policy.

        Args:
            id: The id of the policy
        """
        self.id = id
        self.global_step = 0

    @abstractmethod
    def eval(self, obs: np.ndarray) -> np.ndarray:
        """Gives the control input for the observation ``[x, r]``.

        Args:
            obs (np.array): Observation

        Returns:
            np.array: Control input
        """

    def __report(self, worst, disc_vec_return, writer):
        """Writes the data to wandb summary."""
        idstr = "" if self.id is None else f"_{self.id}"
        writer.add_scalar(f"eval{idstr}/worst_robustness", float(np.min(worst)), self.global_step)
        for i in range(worst.shape[0]):
            writer.add_scalar(f"eval{idstr}/worst_{i}", worst[i], self.global_step)
            writer.add_scalar(f"eval{idstr}/discounted_vec_{i}", disc_vec_return[i], self.global_step)

    def policy_eval(self, eval_env: gym.Env, gamma: float = 1.0, writer=None):
        """Runs one episode on eval_env and logs the robustness statistics using writer.

        Args:
            eval_env: evaluation environment with a vector robustness reward
            gamma: per-step discount of the vector return
            writer: tensorboard writer

        Returns:
            a tuple (worst robustness, worst robustness per predicate, discounted vector return)
        """
        worst_all, worst, disc_vec_return = eval_control(self, eval_env, gamma)
        if writer is not None:
            self.__report(worst, disc_vec_return, writer)
        return worst_all, worst, disc_vec_return

    @abstractmethod
    def update(self) -> None:
        """Update the policy parameters (e.g. one policy-iteration step on recorded data)."""


class MetacogAgent(ABC):
    """Base of every learner: extracts environment features and sets up experiment tracking."""

    def __init__(self, env: Optional[gym.Env] = None) -> None:
        """Initializes the agent.

        Args:
            env: (gym.Env): The environment, may be None and provided later
        """
        self.extract_env_info(env)
        self.global_step = 0
        self.writer = None

    def extract_env_info(self, env: Optional[gym.Env]) -> None:
        """Extracts observation, action and reward dimensions of a Box-space environment.

        Args:
            env (gym.Env): The environment
        """
        # The environment is often built after the agent; callers pass it again once it exists.
        if env is not None:
            self.env = env
            self.observation_shape = env.observation_space.shape
            self.observation_dim = env.observation_space.shape[0]
            self.action_space = env.action_space
            self.action_shape = env.action_space.shape
            self.action_dim = env.action_space.shape[0]
            self.reward_dim = env.reward_space.shape[0]

    @abstractmethod
    def get_config(self) -> dict:
        """Generates dictionary of the algorithm parameters configuration.

        Returns:
            dict: Config
        """

    def setup_wandb(self, project_name: str, experiment_name: str) -> None:
        """Initializes the wandb run and the tensorboard writer.

        Args:
            project_name: name of the wandb project
            experiment_name: name of the wandb experiment
        """
        self.experiment_name = experiment_name
        import wandb
        from torch.utils.tensorboard import SummaryWriter

        wandb.init(
            project=project_name,
            sync_tensorboard=True,
            config=self.get_config(),
            name=self.experiment_name,
            monitor_gym=False,
            save_code=True,
        )
        self.writer = SummaryWriter(f"/tmp/{self.experiment_name}")
        # Scalars are indexed by episode time steps, not by wandb's own step counter
        wandb.define_metric("*", step_metric="global_step")

    def close_wandb(self) -> None:
        """Closes the writer and finishes the run."""
        import wandb

        if self.writer is not None:
            self.writer.close()
        wandb.finish()
