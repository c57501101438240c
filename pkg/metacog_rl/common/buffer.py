"""Ring buffers for the metacognitive layer."""
from typing import List, Tuple

import numpy as np
from scipy.integrate import trapezoid


class SurpriseWindow:
    """Ring buffer of ``(t, SP(t))`` samples spaced by the TD interval T."""

    def __init__(self, delta: float, T: float, max_size: int = None):
        """Initialize the window.

        Args:
            delta: integration window length in seconds
            T: spacing of the samples in seconds
            max_size: capacity; defaults to enough samples to cover twice ``delta``
        """
        if delta <= 0 or T <= 0:
            raise ValueError(f"delta and T must be positive, got {delta}, {T}")
        self.delta = delta
        self.T = T
        self.max_size = max_size if max_size is not None else int(np.ceil(2 * delta / T)) + 2
        self.ptr, self.size = 0, 0
        self.times = np.zeros(self.max_size)
        self.values = np.zeros(self.max_size)

    def add(self, t: float, sp: float):
        """Add a new surprise sample.

        Args:
            t: sample time, exactly one interval T after the previous sample
            sp: surprise value
        """
        if self.size > 0:
            last = self.times[(self.ptr - 1) % self.max_size]
            if abs((t - last) - self.T) > 1e-9 * max(1.0, self.T):
                raise ValueError(f"surprise samples must be spaced by T={self.T}, got {last} then {t}")
        self.times[self.ptr] = t
        self.values[self.ptr] = sp
        self.ptr = (self.ptr + 1) % self.max_size
        self.size = min(self.size + 1, self.max_size)

    def get_all_data(self) -> Tuple[np.ndarray, np.ndarray]:
        """Times and values in chronological order."""
        if self.size < self.max_size:
            inds = np.arange(self.size)
        else:
            inds = (self.ptr + np.arange(self.max_size)) % self.max_size
        return self.times[inds], self.values[inds]

    def span(self) -> float:
        """Time covered by the stored samples."""
        if self.size < 2:
            return 0.0
        times, _ = self.get_all_data()
        return float(times[-1] - times[0])

    def is_full(self) -> bool:
        """Whether the window covers at least ``delta`` seconds."""
        return self.span() >= self.delta - 1e-9 * max(1.0, self.T)

    def integral(self, mode: str = "signed") -> float:
        """Trapezoidal integral over the last ``delta`` seconds.

        Args:
            mode: ``"signed"`` integrates SP as is; ``"deterioration"`` integrates ``max(0, -SP)``, the part of
                the realised meta-reward above the fitness prediction
        """
        times, values = self.get_all_data()
        if times.size < 2:
            return 0.0
        keep = times >= times[-1] - self.delta - 1e-9 * max(1.0, self.T)
        if mode == "deterioration":
            values = np.maximum(-values, 0.0)
        elif mode != "signed":
            raise ValueError(f"surprise mode must be 'signed' or 'deterioration', got '{mode}'")
        return float(trapezoid(values[keep], times[keep]))

    def reset(self):
        self.ptr, self.size = 0, 0

    def __len__(self):
        """Get the size of the buffer."""
        return self.size


class ContextBuffer:
    """Ring buffer of the last ``max_contexts`` trajectory segments, one per tested hyperparameter vector."""

    def __init__(self, max_contexts: int = 4):
        if max_contexts < 1:
            raise ValueError(f"max_contexts must be at least 1, got {max_contexts}")
        self.max_size = max_contexts
        self.ptr, self.size = 0, 0
        self.thetas: List[np.ndarray] = [None] * max_contexts
        self.inputs: List[np.ndarray] = [None] * max_contexts
        self.rewards: List[np.ndarray] = [None] * max_contexts

    def add(self, theta: np.ndarray, inputs: np.ndarray, rewards: np.ndarray):
        """Add a context.

        Args:
            theta: flat hyperparameter vector of the segment
            inputs: joint GP inputs of the segment (L x D)
            rewards: its L-1 integrated rewards
        """
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        rewards = np.asarray(rewards, dtype=float).ravel()
        if rewards.size != inputs.shape[0] - 1:
            raise ValueError(f"expected {inputs.shape[0] - 1} rewards, got {rewards.size}")
        self.thetas[self.ptr] = np.asarray(theta, dtype=float).copy()
        self.inputs[self.ptr] = inputs.copy()
        self.rewards[self.ptr] = rewards.copy()
        self.ptr = (self.ptr + 1) % self.max_size
        self.size = min(self.size + 1, self.max_size)

    def segments(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        """Stored ``(inputs, rewards)`` pairs, oldest first."""
        start = 0 if self.size < self.max_size else self.ptr
        order = [(start + k) % self.max_size for k in range(self.size)]
        return [(self.inputs[i], self.rewards[i]) for i in order]

    def __len__(self):
        """Get the size of the buffer."""
        return self.size
