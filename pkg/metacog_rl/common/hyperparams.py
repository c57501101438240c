"""Reward hyperparameters of the low-level tracking controller."""
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np


@dataclass(frozen=True)
class HyperParams:
    """Diagonal state weight Q, diagonal input weight R, setpoint r and non-decision preview context.

    The flat vector form is ``[q_diag, r_diag, setpoint, preview]`` with coordinate names
    ``q1.., r1.., sp1.., pv1..``.
    """

    q_diag: np.ndarray
    r_diag: np.ndarray
    setpoint: np.ndarray
    preview: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        for name in ("q_diag", "r_diag", "setpoint", "preview"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if self.q_diag.size != self.setpoint.size:
            raise ValueError(f"q_diag has {self.q_diag.size} entries, setpoint {self.setpoint.size}")
        if np.any(self.q_diag <= 0) or np.any(self.r_diag <= 0):
            raise ValueError(f"Q and R weights must be positive, got q={self.q_diag}, r={self.r_diag}")
        if not all(np.all(np.isfinite(getattr(self, n))) for n in ("q_diag", "r_diag", "setpoint", "preview")):
            raise ValueError("hyperparameters must be finite")

    def __eq__(self, other) -> bool:
        if not isinstance(other, HyperParams):
            return NotImplemented
        return self.q_diag.shape == other.q_diag.shape and np.array_equal(self.to_vector(), other.to_vector())

    def __hash__(self) -> int:
        return hash(self.to_vector().tobytes())

    @property
    def n(self) -> int:
        return self.q_diag.size

    @property
    def m(self) -> int:
        return self.r_diag.size

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.q_diag)

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.r_diag)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.q_diag, self.r_diag, self.setpoint, self.preview])

    def coordinate_names(self) -> List[str]:
        names = [f"q{i + 1}" for i in range(self.n)]
        names += [f"r{j + 1}" for j in range(self.m)]
        names += [f"sp{i + 1}" for i in range(self.n)]
        names += [f"pv{k + 1}" for k in range(self.preview.size)]
        return names

    def from_vector(self, vector: Sequence[float]) -> "HyperParams":
        """Hyperparameters shaped like ``self`` with values from ``vector``."""
        v = np.asarray(vector, dtype=float).ravel()
        if v.size != self.to_vector().size:
            raise ValueError(f"expected {self.to_vector().size} values, got {v.size}")
        n, m = self.n, self.m
        return HyperParams(v[:n], v[n : n + m], v[n + m : 2 * n + m], v[2 * n + m :])

    def with_setpoint(self, setpoint: Sequence[float]) -> "HyperParams":
        return HyperParams(self.q_diag, self.r_diag, setpoint, self.preview)

    def to_dict(self) -> dict:
        return {
            "q_diag": self.q_diag.tolist(),
            "r_diag": self.r_diag.tolist(),
            "setpoint": self.setpoint.tolist(),
            "preview": self.preview.tolist(),
        }
