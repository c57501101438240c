"""Uniformly sampled closed-loop trajectories."""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled record of one closed-loop run.

    The time of sample ``i`` is ``t0 + i * dt``. Signals are addressed by name: ``x1..xn`` for states,
    ``u1..um`` for inputs, ``r1..rn`` for the setpoint and ``r`` as a shorthand for ``r1``.
    """

    t0: float
    dt: float
    states: np.ndarray
    inputs: Optional[np.ndarray] = None
    references: Optional[np.ndarray] = None
    plant_labels: Optional[Sequence[str]] = field(default=None, compare=False)

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        if np.ndim(self.states) == 1:
            states = states.T
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if states.shape[0] < 1:
            raise ValueError("a trajectory needs at least one sample")
        if not np.all(np.isfinite(states)):
            raise ValueError("trajectory states must be finite")
        object.__setattr__(self, "states", states)
        L = states.shape[0]
        if self.inputs is not None:
            inputs = np.asarray(self.inputs, dtype=float).reshape(L, -1)
            object.__setattr__(self, "inputs", inputs)
        if self.references is not None:
            references = np.asarray(self.references, dtype=float).reshape(L, -1)
            if references.shape[1] != states.shape[1]:
                raise ValueError(f"references have dimension {references.shape[1]}, states {states.shape[1]}")
            object.__setattr__(self, "references", references)
        if self.plant_labels is not None and len(self.plant_labels) != L:
            raise ValueError(f"{len(self.plant_labels)} plant labels for {L} samples")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        """State dimension."""
        return self.states.shape[1]

    @property
    def m(self) -> int:
        """Input dimension (0 without inputs)."""
        return 0 if self.inputs is None else self.inputs.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(len(self)) * self.dt

    @property
    def t_end(self) -> float:
        return self.t0 + (len(self) - 1) * self.dt

    def schema(self) -> List[str]:
        """Names of every signal component available in this trajectory."""
        names = [f"x{i + 1}" for i in range(self.n)]
        names += [f"u{j + 1}" for j in range(self.m)]
        if self.references is not None:
            names += ["r"] + [f"r{i + 1}" for i in range(self.n)]
        return names

    def signal(self, name: str) -> np.ndarray:
        """Returns the named signal component as a 1-D array over all samples."""
        if name == "r":
            name = "r1"
        kind, idx = name[0], int(name[1:]) - 1
        if kind == "x" and 0 <= idx < self.n:
            return self.states[:, idx]
        if kind == "u" and 0 <= idx < self.m:
            return self.inputs[:, idx]
        if kind == "r" and self.references is not None and 0 <= idx < self.n:
            return self.references[:, idx]
        raise KeyError(f"unknown signal component '{name}'")

    def index_of(self, t: float) -> int:
        """Grid index of time ``t`` (snapped to the nearest sample)."""
        i = int(round((t - self.t0) / self.dt))
        if i < 0 or i >= len(self):
            raise IndexError(f"t={t} outside [{self.t0}, {self.t_end}]")
        return i

    def slice(self, start: int, stop: int) -> "Trajectory":
        """Samples ``start..stop-1`` as a new trajectory with the matching start time."""
        return Trajectory(
            t0=self.t0 + start * self.dt,
            dt=self.dt,
            states=self.states[start:stop],
            inputs=None if self.inputs is None else self.inputs[start:stop],
            references=None if self.references is None else self.references[start:stop],
            plant_labels=None if self.plant_labels is None else list(self.plant_labels[start:stop]),
        )

    def tracking_error(self) -> np.ndarray:
        """States minus references (the states themselves without references)."""
        if self.references is None:
            return self.states.copy()
        return self.states - self.references

    def rows(self) -> List[list]:
        """Rows of the trajectory table: t, x1..xn, u1..um, r1..rn, plant_label."""
        out = []
        times = self.times
        for i in range(len(self)):
            row = [times[i], *self.states[i]]
            if self.inputs is not None:
                row += list(self.inputs[i])
            if self.references is not None:
                row += list(self.references[i])
            row.append("" if self.plant_labels is None else self.plant_labels[i])
            out.append(row)
        return out

    def header(self) -> List[str]:
        cols = ["t"] + [f"x{i + 1}" for i in range(self.n)]
        cols += [f"u{j + 1}" for j in range(self.m)]
        if self.references is not None:
            cols += [f"r{i + 1}" for i in range(self.n)]
        return cols + ["plant_label"]
