"""Safe Bayesian optimization of the survival score over a grid of hyperparameters."""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from metacog_rl.common.errors import EmptySafeSetError, UnsafeSeedError
from metacog_rl.common.gaussian_process import (
    BaseGpLibrary,
    GpPosterior,
    SquaredExponential,
    gp_fit_direct,
    gp_predict_batch,
    min_kl_to_library,
    spread_targets,
)
from metacog_rl.common.hyperparams import HyperParams


logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SboConfig:
    """Safe Bayesian optimization settings (the ``[sbo]`` section).

    Args:
        enabled: adapt on an Adapt decision (otherwise the decision is only logged)
        budget: number of evaluations after the seed
        beta_k: confidence multiplier
        p_min: safety threshold of the survival score (``-log(1 + 1/varpi) - 1`` when None)
        resolution: grid points per free coordinate
        free: names of the optimized coordinates (q1.., r1.., sp1.., pv1..)
        box_lo: lower corner of the box over the free coordinates (``0.5 * seed`` when None)
        box_hi: upper corner of the box (``10 * seed`` when None)
        grid_cap: maximum number of grid points
        signal_variance: prior variance of the score GP
        lengthscale: score-GP lengthscale as a fraction of the box widths
        eval_horizon: rollout horizon of a candidate evaluation (s)
        full_sets: compute every expander instead of the most uncertain one
    """

    enabled: bool = True
    budget: int = 10
    beta_k: float = 3.0
    p_min: Optional[float] = None
    resolution: int = 5
    free: Tuple[str, ...] = ("q1", "r1")
    box_lo: Optional[Tuple[float, ...]] = None
    box_hi: Optional[Tuple[float, ...]] = None
    grid_cap: int = 100_000
    signal_variance: float = 4.0
    lengthscale: float = 0.2
    eval_horizon: float = 3.0
    full_sets: bool = False

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError(f"budget must be non-negative, got {self.budget}")
        if self.beta_k < 0:
            raise ValueError(f"beta_k must be non-negative, got {self.beta_k}")
        if self.resolution < 2:
            raise ValueError(f"resolution must be at least 2, got {self.resolution}")
        if not self.free:
            raise ValueError("at least one free coordinate is needed")
        for name in ("signal_variance", "lengthscale", "eval_horizon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        object.__setattr__(self, "free", tuple(self.free))
        for name in ("box_lo", "box_hi"):
            value = getattr(self, name)
            if value is not None:
                if len(value) != len(self.free):
                    raise ValueError(f"{name} has {len(value)} entries for {len(self.free)} free coordinates")
                object.__setattr__(self, name, tuple(float(v) for v in value))

    def threshold(self, varpi: float) -> float:
        """P_min: the configured value, or slightly below the score of theta* at zero KL."""
        return self.p_min if self.p_min is not None else -np.log1p(1.0 / varpi) - 1.0


def free_indices(theta: HyperParams, names: Sequence[str]) -> np.ndarray:
    """Positions of the named coordinates in the flat hyperparameter vector."""
    all_names = theta.coordinate_names()
    missing = [n for n in names if n not in all_names]
    if missing:
        raise ValueError(f"unknown hyperparameter coordinates {missing}, available {all_names}")
    return np.array([all_names.index(n) for n in names], dtype=int)


def with_free_values(theta: HyperParams, idx: np.ndarray, values: np.ndarray) -> HyperParams:
    v = theta.to_vector()
    v[idx] = values
    return theta.from_vector(v)


class DomainGrid:
    """Cartesian grid over a box of the free coordinates, in lexicographic order."""

    def __init__(self, names: Sequence[str], lo: Sequence[float], hi: Sequence[float], resolution: int, cap: int = 100_000):
        self.names = tuple(names)
        self.lo = np.asarray(lo, dtype=float).ravel()
        self.hi = np.asarray(hi, dtype=float).ravel()
        if not (self.lo.size == self.hi.size == len(self.names)):
            raise ValueError(f"box of size {self.lo.size}/{self.hi.size} for {len(self.names)} coordinates")
        if np.any(self.lo >= self.hi):
            raise ValueError(f"box lower corner {self.lo} must be below the upper corner {self.hi}")
        total = resolution ** len(self.names)
        if total > cap:
            raise ValueError(f"grid of {total} points exceeds the cap of {cap}")
        axes = [np.linspace(l, h, resolution) for l, h in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        self.points = np.column_stack([m.ravel() for m in mesh])
        self.resolution = resolution

    @classmethod
    def around(cls, seed: HyperParams, cfg: SboConfig) -> "DomainGrid":
        """Grid over the configured box, defaulting to ``[0.5, 10] x`` the seed values."""
        values = seed.to_vector()[free_indices(seed, cfg.free)]
        if cfg.box_lo is None or cfg.box_hi is None:
            if np.any(values == 0):
                raise ValueError(f"box_lo/box_hi are required for zero-valued free coordinates {cfg.free}")
        lo = np.minimum(0.5 * values, 10 * values) if cfg.box_lo is None else np.asarray(cfg.box_lo)
        hi = np.maximum(0.5 * values, 10 * values) if cfg.box_hi is None else np.asarray(cfg.box_hi)
        return cls(cfg.free, lo, hi, cfg.resolution, cfg.grid_cap)

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def __len__(self) -> int:
        return self.points.shape[0]

    def insert(self, point: Sequence[float]) -> int:
        """Index of ``point``, appended to the grid when it is not a grid point."""
        point = np.asarray(point, dtype=float).ravel()
        close = np.all(np.abs(self.points - point) <= 1e-12 * np.maximum(1.0, np.abs(point)), axis=1)
        if np.any(close):
            return int(np.argmax(close))
        self.points = np.vstack([self.points, point])
        return len(self) - 1


def survival_score(
    theta: HyperParams,
    fitness_gp_for_theta: GpPosterior,
    bases: BaseGpLibrary,
    theta_star: HyperParams,
    varpi: float,
    p_min: Optional[float] = None,
    kl_points: int = 4,
    scale: Optional[np.ndarray] = None,
    jitter: float = 1e-10,
    targets: Optional[np.ndarray] = None,
) -> float:
    """Survival score ``P(theta) = -(||theta - theta*|| + log(1 + 1/(varpi - min KL)))``.

    When the minimum KL reaches ``varpi`` the score is the unsafe sentinel ``p_min - 1 - (min KL - varpi)``.

    Args:
        theta: candidate hyperparameters
        fitness_gp_for_theta: fitness GP of the candidate's closed loop
        bases: library of safe base GPs
        theta_star: hyperparameters optimal before the change
        varpi: KL threshold
        p_min: safety threshold used by the sentinel (``-log(1 + 1/varpi) - 1`` when None)
        kl_points: number of shared KL targets taken from the candidate GP's inducing inputs
        scale: per-coordinate scale of the distance term (1 when None)
        jitter: relative diagonal jitter of the KL covariances
        targets: explicit KL targets
    """
    if p_min is None:
        p_min = -np.log1p(1.0 / varpi) - 1.0
    diff = theta.to_vector() - theta_star.to_vector()
    if scale is not None:
        diff = diff / np.asarray(scale, dtype=float)
    distance = float(np.linalg.norm(diff))
    if targets is None:
        targets = spread_targets(fitness_gp_for_theta.inducing, kl_points, fitness_gp_for_theta.kernel)
    min_kl, _ = min_kl_to_library(fitness_gp_for_theta, bases, targets, jitter)
    if min_kl >= varpi:
        return p_min - 1.0 - (min_kl - varpi)
    return -(distance + np.log1p(1.0 / (varpi - min_kl)))


@dataclass
class SboState:
    """Score GP, observations and the current sets over a domain grid."""

    grid: DomainGrid
    p_min: float
    beta_k: float
    kernel: SquaredExponential
    center: np.ndarray
    observed: List[Tuple[int, float]] = field(default_factory=list)
    score_gp: Optional[GpPosterior] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    safe_set: Optional[np.ndarray] = None
    maximizers: Optional[np.ndarray] = None
    expanders: Optional[np.ndarray] = None

    def __post_init__(self):
        self.lower = np.full(len(self.grid), -np.inf)
        self.upper = np.full(len(self.grid), np.inf)
        self.safe_set = np.zeros(len(self.grid), dtype=bool)
        self.maximizers = self.safe_set.copy()
        self.expanders = self.safe_set.copy()

    def add_observation(self, index: int, score: float):
        """Appends an observation and refits the score GP; unexplored points are predicted at P_min."""
        self.observed.append((int(index), float(score)))
        X = self.grid.points[[i for i, _ in self.observed]]
        y = np.array([s for _, s in self.observed])
        w2 = 1e-4 * max(1.0, float(np.ptp(y)))
        self.score_gp = gp_fit_direct(X, y, self.kernel, w2, prior_mean=self.p_min)

    def distances(self) -> np.ndarray:
        """Distance of every grid point to theta*, in units of the box widths."""
        return np.linalg.norm((self.grid.points - self.center) / self.grid.widths, axis=1)


def confidence_bounds(state: SboState, points: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """``mu - beta sigma`` and ``mu + beta sigma`` of the score GP (on the whole grid when ``points`` is None)."""
    points = state.grid.points if points is None else np.atleast_2d(points)
    mean, var = gp_predict_batch(state.score_gp, points)
    std = np.sqrt(var)
    return mean - state.beta_k * std, mean + state.beta_k * std


def _expander_counts(state: SboState, candidates: np.ndarray, stop_at_first: bool) -> np.ndarray:
    """Number of unsafe points whose lower bound would clear P_min after observing ``upper`` at each candidate."""
    counts = np.zeros(len(state.grid), dtype=int)
    unsafe = np.flatnonzero(~state.safe_set)
    if unsafe.size == 0:
        return counts
    gp, pts = state.score_gp, state.grid.points
    U = pts[unsafe]
    mean_u, var_u = gp_predict_batch(gp, U)
    K_uX = gp.kernel(U, gp.inducing)
    width = state.upper - state.lower
    order = candidates[np.argsort(-width[candidates], kind="stable")]
    for c in order:
        c_pt = pts[c : c + 1]
        mean_c, var_c = gp_predict_batch(gp, c_pt)
        if var_c[0] <= 1e-12 * state.kernel.signal_variance:
            continue
        K_cX = gp.kernel(c_pt, gp.inducing)
        cross = gp.kernel(U, c_pt)[:, 0] - K_uX @ gp.C @ K_cX[0]
        mean_new = mean_u + cross / var_c[0] * (state.upper[c] - mean_c[0])
        var_new = np.maximum(var_u - cross**2 / var_c[0], 0.0)
        counts[c] = int(np.sum(mean_new - state.beta_k * np.sqrt(var_new) >= state.p_min))
        if counts[c] > 0 and stop_at_first:
            break
    return counts


def update_sets(state: SboState, full_sets: bool = False) -> SboState:
    """Safe set, potential maximizers and potential expanders from contiguous confidence bounds.

    Bounds only tighten: the lower bound never decreases and the upper bound never increases.
    Without ``full_sets`` only the most uncertain expander outside the maximizers is searched, among points
    more uncertain than every maximizer.

    Raises:
        EmptySafeSetError: when no grid point clears P_min
    """
    n = len(state.grid)
    if state.lower.size < n:
        pad = n - state.lower.size
        state.lower = np.concatenate([state.lower, np.full(pad, -np.inf)])
        state.upper = np.concatenate([state.upper, np.full(pad, np.inf)])
    lower, upper = confidence_bounds(state)
    state.lower = np.maximum(state.lower, lower)
    state.upper = np.maximum(np.minimum(state.upper, upper), state.lower)

    state.safe_set = state.lower >= state.p_min
    if not np.any(state.safe_set):
        raise EmptySafeSetError(f"no grid point has a lower bound above P_min={state.p_min:.4g}")
    state.maximizers = state.safe_set & (state.upper >= np.max(state.lower[state.safe_set]))

    width = state.upper - state.lower
    if full_sets:
        candidates = np.flatnonzero(state.safe_set)
    else:
        mask = state.safe_set & ~state.maximizers
        mask &= width > np.max(width[state.maximizers])
        candidates = np.flatnonzero(mask)
    state.expanders = _expander_counts(state, candidates, stop_at_first=not full_sets) > 0
    return state


def select_index(state: SboState) -> Optional[int]:
    """Most uncertain point of maximizers and expanders.

    Ties go to the point closest to theta* in units of the box widths (:meth:`SboState.distances`),
    then to the lowest grid index.
    """
    union = np.flatnonzero(state.maximizers | state.expanders)
    if union.size == 0:
        return None
    width = (state.upper - state.lower)[union]
    tied = union[np.isclose(width, np.max(width), rtol=1e-9, atol=1e-12)]
    dist = state.distances()[tied]
    tied = tied[np.isclose(dist, np.min(dist), rtol=1e-9, atol=1e-12)]
    return int(np.min(tied))


def best_index(state: SboState) -> int:
    """Safe point with the largest lower bound."""
    safe = np.flatnonzero(state.safe_set)
    return int(safe[np.argmax(state.lower[safe])])


def select_candidate(state: SboState, seed: HyperParams, free: Sequence[str]) -> HyperParams:
    """Next hyperparameters to evaluate; the current best when there is nothing left to explore."""
    i = select_index(state)
    if i is None:
        i = best_index(state)
    return with_free_values(seed, free_indices(seed, free), state.grid.points[i])


class SboRecord(NamedTuple):
    k: int
    theta: np.ndarray
    score: float
    lower: float
    upper: float
    membership: str


def history_header(free: Sequence[str]) -> List[str]:
    return ["k", *free, "score", "lower", "upper", "set_membership"]


def history_rows(history: Sequence[SboRecord]) -> List[list]:
    return [[r.k, *r.theta, r.score, r.lower, r.upper, r.membership] for r in history]


class SafeBayesOpt:
    """Safe Bayesian optimization driver: evaluates a seed, then the most uncertain maximizer or expander.

    Candidates come from a finite grid over the free coordinates; every evaluated point is certified
    safe (lower confidence bound at or above P_min) when it is selected.
    """

    def __init__(
        self,
        seed: HyperParams,
        cfg: SboConfig,
        varpi: float = 1.0,
        theta_star: Optional[HyperParams] = None,
        grid: Optional[DomainGrid] = None,
        verbose: bool = False,
        writer=None,
        global_step: int = 0,
    ):
        """Initialize the optimizer.

        Args:
            seed: safe starting hyperparameters
            cfg: SBO settings
            varpi: KL threshold (sets the default P_min)
            theta_star: reference of the distance tie-break (the seed when None)
            grid: candidate grid (built around the seed when None)
            verbose: print every evaluation
            writer: optional tensorboard writer
            global_step: first step of the writer's sbo/* scalars
        """
        self.seed = seed
        self.cfg = cfg
        self.p_min = cfg.threshold(varpi)
        self.grid = grid if grid is not None else DomainGrid.around(seed, cfg)
        self.free_idx = free_indices(seed, cfg.free)
        self.seed_index = self.grid.insert(seed.to_vector()[self.free_idx])
        theta_star = theta_star if theta_star is not None else seed
        kernel = SquaredExponential(tuple(cfg.lengthscale * self.grid.widths), cfg.signal_variance)
        self.state = SboState(self.grid, self.p_min, cfg.beta_k, kernel, theta_star.to_vector()[self.free_idx])
        self.history: List[SboRecord] = []
        self.verbose = verbose
        self.writer = writer
        self.global_step = global_step

    def theta_at(self, i: int) -> HyperParams:
        return with_free_values(self.seed, self.free_idx, self.grid.points[i])

    def add_solution(self, i: int, score: float, membership: str):
        lower, upper = self.state.lower[i], self.state.upper[i]
        self.history.append(SboRecord(len(self.history), self.grid.points[i].copy(), score, lower, upper, membership))
        self.state.add_observation(i, score)
        self.global_step += 1
        if self.verbose:
            print(f"SBO k={len(self.history) - 1}: theta={self.grid.points[i]} score={score:.4g} ({membership})")
        if self.writer is not None:
            self.writer.add_scalar("sbo/score", score, self.global_step)
            self.writer.add_scalar("sbo/lower", lower, self.global_step)
            self.writer.add_scalar("sbo/upper", upper, self.global_step)

    def run(
        self, evaluator: Callable[[HyperParams], float], budget: Optional[int] = None
    ) -> Tuple[HyperParams, List[SboRecord]]:
        """Runs the optimization loop.

        Returns:
            (HyperParams, list): argmax of the lower bound over the safe set and the evaluation history

        Raises:
            UnsafeSeedError: when the seed scores below P_min
            EmptySafeSetError: when the safe set empties
        """
        budget = self.cfg.budget if budget is None else budget
        if budget == 0:
            logger.warning("SBO budget is 0: keeping the seed hyperparameters")
            return self.seed, []

        score = float(evaluator(self.seed))
        if score < self.p_min:
            raise UnsafeSeedError(f"seed scores {score:.4g} below P_min={self.p_min:.4g}")
        self.add_solution(self.seed_index, score, "safe")

        for _ in range(budget):
            update_sets(self.state, self.cfg.full_sets)
            if not np.any(self.state.maximizers | self.state.expanders):
                logger.info("SBO converged: no maximizer or expander left")
                break
            theta = select_candidate(self.state, self.seed, self.cfg.free)
            i = self.grid.insert(theta.to_vector()[self.free_idx])
            membership = "maximizer" if self.state.maximizers[i] else "expander"
            self.add_solution(i, float(evaluator(theta)), membership)

        update_sets(self.state, self.cfg.full_sets)
        best = best_index(self.state)
        logger.info("SBO best %s with lower bound %.4g", self.grid.points[best], self.state.lower[best])
        return self.theta_at(best), self.history


def sbo_run(
    seed: HyperParams,
    evaluator: Callable[[HyperParams], float],
    budget: int,
    cfg: SboConfig,
    varpi: float = 1.0,
    theta_star: Optional[HyperParams] = None,
    grid: Optional[DomainGrid] = None,
) -> Tuple[HyperParams, List[SboRecord]]:
    """Safe Bayesian optimization of ``evaluator`` from a safe seed; see :class:`SafeBayesOpt`."""
    return SafeBayesOpt(seed, cfg, varpi, theta_star, grid).run(evaluator, budget)
