"""Gaussian processes: kernels, exact posteriors, GPTD fits from integral rewards and GP-to-GP KL."""
import json
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from metacog_rl.common.errors import IllConditionedError, SingularMatrixError
from metacog_rl.common.trajectory import Trajectory


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

# Jitter ladder, relative to the mean diagonal of the matrix being factorized.
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class SquaredExponential:
    """Squared-exponential kernel with per-coordinate lengthscales.

    ``dims`` selects which coordinates of the joint input the kernel reads (all when None).
    """

    lengthscales: Tuple[float, ...]
    signal_variance: float = 1.0
    dims: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        if any(v <= 0 for v in ls) or self.signal_variance <= 0:
            raise ValueError(f"lengthscales and signal variance must be positive, got {ls}, {self.signal_variance}")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        if self.dims is not None:
            object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    def _select(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.dims is not None:
            X = X[:, list(self.dims)]
        ls = np.asarray(self.lengthscales)
        if ls.size != 1 and ls.size != X.shape[1]:
            raise ValueError(f"kernel has {ls.size} lengthscales, input has {X.shape[1]} coordinates")
        return X / ls

    def __call__(self, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
        d2 = cdist(self._select(X1), self._select(X2), "sqeuclidean")
        return self.signal_variance * np.exp(-0.5 * d2)

    def diag(self, X: np.ndarray) -> np.ndarray:
        return np.full(np.atleast_2d(X).shape[0], self.signal_variance)

    def to_dict(self) -> dict:
        return {
            "kind": "squared_exponential",
            "lengthscales": list(self.lengthscales),
            "signal_variance": self.signal_variance,
            "dims": None if self.dims is None else list(self.dims),
        }


@dataclass(frozen=True)
class Product:
    """Product of two kernels, typically one over state coordinates and one over hyperparameters."""

    left: "Kernel"
    right: "Kernel"

    def __call__(self, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
        return self.left(X1, X2) * self.right(X1, X2)

    def diag(self, X: np.ndarray) -> np.ndarray:
        return self.left.diag(X) * self.right.diag(X)

    def to_dict(self) -> dict:
        return {"kind": "product", "left": self.left.to_dict(), "right": self.right.to_dict()}


Kernel = Union[SquaredExponential, Product]


def kernel_from_dict(d: dict) -> Kernel:
    if d["kind"] == "product":
        return Product(kernel_from_dict(d["left"]), kernel_from_dict(d["right"]))
    if d["kind"] == "squared_exponential":
        dims = None if d["dims"] is None else tuple(d["dims"])
        return SquaredExponential(tuple(d["lengthscales"]), d["signal_variance"], dims)
    raise ValueError(f"unknown kernel kind '{d['kind']}'")


def joint_kernel(
    state_lengthscales: Sequence[float],
    theta_lengthscales: Sequence[float],
    signal_variance: float = 1.0,
) -> Kernel:
    """``k_x * k_theta`` over joint inputs ``[x, theta]``."""
    n_x, n_theta = len(state_lengthscales), len(theta_lengthscales)
    k_x = SquaredExponential(tuple(state_lengthscales), signal_variance, dims=tuple(range(n_x)))
    k_theta = SquaredExponential(tuple(theta_lengthscales), 1.0, dims=tuple(range(n_x, n_x + n_theta)))
    return Product(k_x, k_theta)


def gram(kernel: Kernel, X: np.ndarray) -> np.ndarray:
    """Symmetrized Gram matrix of ``X``."""
    K = kernel(X, X)
    return 0.5 * (K + K.T)


def cho_factor_jitter(M: np.ndarray, what: str = "matrix") -> Tuple[tuple, float]:
    """Cholesky factor of a symmetric PSD matrix, escalating diagonal jitter when needed.

    Returns:
        (factor, jitter): the ``scipy.linalg.cho_factor`` result and the jitter that was added

    Raises:
        SingularMatrixError: when the largest jitter still fails
    """
    scale = float(np.mean(np.diag(M))) if M.size else 1.0
    scale = scale if scale > 0 else 1.0
    eye = np.eye(M.shape[0])
    for rel in JITTER_LADDER:
        try:
            factor = linalg.cho_factor(M + rel * scale * eye, lower=True, check_finite=True)
        except linalg.LinAlgError:
            continue
        if rel > 0:
            logger.debug("%s needed jitter %.1e of its mean diagonal", what, rel)
        return factor, rel * scale
    raise SingularMatrixError(f"{what} is singular even with jitter {JITTER_LADDER[-1]:.0e} of its mean diagonal")


@dataclass(frozen=True, eq=False)
class GpPosterior:
    """A fitted GP: ``mean(q) = m0 + k(q, X) alpha`` and ``var(q) = k(q, q) - k(q, X) C k(X, q)``."""

    inducing: np.ndarray
    alpha: np.ndarray
    C: np.ndarray
    kernel: Kernel
    noise_w2: float
    prior_mean: float = 0.0

    def __post_init__(self):
        inducing = np.asarray(self.inducing, dtype=float)
        if inducing.ndim == 1:
            inducing = inducing.reshape(-1, 1) if inducing.size else inducing.reshape(0, 0)
        alpha = np.asarray(self.alpha, dtype=float).ravel()
        C = np.asarray(self.C, dtype=float).reshape(alpha.size, alpha.size)
        if inducing.shape[0] != alpha.size:
            raise ValueError(f"{inducing.shape[0]} inducing inputs but {alpha.size} coefficients")
        object.__setattr__(self, "inducing", inducing)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "noise_w2", float(self.noise_w2))
        object.__setattr__(self, "prior_mean", float(self.prior_mean))

    def __len__(self) -> int:
        return self.alpha.size

    @property
    def input_dim(self) -> Optional[int]:
        return self.inducing.shape[1] if len(self) else None

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kernel": self.kernel.to_dict(),
            "noise_w2": self.noise_w2,
            "prior_mean": self.prior_mean,
            "inducing": self.inducing.tolist(),
            "alpha": self.alpha.tolist(),
            "C": self.C.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "GpPosterior":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported GP format version {d.get('format_version')}")
        return cls(
            inducing=np.array(d["inducing"], dtype=float),
            alpha=np.array(d["alpha"], dtype=float),
            C=np.array(d["C"], dtype=float),
            kernel=kernel_from_dict(d["kernel"]),
            noise_w2=d["noise_w2"],
            prior_mean=d["prior_mean"],
        )

    @classmethod
    def from_json(cls, text: str) -> "GpPosterior":
        return cls.from_dict(json.loads(text))


def gp_predict_batch(gp: GpPosterior, queries: np.ndarray, full_cov: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance (or full covariance) at every query row."""
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    if len(gp) == 0:
        prior = gp.kernel(Q, Q) if full_cov else gp.kernel.diag(Q)
        return np.full(Q.shape[0], gp.prior_mean), prior
    if Q.shape[1] != gp.input_dim:
        raise ValueError(f"query has dimension {Q.shape[1]}, inducing inputs have {gp.input_dim}")
    Kq = gp.kernel(Q, gp.inducing)
    mean = gp.prior_mean + Kq @ gp.alpha
    if full_cov:
        cov = gp.kernel(Q, Q) - Kq @ gp.C @ Kq.T
        return mean, 0.5 * (cov + cov.T)
    var = gp.kernel.diag(Q) - np.einsum("ij,jk,ik->i", Kq, gp.C, Kq)
    clamp = -np.min(var, initial=0.0)
    if clamp > 0:
        logger.debug("posterior variance clamped by %.3g", clamp)
    return mean, np.maximum(var, 0.0)


def gp_predict(gp: GpPosterior, query: np.ndarray) -> Tuple[float, float]:
    """Posterior mean and variance at a single joint input."""
    mean, var = gp_predict_batch(gp, np.asarray(query, dtype=float).reshape(1, -1))
    return float(mean[0]), float(var[0])


def gp_fit_direct(X: np.ndarray, y: np.ndarray, kernel: Kernel, w2: float, prior_mean: float = 0.0) -> GpPosterior:
    """Exact posterior from direct noisy observations ``y = f(X) + noise``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError(f"{X.shape[0]} inputs but {y.size} observations")
    A = gram(kernel, X) + w2 * np.eye(y.size)
    factor, _ = cho_factor_jitter(A, "direct-observation system")
    alpha = linalg.cho_solve(factor, y - prior_mean)
    C = linalg.cho_solve(factor, np.eye(y.size))
    return GpPosterior(X, alpha, 0.5 * (C + C.T), kernel, w2, prior_mean)


def td_factor(a: float, T: float, td_discount: str = "discounted") -> float:
    """Weight of the successor sample in a temporal-difference row."""
    if td_discount == "discounted":
        return float(np.exp(-a * T))
    if td_discount == "literal":
        return 1.0
    raise ValueError(f"td_discount must be 'discounted' or 'literal', got '{td_discount}'")


def difference_operator(L: int, gamma: float) -> np.ndarray:
    """``(L-1) x L`` matrix with rows ``[..., 1, -gamma, ...]``."""
    H = np.zeros((L - 1, L))
    idx = np.arange(L - 1)
    H[idx, idx] = 1.0
    H[idx, idx + 1] = -gamma
    return H


def _gptd_solve(
    X: np.ndarray, H: np.ndarray, rewards: np.ndarray, kernel: Kernel, w2: float, prior_mean: float
) -> GpPosterior:
    if w2 <= 0:
        raise ValueError(f"w2 must be positive, got {w2}")
    K = gram(kernel, X)
    S = H @ K @ H.T + w2 * np.eye(H.shape[0])
    factor, _ = cho_factor_jitter(0.5 * (S + S.T), "GPTD system")
    residual = rewards - prior_mean * H.sum(axis=1)
    alpha = H.T @ linalg.cho_solve(factor, residual)
    C = H.T @ linalg.cho_solve(factor, H)
    return GpPosterior(X, alpha, 0.5 * (C + C.T), kernel, w2, prior_mean)


def _as_inputs(inputs: Union[Trajectory, np.ndarray]) -> np.ndarray:
    if isinstance(inputs, Trajectory):
        return inputs.states
    return np.atleast_2d(np.asarray(inputs, dtype=float))


def gptd_fit(
    inputs: Union[Trajectory, np.ndarray],
    rewards: np.ndarray,
    kernel: Kernel,
    w2: float,
    a: float,
    T: float,
    prior_mean: float = 0.0,
    td_discount: str = "discounted",
) -> GpPosterior:
    """Fits a GP to a value-like function observed only through integral rewards between consecutive samples.

    Observation model: ``f(x_i) - g f(x_{i+1}) = R_i + noise`` with ``g = exp(-a T)`` (or 1 in literal mode).

    Args:
        inputs: L joint inputs (or a trajectory whose states are used)
        rewards: the L-1 integrated rewards
        kernel: prior covariance
        w2: observation noise variance
        a: discount rate of the value
        T: sampling interval of the inputs
        prior_mean: constant prior mean m0
        td_discount: 'discounted' or 'literal'

    Returns:
        GpPosterior: posterior over the L inputs
    """
    X = _as_inputs(inputs)
    rewards = np.asarray(rewards, dtype=float).ravel()
    L = X.shape[0]
    if L < 2:
        raise ValueError("gptd_fit needs at least two inducing samples")
    if rewards.size != L - 1:
        raise ValueError(f"expected {L - 1} rewards for {L} samples, got {rewards.size}")
    H = difference_operator(L, td_factor(a, T, td_discount))
    return _gptd_solve(X, H, rewards, kernel, w2, prior_mean)


def gptd_fit_segments(
    segments: Sequence[Tuple[np.ndarray, np.ndarray]],
    kernel: Kernel,
    w2: float,
    a: float,
    T: float,
    prior_mean: float = 0.0,
    td_discount: str = "discounted",
) -> GpPosterior:
    """GPTD over several disjoint segments ``(inputs_j, rewards_j)``; no difference row links two segments."""
    segments = [(np.atleast_2d(np.asarray(X, dtype=float)), np.asarray(R, dtype=float).ravel()) for X, R in segments]
    segments = [(X, R) for X, R in segments if X.shape[0] >= 2]
    if not segments:
        raise ValueError("gptd_fit_segments needs a segment with at least two samples")
    gamma = td_factor(a, T, td_discount)
    for X, R in segments:
        if R.size != X.shape[0] - 1:
            raise ValueError(f"expected {X.shape[0] - 1} rewards for a {X.shape[0]}-sample segment, got {R.size}")
    H = linalg.block_diag(*[difference_operator(X.shape[0], gamma) for X, _ in segments])
    X_all = np.vstack([X for X, _ in segments])
    R_all = np.concatenate([R for _, R in segments])
    return _gptd_solve(X_all, H, R_all, kernel, w2, prior_mean)


def _same_support(g1: GpPosterior, g2: GpPosterior):
    if g1.inducing.shape != g2.inducing.shape or not np.array_equal(g1.inducing, g2.inducing):
        raise ValueError("gp_kl needs both GPs on the same inducing inputs (use shift_inducing)")
    if g1.kernel != g2.kernel:
        raise ValueError("gp_kl needs both GPs to share one kernel")


def inducing_marginals(gp: GpPosterior, jitter: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Mean vector and covariance of the GP on its own inducing inputs."""
    K = gram(gp.kernel, gp.inducing)
    mean = gp.prior_mean + K @ gp.alpha
    cov = K - K @ gp.C @ K
    cov = 0.5 * (cov + cov.T) + jitter * np.eye(len(gp))
    return mean, cov


def gp_kl(g1: GpPosterior, g2: GpPosterior, jitter: float = 1e-10) -> float:
    """KL divergence ``KL(g1 || g2)`` between two GPs on shared inducing inputs.

    Computed on the inducing-point marginals ``N(m0 + K alpha, K - K C K)``. A diagonal jitter of
    ``jitter`` times the mean prior variance is added to both covariances.
    """
    _same_support(g1, g2)
    L = len(g1)
    if L == 0:
        return 0.0
    scale = float(np.mean(g1.kernel.diag(g1.inducing)))
    mu1, S1 = inducing_marginals(g1, jitter * scale)
    mu2, S2 = inducing_marginals(g2, jitter * scale)
    f1, _ = cho_factor_jitter(S1, "first GP covariance")
    f2, _ = cho_factor_jitter(S2, "second GP covariance")
    diff = mu1 - mu2
    trace_term = np.trace(linalg.cho_solve(f2, S1))
    quad_term = diff @ linalg.cho_solve(f2, diff)
    logdet2 = 2.0 * np.sum(np.log(np.diag(f2[0])))
    logdet1 = 2.0 * np.sum(np.log(np.diag(f1[0])))
    kl = 0.5 * (trace_term + quad_term - L + logdet2 - logdet1)
    if kl < -1e-8:
        logger.warning("gp_kl returned %.3g < 0", kl)
    return float(kl)


def shift_inducing(base: GpPosterior, targets: np.ndarray, max_cond: float = 1e12) -> GpPosterior:
    """Re-expresses ``base`` on a new inducing set so that its predictions at the targets are unchanged.

    Uses ``P = K_ZZ^-1 K_ZX``: ``alpha' = P alpha`` and ``C' = P C P^T``.

    Raises:
        ValueError: on empty targets
        IllConditionedError: when ``cond(K_ZZ)`` exceeds ``max_cond``
    """
    Z = np.atleast_2d(np.asarray(targets, dtype=float))
    if Z.size == 0 or Z.shape[0] == 0:
        raise ValueError("shift_inducing needs at least one target")
    if len(base) == 0:
        L = Z.shape[0]
        return GpPosterior(Z, np.zeros(L), np.zeros((L, L)), base.kernel, base.noise_w2, base.prior_mean)
    if Z.shape[1] != base.input_dim:
        raise ValueError(f"targets have dimension {Z.shape[1]}, inducing inputs have {base.input_dim}")
    K_zz = gram(base.kernel, Z)
    cond = np.linalg.cond(K_zz)
    if not np.isfinite(cond) or cond > max_cond:
        raise IllConditionedError(f"inducing projection has condition number {cond:.3g} > {max_cond:.0e}")
    P = linalg.solve(K_zz, base.kernel(Z, base.inducing), assume_a="pos")
    C = P @ base.C @ P.T
    return GpPosterior(Z, P @ base.alpha, 0.5 * (C + C.T), base.kernel, base.noise_w2, base.prior_mean)


@dataclass(frozen=True, eq=False)
class BaseGpLibrary:
    """GPs fitted offline to minimum-acceptable robustness templates."""

    entries: Tuple[GpPosterior, ...]
    margins: Tuple[float, ...] = ()

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValueError("a base GP library needs at least one entry")
        if any(e.kernel != entries[0].kernel for e in entries):
            raise ValueError("all base GPs must share one kernel")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "margins", tuple(self.margins))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[GpPosterior]:
        return iter(self.entries)

    def __getitem__(self, i: int) -> GpPosterior:
        return self.entries[i]

    @property
    def kernel(self) -> Kernel:
        return self.entries[0].kernel


def spread_targets(inputs: np.ndarray, k: int, kernel: Kernel, max_corr: float = 0.99) -> np.ndarray:
    """Up to ``k`` rows of ``inputs``, latest first.

    Rows whose kernel correlation with a kept row exceeds ``max_corr`` are skipped.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    if X.shape[0] == 0 or k < 1:
        raise ValueError("spread_targets needs at least one input and k >= 1")
    kept = [X.shape[0] - 1]
    for i in range(X.shape[0] - 2, -1, -1):
        if len(kept) == k:
            break
        corr = kernel(X[i : i + 1], X[kept]) / np.sqrt(kernel.diag(X[i : i + 1])[0] * kernel.diag(X[kept]))
        if np.max(corr) <= max_corr:
            kept.append(i)
    return X[sorted(kept)]


def min_kl_to_library(
    gp: GpPosterior, bases: BaseGpLibrary, targets: np.ndarray, jitter: float = 1e-10
) -> Tuple[float, List[float]]:
    """Smallest KL from ``gp`` to any base, all projected onto the same targets."""
    g = shift_inducing(gp, targets)
    kls = [gp_kl(g, shift_inducing(b, targets), jitter) for b in bases]
    return min(kls), kls
