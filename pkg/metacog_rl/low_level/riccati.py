"""Model-based discounted LQR oracle (Kleinman iteration with vectorized Lyapunov solves)."""
import logging
from typing import Tuple

import numpy as np

from metacog_rl.common.errors import NonConvergenceError, NotStabilizableError


logger = logging.getLogger(__name__)


def solve_lyapunov(A: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Solves ``A^T X + X A + Q = 0`` by vectorization.

    Raises:
        NotStabilizableError: when the Kronecker system is singular
    """
    n = A.shape[0]
    eye = np.eye(n)
    L = np.kron(eye, A.T) + np.kron(A.T, eye)
    try:
        x = np.linalg.solve(L, -np.asarray(Q, dtype=float).ravel())
    except np.linalg.LinAlgError as e:
        raise NotStabilizableError(f"Lyapunov operator is singular: {e}") from e
    X = x.reshape(n, n)
    return 0.5 * (X + X.T)


def is_hurwitz(A: np.ndarray) -> bool:
    return bool(np.max(np.linalg.eigvals(A).real) < 0)


def bass_gain(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Stabilizing gain ``K = B^T Y^-1`` from ``(A + bI) Y + Y (A + bI)^T = 2 B B^T`` with ``b > ||A||``."""
    beta = float(np.linalg.norm(A, 2)) + 1.0
    M = A + beta * np.eye(A.shape[0])
    # M is anti-Hurwitz, so -M^T Y - Y(-M) = 2BB^T is a standard Lyapunov equation in Y.
    Y = solve_lyapunov(-M.T, 2.0 * B @ B.T)
    try:
        K = np.linalg.solve(Y, B).T
    except np.linalg.LinAlgError as e:
        raise NotStabilizableError("controllability Gramian is singular") from e
    if not np.all(np.isfinite(K)) or not is_hurwitz(A - B @ K):
        raise NotStabilizableError("no stabilizing initial gain found")
    return K


def riccati_oracle(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    gamma: float = 0.0,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> Tuple[np.ndarray, np.ndarray]:
    """Discounted LQR solution of ``min int e^{-gamma t} (x^T Q x + u^T R u) dt``.

    Runs Kleinman policy iteration on the shifted system ``A - gamma/2 I``.

    Returns:
        (P, K): the Riccati solution and the gain of ``u = -K x``

    Raises:
        NotStabilizableError: when the shifted pair cannot be stabilized or P is not PSD
        NonConvergenceError: when ``max_iter`` is reached
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise ValueError("R must be positive definite")
    As = A - 0.5 * gamma * np.eye(A.shape[0])

    K = np.zeros((B.shape[1], A.shape[0])) if is_hurwitz(As) else bass_gain(As, B)
    P_prev = None
    changes = []
    for k in range(max_iter):
        Acl = As - B @ K
        if not is_hurwitz(Acl):
            raise NotStabilizableError(f"iterate {k} is not stabilizing")
        P = solve_lyapunov(Acl, Q + K.T @ R @ K)
        K = np.linalg.solve(R, B.T @ P)
        if P_prev is not None:
            change = float(np.linalg.norm(P - P_prev))
            changes.append(change)
            if change <= tol * max(1.0, float(np.linalg.norm(P))):
                break
        P_prev = P
    else:
        raise NonConvergenceError(f"Kleinman iteration did not converge in {max_iter} iterations", changes)

    min_eig = float(np.min(np.linalg.eigvalsh(P)))
    if min_eig < -1e-8 * max(1.0, float(np.linalg.norm(P))):
        raise NotStabilizableError(f"Riccati solution is not PSD (min eigenvalue {min_eig:.3g})")
    logger.debug("Kleinman iteration converged after %d steps", len(changes) + 1)
    return P, K


def riccati_residual(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray, gamma: float, P: np.ndarray) -> float:
    """Frobenius norm of the shifted algebraic Riccati equation at ``P``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    As = A - 0.5 * gamma * np.eye(A.shape[0])
    res = As.T @ P + P @ As - P @ B @ np.linalg.solve(np.atleast_2d(R), B.T @ P) + np.atleast_2d(Q)
    return float(np.linalg.norm(res))
