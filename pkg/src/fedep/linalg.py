"""Dense linear algebra, proximal operators and Stiefel-manifold geometry.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. A point on the
Stiefel manifold St(n, m) is an n x m array with orthonormal columns; use
:func:`check_stiefel` to validate one.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray

ORTHO_TOL = 1e-10


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateStepError(ArithmeticError):
    """The retraction input lost column rank; the caller should shrink the step."""


def _as_matrix(a: Array, name: str = "matrix") -> Array:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    return a


def soft_threshold(M: Array, tau: float) -> Array:
    """Entrywise prox of ``tau * ||.||_1``: sign(m) * max(|m| - tau, 0)."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    M = np.asarray(M, dtype=float)
    return np.sign(M) * np.maximum(np.abs(M) - tau, 0.0)


def prox_l21(M: Array, tau: float) -> Array:
    """Row-wise prox of ``tau * ||.||_{2,1}``.

    Each row r becomes max(0, 1 - tau/||r||) * r; zero rows stay zero.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    M = np.asarray(M, dtype=float)
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    scale = np.zeros_like(norms)
    nz = norms > tau
    scale[nz] = 1.0 - tau / norms[nz]
    return M * scale


def l21_norm(M: Array) -> float:
    return float(np.linalg.norm(M, axis=1).sum())


def sym(A: Array) -> Array:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"sym needs a square matrix, got shape {A.shape}")
    return 0.5 * (A + A.T)


def frobenius_inner(A: Array, B: Array) -> float:
    """<A, B> = Tr(A^T B)."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ShapeError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.vdot(A, B))


def qr_positive(A: Array) -> tuple[Array, Array]:
    """Thin QR with the diagonal of R forced nonnegative (unique for full rank A)."""
    Q, R = np.linalg.qr(A)
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return Q * signs, R * signs[:, None]


def orthonormality_error(W: Array) -> float:
    """||W^T W - I||_F."""
    W = np.asarray(W, dtype=float)
    return float(np.linalg.norm(W.T @ W - np.eye(W.shape[1])))


def check_stiefel(W: Array, tol: float = ORTHO_TOL) -> Array:
    """Validate that ``W`` lies on St(n, m) and return it as a float array."""
    W = _as_matrix(W, "Stiefel point")
    n, m = W.shape
    if m > n:
        raise ShapeError(f"Stiefel point needs m <= n, got {n}x{m}")
    if not np.all(np.isfinite(W)):
        raise ValueError("Stiefel point has non-finite entries")
    err = orthonormality_error(W)
    if err > tol:
        raise ValueError(f"columns are not orthonormal (||W^T W - I||_F = {err:.3e})")
    return W


def retract(W: Array, D: Array, rank_tol: float = 1e-12) -> Array:
    """QR retraction of the step ``D`` at ``W``.

    Returns the Q factor of ``W + D`` with positive R diagonal. ``D == 0``
    returns ``W`` unchanged.
    """
    W = np.asarray(W, dtype=float)
    D = np.asarray(D, dtype=float)
    if D.shape != W.shape:
        raise ShapeError(f"step shape {D.shape} does not match point shape {W.shape}")
    if not np.any(D):
        return W.copy()
    Q, R = qr_positive(W + D)
    diag = np.abs(np.diag(R))
    if diag.min() <= rank_tol * max(1.0, diag.max()):
        raise DegenerateStepError("W + D is rank deficient; shrink the step")
    return Q


def polar_factor(A: Array) -> Array:
    """Orthonormal polar factor U V^T of A = U S V^T (nearest Stiefel point)."""
    u, _, vt = np.linalg.svd(A, full_matrices=False)
    return u @ vt


def projector_distance(W1: Array, W2: Array) -> float:
    """||W1 W1^T - W2 W2^T||_F, a basis-independent subspace distance."""
    return float(np.linalg.norm(W1 @ W1.T - W2 @ W2.T))


def power_norm_sq(U: Array, steps: int = 5, seed: int = 0) -> float:
    """Estimate ||U||_2^2 with a few power iterations on U U^T.

    The start vector is fixed by ``seed`` so the estimate is reproducible.
    """
    U = np.asarray(U, dtype=float)
    if not np.any(U):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(U.shape[0])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(steps):
        w = U @ (U.T @ v)
        est = float(np.linalg.norm(w))
        if est == 0.0:
            return 0.0
        v = w / est
    return est
