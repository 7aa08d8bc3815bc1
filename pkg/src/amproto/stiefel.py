"""Stiefel manifold geometry: QR, random points, tangent projection, retraction."""
from __future__ import annotations

import numpy as np

from .errors import BadShape, RankDeficient

RANK_TOL = 1e-12


def _as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
        raise BadShape(f"expected a non-empty 2-D matrix, got shape {A.shape}")
    return A


def qr_factor(A) -> tuple[np.ndarray, np.ndarray]:
    """Thin Householder QR with the diagonal of R made strictly positive.

    The sign fix makes the factorization unique, so equal inputs give
    bit-identical outputs.
    """
    A = _as_matrix(A)
    D, K = A.shape
    if K > D:
        raise BadShape(f"qr_factor needs rows >= cols, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise RankDeficient("matrix has non-finite entries")
    Q, R = np.linalg.qr(A, mode="reduced")  # LAPACK geqrf: Householder
    d = np.diag(R)
    if np.any(np.abs(d) <= RANK_TOL):
        raise RankDeficient(f"min |R_kk| = {np.abs(d).min():.3e}")
    s = np.where(d < 0, -1.0, 1.0)
    return Q * s, R * s[:, None]


def orthonormality_residual(U) -> float:
    """||U^T U - I||_F."""
    U = np.asarray(U, dtype=np.float64)
    return float(np.linalg.norm(U.T @ U - np.eye(U.shape[1])))


def random_stiefel(D: int, K: int, seed: int) -> np.ndarray:
    """Q factor of an i.i.d. standard Gaussian D x K matrix."""
    if K < 1 or D < 1:
        raise BadShape(f"need D, K >= 1, got D={D}, K={K}")
    if K > D:
        raise BadShape(f"K={K} exceeds D={D}")
    rng = np.random.default_rng(seed)
    Q, _ = qr_factor(rng.standard_normal((D, K)))
    return Q


def tangent_project(U, G) -> np.ndarray:
    """Project an ambient matrix onto the tangent space at U (embedded metric)."""
    U = _as_matrix(U)
    G = _as_matrix(G)
    if U.shape != G.shape:
        raise BadShape(f"shape mismatch {U.shape} vs {G.shape}")
    UtG = U.T @ G
    return G - U @ (0.5 * (UtG + UtG.T))


def retract(U, xi) -> np.ndarray:
    U = _as_matrix(U)
    xi = _as_matrix(xi)
    if U.shape != xi.shape:
        raise BadShape(f"shape mismatch {U.shape} vs {xi.shape}")
    Q, _ = qr_factor(U + xi)
    return Q


def rsgd_step(U, ambient_grad, lr: float) -> np.ndarray:
    """One Riemannian SGD step: retract(U, -lr * grad_R)."""
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    return retract(U, -lr * tangent_project(U, ambient_grad))


def reorthonormalize(U, tol: float = 1e-8) -> np.ndarray:
    """Re-run QR on U if it has drifted off the manifold by more than tol."""
    if orthonormality_residual(U) > tol:
        return qr_factor(U)[0]
    return np.asarray(U, dtype=np.float64)
