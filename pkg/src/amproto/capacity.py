"""Nonnegative capacity weights: proximal soft-thresholding and active sets."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import BadShape

PROTECTED_FLOOR = 1e-6


class ActiveSet(NamedTuple):
    indices: np.ndarray
    rank: int


def prox_step(sigma, grad, lr: float, lam: float, protect: bool = True) -> np.ndarray:
    """max(sigma - lr*grad - lr*lam, 0) elementwise.

    With ``protect`` the argmax-sigma entry (lowest index on ties) is floored at
    1e-6 instead of 0, so the class always keeps one active direction.
    Works on a single vector (K,) or a stack (C, K), protecting per row.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if sigma.shape != grad.shape or sigma.ndim not in (1, 2):
        raise BadShape(f"sigma {sigma.shape} vs grad {grad.shape}")
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    out = np.maximum(sigma - lr * grad - lr * lam, 0.0)
    if protect:
        rows = np.atleast_2d(out)
        keep = np.argmax(np.atleast_2d(sigma), axis=1)
        r = np.arange(rows.shape[0])
        rows[r, keep] = np.maximum(rows[r, keep], PROTECTED_FLOOR)
    return out


def active_set(sigma) -> ActiveSet:
    sigma = np.asarray(sigma, dtype=np.float64)
    idx = np.flatnonzero(sigma > 0)
    return ActiveSet(idx, int(idx.size))


def active_ranks(sigmas) -> np.ndarray:
    """Per-class active rank for a (C, K) capacity stack."""
    return (np.asarray(sigmas) > 0).sum(axis=1)
