"""Forward pass of the subspace head: energies, response maps, regularizers, logits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capacity import active_set
from .errors import BadLabel, BadShape


@dataclass(frozen=True)
class LossWeights:
    gamma1: float = 0.01  # spatial entropy
    gamma2: float = 0.01  # overlap
    lam: float = 1e-4  # sparsity

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "lam"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a finite nonnegative number, got {v}")


@dataclass
class ClassSubspace:
    basis: np.ndarray  # (D, K), orthonormal columns
    capacity: np.ndarray  # (K,), nonnegative

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.float64)
        self.capacity = np.asarray(self.capacity, dtype=np.float64)
        if self.basis.ndim != 2 or self.capacity.shape != (self.basis.shape[1],):
            raise BadShape(f"basis {self.basis.shape} / capacity {self.capacity.shape}")


def stack_subspaces(subspaces) -> tuple[np.ndarray, np.ndarray]:
    """List of ClassSubspace -> (bases (C,D,K), capacities (C,K))."""
    return (np.stack([s.basis for s in subspaces]),
            np.stack([s.capacity for s in subspaces]))


def projection_energy(f, basis, capacity) -> float:
    f = np.asarray(f, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    if f.shape != (basis.shape[0],):
        raise BadShape(f"feature {f.shape} vs basis {basis.shape}")
    coef = basis.T @ f
    return float(np.dot(capacity, coef * coef))


def _check_feature(F, D: int) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3 or F.shape[0] != D:
        raise BadShape(f"feature tensor {F.shape} does not have depth {D}")
    return F


def response_map(F, basis, capacity=None) -> np.ndarray:
    """(U_k^T F_hw)^2 as a (K, H, W) array, scaled by capacity if given."""
    basis = np.asarray(basis, dtype=np.float64)
    F = _check_feature(F, basis.shape[0])
    M = np.einsum("dk,dhw->khw", basis, F) ** 2
    if capacity is not None:
        M = M * np.asarray(capacity, dtype=np.float64)[:, None, None]
    return M


def spatial_softmax(M) -> np.ndarray:
    """Softmax over the trailing two (spatial) axes."""
    M = np.asarray(M, dtype=np.float64)
    flat = M.reshape(M.shape[:-2] + (-1,))
    e = np.exp(flat - flat.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).reshape(M.shape)


def _entropies(P: np.ndarray) -> np.ndarray:
    flat = P.reshape(P.shape[:-2] + (-1,))
    with np.errstate(divide="ignore"):
        logp = np.where(flat > 0, np.log(np.where(flat > 0, flat, 1.0)), 0.0)
    return -(flat * logp).sum(axis=-1)


def sem_loss(P, active) -> float:
    """Mean spatial entropy over the active directions; 0 if none are active.

    ``P`` is (K, H, W); ``active`` an ActiveSet or index array.
    """
    idx = getattr(active, "indices", active)
    idx = np.asarray(idx, dtype=int)
    if idx.size == 0:
        return 0.0
    return float(_entropies(np.asarray(P)[idx]).mean())


def overlap_loss(P, active) -> float:
    """Mean cosine similarity over ordered pairs of active maps; 0 when rank < 2."""
    idx = np.asarray(getattr(active, "indices", active), dtype=int)
    R = idx.size
    if R < 2:
        return 0.0
    V = np.asarray(P)[idx].reshape(R, -1)
    V = V / np.linalg.norm(V, axis=1, keepdims=True)
    G = V @ V.T
    return float((G.sum() - np.trace(G)) / (R * (R - 1)))


def class_logits(F, bases, capacities, return_argmax: bool = False):
    """z_c = sum_k sigma_ck * max_hw (U_ck^T F_hw)^2.

    With ``return_argmax`` also returns the (C, K) flat row-major location of
    each direction's maximum (lowest index on ties).
    """
    bases = np.asarray(bases, dtype=np.float64)
    F = _check_feature(F, bases.shape[1])
    A = np.einsum("cdk,dl->ckl", bases, F.reshape(F.shape[0], -1))
    M = A * A
    loc = M.argmax(axis=-1)
    peak = np.take_along_axis(M, loc[..., None], axis=-1)[..., 0]
    z = (np.asarray(capacities) * peak).sum(axis=-1)
    if return_argmax:
        return z, loc
    return z


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


@dataclass
class LossBreakdown:
    ce: float
    sem: float
    overlap: float
    sparse: float
    total: float
    logits: np.ndarray  # (C,) for one sample, (B, C) for a batch
    predicted_class: object  # int or (B,) int array


@dataclass
class ForwardRecord:
    """Everything the backward pass needs from one batched forward."""
    F: np.ndarray  # (B, D, L)
    labels: np.ndarray  # (B,)
    bases: np.ndarray
    capacities: np.ndarray
    weights: LossWeights
    A: np.ndarray  # (B, C, K, L) coefficients U^T F
    loc: np.ndarray  # (B, C, K) argmax location per direction
    peak: np.ndarray  # (B, C, K) pooled energies
    logits: np.ndarray  # (B, C)
    probs: np.ndarray  # (B, C)
    P: np.ndarray  # (B, K, L) spatial softmax of the ground-truth class maps
    logP: np.ndarray
    mask: np.ndarray  # (B, K) active directions of the ground-truth class
    ce_each: np.ndarray
    sem_each: np.ndarray
    overlap_each: np.ndarray
    breakdown: LossBreakdown


def forward_batch(F, labels, bases, capacities, weights: LossWeights) -> ForwardRecord:
    """Batched forward of the composite loss; per-sample terms are averaged.

    The spatial regularizers use each sample's ground-truth class only.
    """
    bases = np.asarray(bases, dtype=np.float64)
    capacities = np.asarray(capacities, dtype=np.float64)
    C, D, K = bases.shape
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 4 or F.shape[1] != D:
        raise BadShape(f"batch features {F.shape} do not have depth {D}")
    B = F.shape[0]
    F = F.reshape(B, D, -1)
    labels = np.asarray(labels, dtype=np.int64).reshape(B)
    if np.any((labels < 0) | (labels >= C)):
        raise BadLabel(f"labels must lie in [0, {C})")

    A = np.einsum("cdk,bdl->bckl", bases, F)
    M = A * A
    loc = M.argmax(axis=-1)
    peak = np.take_along_axis(M, loc[..., None], axis=-1)[..., 0]
    logits = (capacities[None] * peak).sum(axis=-1)
    logp = log_softmax(logits)
    probs = np.exp(logp)
    ce_each = -logp[np.arange(B), labels]

    My = M[np.arange(B), labels]  # (B, K, L)
    logP = log_softmax(My)  # finite even where P underflows to 0
    P = np.exp(logP)
    mask = capacities[labels] > 0
    R = mask.sum(axis=1)
    H = -(P * logP).sum(axis=-1)
    sem_each = np.where(R > 0, (H * mask).sum(axis=1) / np.maximum(R, 1), 0.0)

    Pn = P / np.linalg.norm(P, axis=-1, keepdims=True)
    G = np.einsum("bkl,bjl->bkj", Pn, Pn)
    pair = mask[:, :, None] & mask[:, None, :]
    pair &= ~np.eye(K, dtype=bool)[None]
    denom = np.maximum(R * (R - 1), 1)
    overlap_each = np.where(R >= 2, (G * pair).sum(axis=(1, 2)) / denom, 0.0)

    ce = float(ce_each.mean())
    sem = float(sem_each.mean())
    ov = float(overlap_each.mean())
    sparse = float(capacities.sum())
    total = ce + weights.gamma1 * sem + weights.gamma2 * ov + weights.lam * sparse
    bd = LossBreakdown(ce, sem, ov, sparse, total, logits, logits.argmax(axis=1))
    return ForwardRecord(F, labels, bases, capacities, weights, A, loc, peak, logits,
                         probs, P, logP, mask, ce_each, sem_each, overlap_each, bd)


def total_loss(F, label: int, bases, capacities, weights: LossWeights) -> LossBreakdown:
    """Composite loss for one feature tensor (D, H, W)."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3:
        raise BadShape(f"expected (D, H, W), got {F.shape}")
    C = np.asarray(bases).shape[0]
    if not (0 <= int(label) < C):
        raise BadLabel(f"label {label} outside [0, {C})")
    bd = forward_batch(F[None], [label], bases, capacities, weights).breakdown
    return LossBreakdown(bd.ce, bd.sem, bd.overlap, bd.sparse, bd.total,
                         bd.logits[0], int(bd.predicted_class[0]))


def regularizers_for(F, bases, capacities, c: int) -> tuple[float, float]:
    """(sem, overlap) of class c on one feature tensor, via the scalar helpers."""
    M = response_map(F, bases[c])
    P = spatial_softmax(M)
    act = active_set(capacities[c])
    return sem_loss(P, act), overlap_loss(P, act)
