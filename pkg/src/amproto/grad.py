"""Analytic gradients of the composite loss and a central-difference checker."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFinite
from .head import ForwardRecord

TERMS = ("ce", "sem", "overlap")


@dataclass
class GradientBundle:
    bases: np.ndarray  # (C, D, K) ambient gradient
    capacities: np.ndarray  # (C, K), sparsity term excluded
    features: np.ndarray  # (B, D, H, W) or (D, H, W) when built from one sample


def _softmax_backward(P: np.ndarray, gP: np.ndarray) -> np.ndarray:
    return P * (gP - (P * gP).sum(axis=-1, keepdims=True))


def _ce_coeff_grad(rec: ForwardRecord):
    """d(mean CE)/dA as a dense (B,C,K,L) array plus d/dsigma."""
    B = rec.labels.size
    dz = rec.probs.copy()
    dz[np.arange(B), rec.labels] -= 1.0
    dz /= B
    dsig = np.einsum("bc,bck->ck", dz, rec.peak)
    Apk = np.take_along_axis(rec.A, rec.loc[..., None], axis=-1)[..., 0]
    dA = np.zeros_like(rec.A)
    vals = dz[:, :, None] * rec.capacities[None] * 2.0 * Apk
    np.put_along_axis(dA, rec.loc[..., None], vals[..., None], axis=-1)
    return dA, dsig


def _sem_map_grad(rec: ForwardRecord) -> np.ndarray:
    """d(mean SEM)/dM on the ground-truth maps, shape (B, K, L)."""
    P = rec.P
    B = P.shape[0]
    R = rec.mask.sum(axis=1)
    logP = rec.logP
    H = -(P * logP).sum(axis=-1, keepdims=True)
    g = -P * (logP + H)
    scale = np.where(R > 0, 1.0 / np.maximum(R, 1), 0.0) / B
    return g * rec.mask[..., None] * scale[:, None, None]


def _overlap_map_grad(rec: ForwardRecord) -> np.ndarray:
    P = rec.P
    B, K, _ = P.shape
    R = rec.mask.sum(axis=1)
    n = np.linalg.norm(P, axis=-1, keepdims=True)
    Pn = P / n
    G = np.einsum("bkl,bjl->bkj", Pn, Pn)
    pair = (rec.mask[:, :, None] & rec.mask[:, None, :]) & ~np.eye(K, dtype=bool)[None]
    pair = pair.astype(np.float64)
    gP = (np.einsum("bkj,bjl->bkl", pair, Pn) - (pair * G).sum(-1)[..., None] * Pn) / n
    scale = np.where(R >= 2, 2.0 / np.maximum(R * (R - 1), 1), 0.0) / B
    gP *= scale[:, None, None]
    return _softmax_backward(P, gP)


def _coeff_grad_from_maps(rec: ForwardRecord, gM: np.ndarray) -> np.ndarray:
    dA = np.zeros_like(rec.A)
    B = rec.labels.size
    Ay = rec.A[np.arange(B), rec.labels]
    dA[np.arange(B), rec.labels] = gM * 2.0 * Ay
    return dA


def _bundle(rec: ForwardRecord, dA: np.ndarray, dsig: np.ndarray, shape) -> GradientBundle:
    dU = np.einsum("bdl,bckl->cdk", rec.F, dA)
    dF = np.einsum("cdk,bckl->bdl", rec.bases, dA)
    return GradientBundle(dU, dsig, dF.reshape(shape))


def term_gradients(rec: ForwardRecord, feature_shape=None) -> dict[str, GradientBundle]:
    """Unweighted gradients of each batch-mean term (ce, sem, overlap)."""
    shape = feature_shape or rec.F.shape
    zero_sig = np.zeros_like(rec.capacities)
    dA_ce, dsig = _ce_coeff_grad(rec)
    return {
        "ce": _bundle(rec, dA_ce, dsig, shape),
        "sem": _bundle(rec, _coeff_grad_from_maps(rec, _sem_map_grad(rec)), zero_sig, shape),
        "overlap": _bundle(rec, _coeff_grad_from_maps(rec, _overlap_map_grad(rec)),
                           zero_sig.copy(), shape),
    }


def backward_total(rec: ForwardRecord, feature_shape=None) -> GradientBundle:
    """Gradient of ce + gamma1*sem + gamma2*overlap (batch means).

    The sparsity term never enters here; prox_step applies it. Max pooling
    routes gradient to the recorded argmax only, and active-set membership is
    held fixed.
    """
    shape = feature_shape or rec.F.shape
    w = rec.weights
    dA, dsig = _ce_coeff_grad(rec)
    gM = np.zeros_like(rec.P)
    if w.gamma1:
        gM += w.gamma1 * _sem_map_grad(rec)
    if w.gamma2:
        gM += w.gamma2 * _overlap_map_grad(rec)
    if w.gamma1 or w.gamma2:
        dA += _coeff_grad_from_maps(rec, gM)
    return _bundle(rec, dA, dsig, shape)


def numeric_gradient(func, x, eps=None, skip=None, signature=None) -> np.ndarray:
    """Central differences with per-coordinate step eps * (1 + |x_i|).

    Coordinates flagged by ``skip(i)`` are left as NaN, as are coordinates
    whose probes change ``signature(x)`` (e.g. a max-pooling winner), where the
    function is not differentiable.
    """
    x = np.array(x, dtype=np.float64)
    base = 1e-6 if eps is None else eps
    flat = x.reshape(-1)
    out = np.full(flat.size, np.nan)
    sig0 = signature(x) if signature is not None else None
    for i in range(flat.size):
        if skip is not None and skip(i):
            continue
        h = base * (1.0 + abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + h
        fp = func(x)
        moved = signature is not None and signature(x) != sig0
        flat[i] = orig - h
        fm = func(x)
        moved = moved or (signature is not None and signature(x) != sig0)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFinite(f"function is not finite near coordinate {i}")
        if not moved:
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def relative_error(analytic, numeric) -> float:
    """Max over coordinates of |a - n| / max(|a|, |n|, 1e-8), NaN entries ignored."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    ok = ~np.isnan(n)
    if not ok.any():
        return 0.0
    a, n = a[ok], n[ok]
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float((np.abs(a - n) / den).max())


def finite_diff_check(func, point, analytic, eps: float = 1e-6, skip=None,
                      signature=None) -> float:
    """Max relative error between ``analytic`` and central differences of ``func``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return relative_error(analytic, numeric_gradient(func, point, eps, skip, signature))
