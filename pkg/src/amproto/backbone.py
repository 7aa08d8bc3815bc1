"""Per-location affine feature extractor (1x1 linear map, no spatial mixing)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadShape


@dataclass
class BackboneParams:
    weight: np.ndarray  # (D, D_in)
    bias: np.ndarray  # (D,)

    @classmethod
    def init(cls, D: int, D_in: int, seed: int) -> "BackboneParams":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(D_in)
        return cls(rng.uniform(-bound, bound, size=(D, D_in)), np.zeros(D))

    def copy(self) -> "BackboneParams":
        return BackboneParams(self.weight.copy(), self.bias.copy())


def embed(raw, params: BackboneParams) -> np.ndarray:
    """F_hw = W raw_hw + b. Accepts (D_in, H, W) or a batch (B, D_in, H, W)."""
    raw = np.asarray(raw, dtype=np.float64)
    W, b = params.weight, params.bias
    if raw.ndim not in (3, 4) or raw.shape[-3] != W.shape[1]:
        raise BadShape(f"input {raw.shape} does not have {W.shape[1]} channels")
    F = np.einsum("de,...ehw->...dhw", W, raw)
    return F + b[:, None, None]


def embed_backward(upstream, raw, params: BackboneParams):
    """Return (dL/dW, dL/db, dL/draw) given dL/dF, summed over locations (and batch)."""
    raw = np.asarray(raw, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    W = params.weight
    if up.shape[:-3] != raw.shape[:-3] or up.shape[-2:] != raw.shape[-2:] \
            or up.shape[-3] != W.shape[0] or raw.shape[-3] != W.shape[1]:
        raise BadShape(f"upstream {up.shape} incompatible with input {raw.shape}")
    u = up.reshape(-1, up.shape[-3], up.shape[-2] * up.shape[-1])
    x = raw.reshape(-1, raw.shape[-3], raw.shape[-2] * raw.shape[-1])
    dW = np.einsum("bdl,bel->de", u, x)
    db = u.sum(axis=(0, 2))
    draw = np.einsum("de,...dhw->...ehw", W, up)
    return dW, db, draw
