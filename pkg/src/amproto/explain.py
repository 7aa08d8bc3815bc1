"""Per-direction evidence for a prediction, grounded in cached training patches."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import embed
from .data import Dataset
from .errors import EmptyClass, IOFailure, StaleCache
from .formats import fnv1a64
from .head import class_logits, response_map
from .trainer import ModelState, checkpoint_bytes


def fingerprint(state: ModelState) -> int:
    return fnv1a64(checkpoint_bytes(state))


@dataclass
class FeatureCache:
    fingerprint: int
    indices: dict[int, np.ndarray]  # class -> dataset indices
    features: dict[int, np.ndarray]  # class -> (n_c, D, H, W)


def build_cache(state: ModelState, data: Dataset) -> FeatureCache:
    idx = {c: np.flatnonzero(data.labels == c) for c in range(data.num_classes)}
    feats = {c: embed(data.raw[i], state.backbone) for c, i in idx.items()}
    return FeatureCache(fingerprint(state), idx, feats)


@dataclass
class PatchReference:
    sample: int  # dataset index
    h: int
    w: int
    energy: float


@dataclass
class PartEvidence:
    direction: int
    capacity: float
    heatmap: np.ndarray  # (H, W), capacity-weighted
    peak: tuple[int, int]
    contribution: float
    patch: PatchReference
    heatmap_file: str | None = None


@dataclass
class Explanation:
    predicted_class: int
    total_evidence: float
    logits: np.ndarray
    parts: list[PartEvidence] = field(default_factory=list)


def nearest_patch(k: int, c: int, state: ModelState, cache: FeatureCache) -> PatchReference:
    """Training patch of class c with the largest (U_ck^T F_hw)^2; ties go to the
    lowest (sample, h, w)."""
    F = cache.features.get(c)
    if F is None or F.shape[0] == 0:
        raise EmptyClass(f"cache holds no samples of class {c}")
    e = np.einsum("d,ndhw->nhw", state.bases[c][:, k], F) ** 2
    j, h, w = np.unravel_index(int(e.argmax()), e.shape)
    return PatchReference(int(cache.indices[c][j]), int(h), int(w), float(e[j, h, w]))


def explain(x, state: ModelState, cache: FeatureCache, target_class: int | None = None,
            check_cache: bool = True) -> Explanation:
    """Explain the prediction for one raw input (D_in, H, W).

    Only active directions of the explained class appear; their contributions
    add up to that class's logit. ``target_class`` overrides the predicted
    class (debugging aid).
    """
    if check_cache and cache.fingerprint != fingerprint(state):
        raise StaleCache("feature cache was built for a different model state")
    F = embed(x, state.backbone)
    z = class_logits(F, state.bases, state.capacities)
    c = int(z.argmax()) if target_class is None else int(target_class)
    sig = state.capacities[c]
    maps = response_map(F, state.bases[c], sig)
    parts = []
    for k in np.flatnonzero(sig > 0):
        hm = maps[k]
        h, w = np.unravel_index(int(hm.argmax()), hm.shape)
        parts.append(PartEvidence(int(k), float(sig[k]), hm, (int(h), int(w)), float(hm[h, w]),
                                  nearest_patch(int(k), c, state, cache)))
    total = float(sum(p.contribution for p in parts))
    return Explanation(c, total, z, parts)


def heatmap_pixels(hm) -> np.ndarray:
    """Min-max scale to 0..255 (round half up); a constant map becomes all zeros."""
    hm = np.asarray(hm, dtype=np.float64)
    lo, hi = hm.min(), hm.max()
    if hi == lo:
        return np.zeros(hm.shape, dtype=np.uint8)
    return np.floor(255.0 * (hm - lo) / (hi - lo) + 0.5).astype(np.uint8)


def export_heatmap_pgm(hm, path) -> None:
    """Binary PGM (P5, maxval 255), row-major from the top-left."""
    hm = np.asarray(hm, dtype=np.float64)
    if hm.ndim != 2 or not np.isfinite(hm).all():
        raise ValueError("heatmap must be a finite 2-D array")
    H, W = hm.shape
    try:
        Path(path).write_bytes(b"P5\n%d %d\n255\n" % (W, H) + heatmap_pixels(hm).tobytes())
    except OSError as e:
        raise IOFailure(str(e)) from e


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None or int(m.group(3)) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    W, H = int(m.group(1)), int(m.group(2))
    pix = data[m.end():]
    if len(pix) != W * H:
        raise ValueError(f"{path}: expected {W * H} pixels, found {len(pix)}")
    return np.frombuffer(pix, dtype=np.uint8).reshape(H, W)


def explanation_dict(expl: Explanation) -> dict:
    return {
        "predicted_class": expl.predicted_class,
        "total_evidence": expl.total_evidence,
        "parts": [{
            "direction": p.direction,
            "capacity": p.capacity,
            "peak": [p.peak[0], p.peak[1]],
            "contribution": p.contribution,
            "patch": {"sample": p.patch.sample, "h": p.patch.h, "w": p.patch.w},
            "heatmap_file": p.heatmap_file,
        } for p in expl.parts],
    }


def export_explanation_json(expl: Explanation, path, write_heatmaps: bool = True) -> None:
    """Write the JSON summary and, next to it, one PGM per part.

    Floats use Python's shortest round-trip repr, so every value parses back
    to the identical double.
    """
    path = Path(path)
    if write_heatmaps:
        for p in expl.parts:
            p.heatmap_file = f"{path.stem}_k{p.direction}.pgm"
            export_heatmap_pgm(p.heatmap, path.parent / p.heatmap_file)
    try:
        path.write_text(json.dumps(explanation_dict(expl), indent=2) + "\n")
    except OSError as e:
        raise IOFailure(str(e)) from e


def occlusion_drop(x, state: ModelState, c: int, h: int, w: int) -> float:
    """Decrease of z_c when the raw input is zeroed at grid cell (h, w)."""
    x = np.asarray(x, dtype=np.float64)
    z0 = class_logits(embed(x, state.backbone), state.bases, state.capacities)[c]
    xo = x.copy()
    xo[:, h, w] = 0.0
    return float(z0 - class_logits(embed(xo, state.backbone), state.bases, state.capacities)[c])
