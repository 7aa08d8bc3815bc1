"""Decoupled training loop: SGD for the backbone, Riemannian SGD for the bases,
proximal steps for the capacities, under one cosine-annealed learning rate."""
from __future__ import annotations

import copy
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneParams, embed, embed_backward
from .capacity import active_ranks, prox_step
from .data import Dataset
from .errors import (BadShape, BadStep, CorruptCheckpoint, EmptyDataset, InvariantViolation,
                     IOFailure, NonFinite, RankDeficient)
from .formats import Reader, fnv1a64
from .grad import backward_total
from .head import LossBreakdown, LossWeights, forward_batch
from .stiefel import orthonormality_residual, qr_factor, random_stiefel, rsgd_step

log = logging.getLogger(__name__)

MANIFOLD_TOL = 1e-8
REORTH_EVERY = 100
AMPC_MAGIC = b"AMPC"
AMPC_VERSION = 1


@dataclass
class TrainingConfig:
    epochs: int = 60
    batch_size: int = 32
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    K: int = 10
    D: int = 16  # feature depth
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 disables

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.K < 1 or self.D < self.K:
            raise ValueError("need epochs >= 0, batch_size >= 1, D >= K >= 1")
        # lr == 0 is allowed and freezes the model
        if not (self.lr_max >= self.lr_min >= 0):
            raise ValueError("need lr_max >= lr_min >= 0")


@dataclass
class ModelState:
    backbone: BackboneParams
    bases: np.ndarray  # (C, D, K)
    capacities: np.ndarray  # (C, K)
    step: int = 0
    epoch: int = 0

    @property
    def num_classes(self) -> int:
        return self.bases.shape[0]

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def residual(self) -> float:
        return max(orthonormality_residual(U) for U in self.bases)


def init_model(num_classes: int, D_in: int, cfg: TrainingConfig) -> ModelState:
    bb = BackboneParams.init(cfg.D, D_in, cfg.seed)
    bases = np.stack([random_stiefel(cfg.D, cfg.K, cfg.seed + c) for c in range(num_classes)])
    return ModelState(bb, bases, np.ones((num_classes, cfg.K)))


def cosine_lr(t: int, T: int, lr_max: float, lr_min: float) -> float:
    if T < 1 or not 0 <= t <= T:
        raise BadStep(f"step {t} outside [0, {T}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / T))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


@dataclass
class EpochReport:
    epoch: int
    loss: LossBreakdown  # means over samples; logits/predicted_class unused
    accuracy: float
    ranks: np.ndarray  # (C,)
    residual: float
    lr: float = 0.0

    def row(self) -> dict:
        return {"epoch": self.epoch, "ce": self.loss.ce, "sem": self.loss.sem,
                "overlap": self.loss.overlap, "sparse": self.loss.sparse,
                "total": self.loss.total, "accuracy": self.accuracy,
                "mean_rank": float(np.mean(self.ranks)), "residual": self.residual,
                "lr": self.lr}


class _Accumulator:
    def __init__(self):
        self.n = 0
        self.correct = 0
        self.sums = np.zeros(3)
        self.sparse = 0.0

    def add(self, rec, weight_sparse: float) -> None:
        b = rec.labels.size
        self.n += b
        self.correct += int((rec.breakdown.predicted_class == rec.labels).sum())
        self.sums += b * np.array([rec.breakdown.ce, rec.breakdown.sem, rec.breakdown.overlap])
        self.sparse += b * weight_sparse

    def breakdown(self, w: LossWeights) -> LossBreakdown:
        ce, sem, ov = self.sums / self.n
        sparse = self.sparse / self.n
        total = ce + w.gamma1 * sem + w.gamma2 * ov + w.lam * sparse
        return LossBreakdown(ce, sem, ov, sparse, total, np.empty(0), None)


def train_epoch(state: ModelState, data: Dataset, cfg: TrainingConfig,
                total_steps: int | None = None) -> tuple[ModelState, EpochReport]:
    """One pass over ``data``; returns an updated copy, ``state`` is never mutated.

    A numeric failure raises and leaves the caller with the epoch-start state.
    """
    if len(data) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if data.channels != state.backbone.weight.shape[1] or data.num_classes != state.num_classes:
        raise BadShape("dataset dimensions do not match the model")
    T = total_steps or cfg.epochs * steps_per_epoch(len(data), cfg.batch_size)
    s = state.copy()
    w = cfg.weights
    order = np.random.default_rng(cfg.seed ^ s.epoch).permutation(len(data))
    acc = _Accumulator()
    lr = 0.0
    for start in range(0, len(data), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        raw = data.raw[idx]
        F = embed(raw, s.backbone)
        rec = forward_batch(F, data.labels[idx], s.bases, s.capacities, w)
        acc.add(rec, float(s.capacities.sum()))
        g = backward_total(rec, F.shape)
        dW, db, _ = embed_backward(g.features, raw, s.backbone)
        lr = cosine_lr(min(s.step, T), max(T, 1), cfg.lr_max, cfg.lr_min)
        if lr > 0:
            s.backbone.weight -= lr * dW
            s.backbone.bias -= lr * db
            try:
                s.bases = np.stack([rsgd_step(U, G, lr) for U, G in zip(s.bases, g.bases)])
            except RankDeficient as e:
                raise NonFinite(f"retraction failed at step {s.step}; epoch rolled back") from e
            s.capacities = prox_step(s.capacities, g.capacities, lr, w.lam)
        s.step += 1
        if s.step % REORTH_EVERY == 0:
            s.bases = np.stack([_reorth(U) for U in s.bases])
        if not (np.isfinite(s.backbone.weight).all() and np.isfinite(s.bases).all()
                and np.isfinite(s.capacities).all()):
            raise NonFinite(f"non-finite parameters at step {s.step}; epoch rolled back")
    s.epoch += 1
    rep = EpochReport(s.epoch, acc.breakdown(w), acc.correct / acc.n,
                      active_ranks(s.capacities), s.residual(), lr)
    if rep.residual > MANIFOLD_TOL:
        raise InvariantViolation(f"orthonormality residual {rep.residual:.3e}")
    return s, rep


def _reorth(U: np.ndarray) -> np.ndarray:
    if orthonormality_residual(U) > MANIFOLD_TOL:
        return qr_factor(U)[0]
    return U


def fit(data: Dataset, cfg: TrainingConfig, state: ModelState | None = None,
        checkpoint_dir=None, callback=None) -> tuple[ModelState, list[EpochReport]]:
    cfg.validate()
    if state is None:
        state = init_model(data.num_classes, data.channels, cfg)
    T = cfg.epochs * steps_per_epoch(len(data), cfg.batch_size)
    reports = []
    for _ in range(cfg.epochs):
        state, rep = train_epoch(state, data, cfg, T)
        reports.append(rep)
        log.debug("epoch %d ce=%.4f acc=%.3f rank=%.2f", rep.epoch, rep.loss.ce,
                  rep.accuracy, float(rep.ranks.mean()))
        if callback is not None:
            callback(state, rep)
        if checkpoint_dir and cfg.checkpoint_every and rep.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"epoch{rep.epoch:04d}.ampc")
    return state, reports


def predict_logits(state: ModelState, raw, chunk: int = 256) -> np.ndarray:
    """(N, C) class logits for a batch of raw inputs."""
    out = []
    raw = np.asarray(raw, dtype=np.float64)
    for i in range(0, raw.shape[0], chunk):
        F = embed(raw[i:i + chunk], state.backbone)
        A = np.einsum("cdk,bdl->bckl", state.bases, F.reshape(F.shape[0], F.shape[1], -1))
        out.append((state.capacities[None] * (A * A).max(axis=-1)).sum(axis=-1))
    return np.concatenate(out)


def evaluate(state: ModelState, data: Dataset, weights: LossWeights | None = None,
             chunk: int = 256) -> tuple[float, LossBreakdown]:
    """Accuracy and mean loss terms; the state is not modified."""
    if len(data) == 0:
        raise EmptyDataset("cannot evaluate an empty dataset")
    if data.channels != state.backbone.weight.shape[1] or data.num_classes != state.num_classes:
        raise BadShape("dataset dimensions do not match the model")
    w = weights or LossWeights()
    acc = _Accumulator()
    for i in range(0, len(data), chunk):
        F = embed(data.raw[i:i + chunk], state.backbone)
        rec = forward_batch(F, data.labels[i:i + chunk], state.bases, state.capacities, w)
        acc.add(rec, float(state.capacities.sum()))
    return acc.correct / acc.n, acc.breakdown(w)


def checkpoint_bytes(state: ModelState) -> bytes:
    """AMPC layout: magic, u32 version, u32 dims (C, D, D_in, K), f64 arrays
    (W row-major, b, then per class U_c column-major and sigma_c), FNV-1a-64."""
    C, D, K = state.bases.shape
    W = state.backbone.weight
    buf = bytearray(AMPC_MAGIC)
    buf += struct.pack("<5I", AMPC_VERSION, C, D, W.shape[1], K)
    buf += np.ascontiguousarray(W, dtype="<f8").tobytes()
    buf += np.ascontiguousarray(state.backbone.bias, dtype="<f8").tobytes()
    for U, sig in zip(state.bases, state.capacities):
        buf += np.asfortranarray(U).astype("<f8").tobytes(order="F")
        buf += np.ascontiguousarray(sig, dtype="<f8").tobytes()
    buf += struct.pack("<Q", fnv1a64(bytes(buf)))
    return bytes(buf)


def save_checkpoint(state: ModelState, path) -> None:
    try:
        Path(path).write_bytes(checkpoint_bytes(state))
    except OSError as e:
        raise IOFailure(str(e)) from e


def parse_checkpoint(data: bytes, name: str = "checkpoint") -> ModelState:
    r = Reader(data, CorruptCheckpoint)
    if r.take(4) != AMPC_MAGIC:
        raise CorruptCheckpoint(f"{name}: bad magic")
    version, C, D, D_in, K = r.u32(5)
    if version != AMPC_VERSION:
        raise CorruptCheckpoint(f"{name}: unsupported version {version}")
    if min(C, D, D_in, K) < 1 or K > D:
        raise CorruptCheckpoint(f"{name}: bad dims C={C} D={D} D_in={D_in} K={K}")
    n = 8 * (D * D_in + D + C * (D * K + K))
    if r.remaining() != n + 8:
        raise CorruptCheckpoint(f"{name}: expected {n + 8} payload bytes, found {r.remaining()}")
    body_end = len(data) - 8
    (stored,) = struct.unpack("<Q", data[body_end:])
    if fnv1a64(data[:body_end]) != stored:
        raise CorruptCheckpoint(f"{name}: checksum mismatch")

    def f64(count):
        return np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)

    W = f64(D * D_in).reshape(D, D_in)
    b = f64(D)
    bases = np.empty((C, D, K))
    caps = np.empty((C, K))
    for c in range(C):
        bases[c] = f64(D * K).reshape(D, K, order="F")
        caps[c] = f64(K)
    state = ModelState(BackboneParams(W, b), bases, caps)
    if not all(np.isfinite(a).all() for a in (W, b, bases, caps)):
        raise InvariantViolation(f"{name}: non-finite parameters")
    if state.residual() > MANIFOLD_TOL:
        raise InvariantViolation(f"{name}: basis off the manifold "
                                 f"(residual {state.residual():.3e})")
    if np.any(caps < 0):
        raise InvariantViolation(f"{name}: negative capacity")
    return state


def load_checkpoint(path) -> ModelState:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IOFailure(str(e)) from e
    return parse_checkpoint(data, str(path))
