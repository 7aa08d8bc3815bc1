"""Datasets, the AMPD file format, and the synthetic part-structured generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadShape, BadSpec, CorruptCheckpoint, EmptyDataset, IOFailure
from .formats import Reader
from .stiefel import qr_factor

AMPD_MAGIC = b"AMPD"
AMPD_VERSION = 1


@dataclass
class Dataset:
    raw: np.ndarray  # (N, D_in, H, W) float64
    labels: np.ndarray  # (N,) int64, 0-based
    num_classes: int

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.raw.ndim != 4 or self.labels.shape != (self.raw.shape[0],):
            raise BadShape(f"raw {self.raw.shape} / labels {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise BadShape("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return self.raw.shape[0]

    @property
    def channels(self) -> int:
        return self.raw.shape[1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.raw.shape[2], self.raw.shape[3]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.raw[idx], self.labels[idx], self.num_classes)


def write_ampd(ds: Dataset, path) -> None:
    """Header, 1-based u32 labels, then f32 tensors in sample order."""
    N, D_in, H, W = ds.raw.shape
    buf = bytearray(AMPD_MAGIC)
    buf += struct.pack("<6I", AMPD_VERSION, N, ds.num_classes, D_in, H, W)
    buf += (ds.labels + 1).astype("<u4").tobytes()
    buf += ds.raw.astype("<f4").tobytes()
    try:
        Path(path).write_bytes(bytes(buf))
    except OSError as e:
        raise IOFailure(str(e)) from e


def read_ampd(path) -> Dataset:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IOFailure(str(e)) from e
    r = Reader(data, CorruptCheckpoint)
    if r.take(4) != AMPD_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    version, N, C, D_in, H, W = r.u32(6)
    if version != AMPD_VERSION:
        raise CorruptCheckpoint(f"{path}: unsupported version {version}")
    expected = 4 * N + 4 * N * D_in * H * W
    if r.remaining() != expected:
        raise CorruptCheckpoint(f"{path}: expected {expected} payload bytes, "
                                f"found {r.remaining()}")
    labels = np.frombuffer(r.take(4 * N), dtype="<u4").astype(np.int64)
    if N and (labels.min() < 1 or labels.max() > C):
        raise CorruptCheckpoint(f"{path}: label outside [1, {C}]")
    raw = np.frombuffer(r.take(4 * N * D_in * H * W), dtype="<f4")
    return Dataset(raw.reshape(N, D_in, H, W).astype(np.float64), labels - 1, C)


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    channels: int = 16
    height: int = 5
    width: int = 5
    parts: int = 3  # planted parts per class
    part_scale: float = 3.0
    tau: float = 0.1  # within-class noise level
    samples_per_class: int = 40
    visibility: float = 1.0  # probability each part is drawn; at least one always is
    seed: int = 0
    parts_seed: int | None = None  # defaults to seed

    def validate(self) -> None:
        if self.classes < 1 or self.channels < 1 or self.height < 1 or self.width < 1:
            raise BadSpec("classes, channels and grid sizes must be positive")
        if not 1 <= self.parts <= min(self.channels, self.height * self.width):
            raise BadSpec(f"parts={self.parts} must lie in [1, min(D_in, H*W)]")
        if not self.tau >= 0:
            raise BadSpec("tau must be nonnegative")
        if not 0 < self.visibility <= 1:
            raise BadSpec("visibility must lie in (0, 1]")
        if self.samples_per_class < 1:
            raise BadSpec("samples_per_class must be positive")


def planted_parts(spec: SyntheticSpec) -> np.ndarray:
    """(C, D_in, R*) orthonormal part directions per class."""
    seed = spec.seed if spec.parts_seed is None else spec.parts_seed
    rng = np.random.default_rng([seed, 0x5EED])
    return np.stack([qr_factor(rng.standard_normal((spec.channels, spec.parts)))[0]
                     for _ in range(spec.classes)])


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Each sample carries its class's R* part vectors at distinct random cells.

    With ``visibility`` < 1 every part is kept independently with that
    probability (at least one per sample), so no single part identifies the
    class on every sample.
    Parts get N(0, tau^2) noise, the background N(0, (tau/10)^2). Values are
    rounded to float32 so a dataset survives an AMPD round trip bit-exactly.
    Samples are ordered class by class.
    """
    spec.validate()
    V = planted_parts(spec)
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    C, D_in, R = spec.classes, spec.channels, spec.parts
    L = spec.height * spec.width
    N = C * spec.samples_per_class
    raw = np.empty((N, D_in, L))
    labels = np.repeat(np.arange(C), spec.samples_per_class)
    for i, c in enumerate(labels):
        x = rng.normal(0.0, spec.tau / 10.0, size=(D_in, L))
        cells = rng.choice(L, size=R, replace=False)
        shown = np.arange(R)
        if spec.visibility < 1:
            keep = rng.random(R) < spec.visibility
            if not keep.any():
                keep[rng.integers(R)] = True
            shown = shown[keep]
        x[:, cells[shown]] = (spec.part_scale * V[c][:, shown]
                              + rng.normal(0.0, spec.tau, size=(D_in, shown.size)))
        raw[i] = x
    raw = raw.astype(np.float32).astype(np.float64)
    if N == 0:
        raise EmptyDataset("spec produced no samples")
    return Dataset(raw.reshape(N, D_in, spec.height, spec.width), labels, C)
