"""Toy presets, ablation table and one-parameter sensitivity sweeps."""
from __future__ import annotations

import dataclasses
import logging

import numpy as np

from .collapse import baseline_accuracy, baseline_config, prototype_stats, train_baseline
from .data import Dataset, SyntheticSpec, gen_synthetic
from .errors import BadSpec
from .head import LossWeights
from .stiefel import orthonormality_residual
from .trainer import ModelState, TrainingConfig, evaluate, fit

log = logging.getLogger(__name__)

TEST_SEED_OFFSET = 1000
SWEEP_PARAMS = ("lambda", "gamma1", "gamma2", "K", "tau")
ABLATIONS = ("full", "no-stiefel", "lambda=0", "gamma1=0", "gamma2=0")
ROW_KEYS = ("variant", "accuracy", "mean_rank", "min_stable_rank", "sem", "overlap", "residual")


def toy_weights() -> LossWeights:
    return LossWeights(gamma1=0.1, gamma2=0.1, lam=0.01)


def toy_config(seed: int = 0, epochs: int = 60) -> TrainingConfig:
    """Step sizes tuned for the 5x5 toy grid; the library defaults are far too small here."""
    return TrainingConfig(epochs=epochs, batch_size=32, lr_max=0.3, lr_min=0.003, K=10, D=16,
                          weights=toy_weights(), seed=seed)


def rank_spec(seed: int = 0) -> SyntheticSpec:
    """Planted R*=3 with occluded parts, so no single part suffices to classify."""
    return SyntheticSpec(parts=3, tau=0.1, visibility=0.5, samples_per_class=80, seed=seed)


def collapse_spec(seed: int = 0, tau: float = 0.01) -> SyntheticSpec:
    return SyntheticSpec(parts=1, tau=tau, samples_per_class=40, seed=seed)


def collapse_config(seed: int = 0, epochs: int = 30) -> TrainingConfig:
    return dataclasses.replace(toy_config(seed, epochs), K=5)


def train_test(spec: SyntheticSpec, test_per_class: int | None = None) -> tuple[Dataset, Dataset]:
    """Train and held-out sets sharing the planted parts but drawn from different seeds."""
    parts_seed = spec.seed if spec.parts_seed is None else spec.parts_seed
    train = gen_synthetic(dataclasses.replace(spec, parts_seed=parts_seed))
    test = gen_synthetic(dataclasses.replace(
        spec, seed=spec.seed + TEST_SEED_OFFSET, parts_seed=parts_seed,
        samples_per_class=test_per_class or spec.samples_per_class))
    return train, test


def amp_row(name: str, state: ModelState, test: Dataset, weights: LossWeights) -> dict:
    acc, br = evaluate(state, test, weights)
    ranks = (state.capacities > 0).sum(axis=1)
    srank = [_active_stable_rank(U, s) for U, s in zip(state.bases, state.capacities)]
    return {"variant": name, "accuracy": acc, "mean_rank": float(ranks.mean()),
            "min_stable_rank": float(min(srank)), "sem": float(br.sem), "overlap": float(br.overlap),
            "residual": max(orthonormality_residual(U) for U in state.bases)}


def _active_stable_rank(U, sigma) -> float:
    # orthonormal active columns: stable rank equals the active count
    P = U[:, sigma > 0]
    s = np.linalg.svd(P, compute_uv=False)
    return float((s ** 2).sum() / s[0] ** 2)


def run_ablations(spec: SyntheticSpec, cfg: TrainingConfig, variants=ABLATIONS) -> list[dict]:
    train, test = train_test(spec)
    rows = []
    for name in variants:
        if name == "no-stiefel":
            base = train_baseline(train, baseline_config(cfg))
            sr, _ = prototype_stats(base.protos.protos)
            rows.append({"variant": name, "accuracy": baseline_accuracy(base, test),
                         "mean_rank": float(cfg.K), "min_stable_rank": float(sr.min()),
                         "sem": float("nan"), "overlap": float("nan"),
                         "residual": float("nan")})
        else:
            c = dataclasses.replace(cfg, weights=_ablate(cfg.weights, name))
            state, _ = fit(train, c)
            rows.append(amp_row(name, state, test, c.weights))
        log.info("ablation %s: %s", name, rows[-1])
    return rows


def _ablate(w: LossWeights, name: str) -> LossWeights:
    if name == "full":
        return w
    key = {"lambda=0": "lam", "gamma1=0": "gamma1", "gamma2=0": "gamma2"}.get(name)
    if key is None:
        raise BadSpec(f"unknown ablation {name!r}")
    return dataclasses.replace(w, **{key: 0.0})


def apply_param(spec: SyntheticSpec, cfg: TrainingConfig, param: str, value: float):
    if param not in SWEEP_PARAMS:
        raise BadSpec(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}")
    if param == "K" and value != int(value):
        raise BadSpec("K must be an integer")
    try:
        if param == "lambda":
            cfg = dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, lam=value))
        elif param in ("gamma1", "gamma2"):
            cfg = dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, **{param: value}))
        elif param == "K":
            cfg = dataclasses.replace(cfg, K=int(value))
        else:
            spec = dataclasses.replace(spec, tau=value)
        spec.validate()
        cfg.validate()
    except ValueError as e:
        raise BadSpec(f"{param}={value:g}: {e}") from e
    return spec, cfg


def run_sweep(param: str, values, spec: SyntheticSpec, cfg: TrainingConfig) -> list[dict]:
    """One training run per value on the same seed; rows carry the swept value."""
    settings = [apply_param(spec, cfg, param, v) for v in values]  # fail before any training
    rows = []
    for v, (s, c) in zip(values, settings):
        train, test = train_test(s)
        state, _ = fit(train, c)
        row = amp_row(f"{param}={v:g}", state, test, c.weights)
        row = {"param": param, "value": float(v), **row}
        rows.append(row)
        log.info("sweep %s=%g: acc=%.3f rank=%.2f", param, v, row["accuracy"], row["mean_rank"])
    return rows
