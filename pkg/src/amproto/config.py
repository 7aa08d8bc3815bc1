"""TOML run configuration: presets, file values, then flag overrides, in that order."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .data import SyntheticSpec
from .errors import BadSpec, IOFailure
from .experiments import collapse_config, collapse_spec, rank_spec, toy_config
from .head import LossWeights
from .trainer import TrainingConfig

PRESETS = ("default", "toy", "rank", "collapse")


def preset(name: str, seed: int = 0) -> tuple[SyntheticSpec, TrainingConfig]:
    """The default preset is the library defaults; the others are tuned toy setups."""
    if name == "default":
        return SyntheticSpec(seed=seed), TrainingConfig(seed=seed)
    if name == "toy":
        return SyntheticSpec(seed=seed), toy_config(seed)
    if name == "rank":
        return rank_spec(seed), toy_config(seed)
    if name == "collapse":
        return collapse_spec(seed), collapse_config(seed)
    raise BadSpec(f"unknown preset {name!r}; choose from {PRESETS}")


@dataclass
class CliConfig:
    data: SyntheticSpec
    training: TrainingConfig
    paths: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)  # command-specific

    def validate(self) -> None:
        self.data.validate()
        try:
            self.training.validate()
        except ValueError as e:
            raise BadSpec(str(e)) from e

    def to_dict(self) -> dict:
        tr = dataclasses.asdict(self.training)
        weights = tr.pop("weights")
        out = {"data": dataclasses.asdict(self.data), "training": tr, "weights": weights,
               "paths": {k: str(v) for k, v in self.paths.items()},
               "options": dict(self.options)}
        # TOML has no null
        return {s: {k: v for k, v in sec.items() if v is not None} for s, sec in out.items()}

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


def read_toml(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IOFailure(f"cannot read config {path}: {e.strerror or e}") from e
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise BadSpec(f"{path}: {e}") from e


def _coerce(cls, current, values: dict, section: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    upd = {}
    for k, v in values.items():
        if k not in names or k == "weights":
            raise BadSpec(f"unknown key {section}.{k}")
        old = getattr(current, k)
        if isinstance(old, bool) or isinstance(v, bool):
            raise BadSpec(f"{section}.{k}: booleans are not accepted")
        if isinstance(old, int) or (old is None and k.endswith("seed")):
            if isinstance(v, float) and not v.is_integer():
                raise BadSpec(f"{section}.{k} must be an integer, got {v}")
            upd[k] = int(v)
        elif isinstance(old, float):
            if not isinstance(v, (int, float)):
                raise BadSpec(f"{section}.{k} must be a number, got {v!r}")
            upd[k] = float(v)
        else:
            upd[k] = v
    try:
        return dataclasses.replace(current, **upd)
    except ValueError as e:
        raise BadSpec(f"{section}: {e}") from e


def build_config(preset_name: str, file_values: dict | None = None,
                 overrides: dict | None = None, seed: int | None = None) -> CliConfig:
    """Merge ``overrides`` ({section: {key: value}}) over file values over a preset.

    ``seed`` (when given) wins over everything and drives data and training alike.
    """
    merged: dict[str, dict] = {}
    for src in (file_values or {}, overrides or {}):
        for sec, vals in src.items():
            if not isinstance(vals, dict):
                raise BadSpec(f"top-level key {sec!r} must be a section")
            merged.setdefault(sec, {}).update({k: v for k, v in vals.items() if v is not None})
    unknown = set(merged) - {"data", "training", "weights", "paths", "options"}
    if unknown:
        raise BadSpec(f"unknown config sections: {sorted(unknown)}")
    if seed is not None:
        merged.setdefault("data", {})["seed"] = seed
        merged.setdefault("training", {})["seed"] = seed
    base_seed = int(merged.get("training", {}).get("seed", 0))
    spec, tc = preset(preset_name, base_seed)
    spec = _coerce(SyntheticSpec, spec, merged.get("data", {}), "data")
    w = _coerce(LossWeights, tc.weights, merged.get("weights", {}), "weights")
    tc = _coerce(TrainingConfig, tc, merged.get("training", {}), "training")
    tc = dataclasses.replace(tc, weights=w)
    cfg = CliConfig(spec, tc, dict(merged.get("paths", {})), dict(merged.get("options", {})))
    cfg.validate()
    return cfg
