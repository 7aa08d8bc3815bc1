"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/config/checkpoint error,
3 invariant violation or failed gradient check.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .collapse import collapse_demo
from .config import PRESETS, CliConfig, build_config, read_toml
from .data import Dataset, read_ampd, write_ampd
from .errors import AMPError, InvariantViolation, NonFinite
from .experiments import ABLATIONS, SWEEP_PARAMS, run_ablations, run_sweep, train_test
from .explain import build_cache, explain, export_explanation_json
from .gradcheck import TOLERANCE, run_gradcheck
from .trainer import evaluate, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("amproto")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3

DATA_FLAGS = {"classes": int, "channels": int, "height": int, "width": int, "parts": int,
              "part-scale": float, "tau": float, "samples-per-class": int, "visibility": float}
TRAIN_FLAGS = {"epochs": int, "batch-size": int, "lr-max": float, "lr-min": float, "K": int,
               "D": int, "checkpoint-every": int}
OPTION_KEYS = ("test_per_class", "index", "target_class", "states", "tol", "param", "values",
               "ablations")
WEIGHT_FLAGS = {"lambda": ("lam", float), "gamma1": ("gamma1", float), "gamma2": ("gamma2", float)}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, default_preset="default"):
    p.add_argument("--seed", type=int, default=None, help="seed for data and training")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--config", default=None, help="TOML file with [data] [training] [weights]")
    p.add_argument("--preset", choices=PRESETS, default=default_preset,
                   help=f"base values before config and flags (default: {default_preset})")
    p.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                   help="log warnings only")


def _data_flags(p):
    g = p.add_argument_group("synthetic data")
    for name, typ in DATA_FLAGS.items():
        g.add_argument(f"--{name}", type=typ, default=None)


def _train_flags(p):
    g = p.add_argument_group("training")
    for name, typ in TRAIN_FLAGS.items():
        g.add_argument(f"--{name}", type=typ, default=None)
    for name, (_, typ) in WEIGHT_FLAGS.items():
        g.add_argument(f"--{name}", type=typ, default=None)


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty value list")
    return vals


def make_parser() -> Parser:
    p = Parser(prog="amproto", description="Stiefel subspace prototypes: train, explain, diagnose.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("gen-data", help="write synthetic train/test AMPD files")
    _common(s)
    _data_flags(s)
    s.add_argument("--test-per-class", type=int, default=None)

    s = sub.add_parser("train", help="train a model and write model.ampc plus reports")
    _common(s)
    _data_flags(s)
    _train_flags(s)
    s.add_argument("--data", default=None, help="training AMPD (default: synthetic)")
    s.add_argument("--test-data", default=None, help="held-out AMPD evaluated after training")

    s = sub.add_parser("eval", help="accuracy and loss terms of a checkpoint")
    _common(s)
    _data_flags(s)
    _train_flags(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", default=None, help="AMPD to evaluate (default: synthetic test split)")

    s = sub.add_parser("explain", help="explain one sample and export JSON/PGM evidence")
    _common(s)
    _data_flags(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", default=None, help="training AMPD for patch retrieval")
    s.add_argument("--input-data", default=None, help="AMPD holding the sample to explain")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--class", dest="target_class", type=int, default=None,
                   help="explain this class instead of the predicted one")

    s = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    _common(s)
    s.add_argument("--states", type=int, default=20)
    s.add_argument("--tol", type=float, default=TOLERANCE)

    s = sub.add_parser("collapse-demo", help="Euclidean baseline vs subspace model")
    _common(s, "collapse")
    _data_flags(s)
    _train_flags(s)

    s = sub.add_parser("sweep", help="one-parameter sensitivity sweep or ablation table")
    _common(s, "rank")
    _data_flags(s)
    _train_flags(s)
    s.add_argument("--param", choices=SWEEP_PARAMS, default=None)
    s.add_argument("--values", type=_float_list, default=None)
    s.add_argument("--ablations", action="store_true", help=f"run {', '.join(ABLATIONS)}")
    return p


def _overrides(args) -> dict:
    ov = {"data": {}, "training": {}, "weights": {}, "paths": {}}
    for name in DATA_FLAGS:
        ov["data"][name.replace("-", "_")] = getattr(args, name.replace("-", "_"), None)
    for name in TRAIN_FLAGS:
        ov["training"][name.replace("-", "_")] = getattr(args, name.replace("-", "_"), None)
    for name, (key, _) in WEIGHT_FLAGS.items():
        ov["weights"][key] = getattr(args, name, None)
    for key in ("data", "test_data", "input_data", "checkpoint"):
        ov["paths"][key] = getattr(args, key, None)
    ov["paths"]["out"] = args.out
    ov["options"] = {"command": args.command}
    for key in OPTION_KEYS:
        if getattr(args, key, None) is not None:
            ov["options"][key] = getattr(args, key)
    return ov


def effective_config(args) -> CliConfig:
    file_values = read_toml(args.config) if args.config else None
    return build_config(args.preset, file_values, _overrides(args), args.seed)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def tsv(rows, columns=None) -> str:
    """Tab-separated table with a header; floats in shortest round-trip form."""
    if not rows:
        return ""
    columns = columns or list(rows[0])
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _emit(out: Path, name: str, rows, columns=None) -> None:
    text = tsv(rows, columns)
    (out / name).write_text(text)
    sys.stdout.write(text)


def _datasets(cfg: CliConfig) -> tuple[Dataset, Dataset | None]:
    """Training data from --data or the synthetic generator; test data likewise."""
    paths = cfg.paths
    if paths.get("data"):
        train = read_ampd(paths["data"])
        test = read_ampd(paths["test_data"]) if paths.get("test_data") else None
        return train, test
    train, test = train_test(cfg.data)
    if paths.get("test_data"):
        test = read_ampd(paths["test_data"])
    return train, test


def cmd_gen_data(args, cfg: CliConfig, out: Path) -> int:
    train, test = train_test(cfg.data, args.test_per_class)
    rows = []
    for name, ds in (("train.ampd", train), ("test.ampd", test)):
        write_ampd(ds, out / name)
        rows.append({"file": name, "samples": len(ds), "classes": ds.num_classes,
                     "channels": ds.channels, "height": ds.grid[0], "width": ds.grid[1]})
    _emit(out, "gen-data.tsv", rows)
    return EXIT_OK


def cmd_train(args, cfg: CliConfig, out: Path) -> int:
    train, test = _datasets(cfg)
    ckpt_dir = out / "checkpoints" if cfg.training.checkpoint_every else None
    if ckpt_dir:
        ckpt_dir.mkdir(exist_ok=True)
    state, reports = fit(train, cfg.training, checkpoint_dir=ckpt_dir)
    save_checkpoint(state, out / "model.ampc")
    rows = [r.row() for r in reports]
    _emit(out, "train.tsv", rows)
    if rows:
        plotting.training_curves(rows, out / "training.png")
    plotting.rank_histogram((state.capacities > 0).sum(axis=1), cfg.training.K, out / "ranks.png")
    if test is not None:
        acc, br = evaluate(state, test, cfg.training.weights)
        summary = [{"split": "test", "accuracy": acc, "ce": br.ce, "sem": br.sem,
                    "overlap": br.overlap, "mean_rank": float((state.capacities > 0).sum(1).mean()),
                    "residual": state.residual()}]
        _emit(out, "test.tsv", summary)
    return EXIT_OK


def cmd_eval(args, cfg: CliConfig, out: Path) -> int:
    state = load_checkpoint(cfg.paths["checkpoint"])
    data = read_ampd(cfg.paths["data"]) if cfg.paths.get("data") else train_test(cfg.data)[1]
    acc, br = evaluate(state, data, cfg.training.weights)
    ranks = (state.capacities > 0).sum(axis=1)
    _emit(out, "eval.tsv", [{"samples": len(data), "accuracy": acc, "ce": br.ce, "sem": br.sem,
                             "overlap": br.overlap, "sparse": br.sparse, "total": br.total,
                             "mean_rank": float(ranks.mean()), "residual": state.residual()}])
    return EXIT_OK


def cmd_explain(args, cfg: CliConfig, out: Path) -> int:
    state = load_checkpoint(cfg.paths["checkpoint"])
    if cfg.paths.get("data"):
        train = read_ampd(cfg.paths["data"])
        inputs = read_ampd(cfg.paths["input_data"]) if cfg.paths.get("input_data") else train
    else:
        train, inputs = train_test(cfg.data)
        if cfg.paths.get("input_data"):
            inputs = read_ampd(cfg.paths["input_data"])
    if not 0 <= args.index < len(inputs):
        raise UsageError(f"--index {args.index} outside [0, {len(inputs)})")
    if args.target_class is not None and not 0 <= args.target_class < state.num_classes:
        raise UsageError(f"--class {args.target_class} outside [0, {state.num_classes})")
    cache = build_cache(state, train)
    expl = explain(inputs.raw[args.index], state, cache, target_class=args.target_class)
    export_explanation_json(expl, out / "explanation.json")
    plotting.explanation_panel(expl, out / "explanation.png")
    rows = [{"direction": p.direction, "capacity": p.capacity, "peak_h": p.peak[0],
             "peak_w": p.peak[1], "contribution": p.contribution, "patch_sample": p.patch.sample,
             "patch_h": p.patch.h, "patch_w": p.patch.w, "heatmap_file": p.heatmap_file}
            for p in expl.parts]
    cols = ["direction", "capacity", "peak_h", "peak_w", "contribution", "patch_sample",
            "patch_h", "patch_w", "heatmap_file"]
    (out / "explanation.tsv").write_text(tsv(rows, cols) or "\t".join(cols) + "\n")
    sys.stdout.write(f"# class {expl.predicted_class} (label {int(inputs.labels[args.index])}) "
                     f"evidence {expl.total_evidence!r}\n")
    sys.stdout.write(tsv(rows, cols))
    return EXIT_OK


def cmd_gradcheck(args, cfg: CliConfig, out: Path) -> int:
    if args.states < 1:
        raise UsageError("--states must be positive")
    seed = 0 if args.seed is None else args.seed
    worst, tables = run_gradcheck(seed, args.states)
    rows = [{"state": i, "term": term, "group": group, "rel_error": err}
            for i, t in enumerate(tables) for term, groups in t.items()
            for group, err in groups.items()]
    (out / "gradcheck.tsv").write_text(tsv(rows))
    ok = worst <= args.tol
    sys.stdout.write(f"max_rel_error\t{worst!r}\ntolerance\t{args.tol!r}\n"
                     f"result\t{'pass' if ok else 'FAIL'}\n")
    return EXIT_OK if ok else EXIT_INVARIANT


def cmd_collapse(args, cfg: CliConfig, out: Path) -> int:
    rep = collapse_demo(cfg.data, cfg.training)
    cols = list(rep.rows[0]) if rep.rows else None
    (out / "collapse.tsv").write_text(tsv(rep.rows, cols))
    if rep.rows:
        plotting.collapse_curves(rep.rows, cfg.training.K, out / "collapse.png")
    _emit(out, "collapse-final.tsv", [rep.final])
    return EXIT_OK


def cmd_sweep(args, cfg: CliConfig, out: Path) -> int:
    if not args.ablations and (args.param is None or args.values is None):
        raise UsageError("sweep needs --param and --values, or --ablations")
    if args.param is not None and args.values is not None:
        rows = run_sweep(args.param, args.values, cfg.data, cfg.training)
        _emit(out, "sweep.tsv", rows)
        plotting.sweep_plot(rows, out / "sweep.png")
    if args.ablations:
        rows = run_ablations(cfg.data, cfg.training)
        _emit(out, "ablation.tsv", rows)
        plotting.ablation_bars(rows, out / "ablation.png")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "explain": cmd_explain, "gradcheck": cmd_gradcheck,
            "collapse-demo": cmd_collapse, "sweep": cmd_sweep}


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = effective_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        text = cfg.to_toml()
        (out / "run-config.toml").write_text(text)
        log.info("effective config:\n%s", text)
        return COMMANDS[args.command](args, cfg, out)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantViolation, NonFinite) as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (AMPError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
