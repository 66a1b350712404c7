"""Experiment driver with four subcommands: train, eval, probe, sweep.

Exit codes: 0 success, 1 validation/config error, 2 runtime or numeric error.
Every output byte is determined by (config, seed).
"""

from __future__ import annotations

import argparse
import copy
import itertools
import json
import sys
from pathlib import Path

from .config import (
    build_attack_spec,
    build_datasets,
    build_experiment,
    dump_config,
    load_config,
    read_raw_config,
    resolve_config,
)
from .errors import ConfigError, NumericError, ValidationError
from .evaluation import (
    confidence_grid,
    default_probe_segments,
    eval_natural,
    eval_robust,
    linearity_probe,
    metrics_header,
    read_metrics_csv,
    write_grid,
    write_linearity_report,
)
from .nn import load_checkpoint, save_checkpoint
from .rng import stream
from .trainers import run_training


def _say(quiet: bool, message: str) -> None:
    if not quiet:
        print(message)


def run_experiment_to_dir(resolved: dict, quiet: bool = False):
    """Train per the resolved config, streaming metrics rows to disk so a
    mid-run numeric failure still leaves the rows written so far."""
    exp = build_experiment(resolved)
    out = exp.out_dir
    out.mkdir(parents=True, exist_ok=True)
    dump_config(resolved, out / "resolved_config.json")
    with open(out / "dataset_snapshot.json", "w", encoding="utf-8") as fh:
        json.dump({"seed": resolved["seed"], "dataset": resolved["dataset"]}, fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(out / "metrics.csv", "w", encoding="ascii") as fh:
        fh.write(metrics_header() + "\n")
        fh.flush()

        def on_epoch(row):
            fh.write(row.csv_row() + "\n")
            fh.flush()
            _say(
                quiet,
                f"epoch {row.epoch}/{exp.spec.epochs} "
                f"loss={row.train_loss:.4f} nat={row.natural_acc:.4f}"
                + (f" rob_pgd={row.robust_acc_pgd:.4f}" if row.robust_acc_pgd is not None else ""),
            )

        result = run_training(
            exp.model,
            exp.spec,
            exp.train_ds,
            exp.test_ds,
            exp.eval_attacks,
            on_epoch=on_epoch,
        )

    save_checkpoint(result.final_model, out / "checkpoint_last.txt")
    save_checkpoint(result.best_model, out / "checkpoint_best.txt")
    return result


def cmd_train(args) -> int:
    resolved = load_config(args.config, args.seed, args.out)
    result = run_experiment_to_dir(resolved, args.quiet)
    out = Path(resolved["output"]["dir"])
    _say(args.quiet, f"wrote {out / 'metrics.csv'}")
    _say(args.quiet, f"best checkpoint from epoch {result.best_epoch}")
    return 0


def cmd_eval(args) -> int:
    resolved = load_config(args.config, args.seed, None)
    model = load_checkpoint(args.checkpoint)
    _, test_ds = build_datasets(resolved)
    if model.input_dim != test_ds.feature_dim or model.n_classes != test_ds.n_classes:
        raise ValidationError(
            f"checkpoint expects {model.input_dim} features / {model.n_classes} classes, "
            f"dataset provides {test_ds.feature_dim} / {test_ds.n_classes}"
        )
    lines = [f"natural_acc {eval_natural(model, test_ds)!r}"]
    for name, block in resolved["attack"]["eval"].items():
        if block is None:
            continue
        spec = build_attack_spec(block, f"attack.eval.{name}")
        rng = stream(resolved["seed"], "eval-cmd", name)
        lines.append(f"rob_acc_{name} {eval_robust(model, test_ds, spec, rng=rng)!r}")
    for ln in lines:
        print(ln)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.txt", "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
    return 0


def cmd_probe(args) -> int:
    resolved = load_config(args.config, args.seed, None)
    _, test_ds = build_datasets(resolved)
    models = [(Path(p), load_checkpoint(p)) for p in args.checkpoints]
    dims = {m.input_dim for _, m in models}
    if len(dims) != 1:
        raise ValidationError(f"checkpoints disagree on input dimension: {sorted(dims)}")
    if dims != {test_ds.feature_dim}:
        raise ValidationError(
            f"checkpoints expect {dims.pop()} features, dataset provides {test_ds.feature_dim}"
        )
    out = Path(args.out) if args.out else Path(resolved["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    segments = default_probe_segments(test_ds, n_pairs=args.pairs, seed=resolved["seed"])
    for idx, (path, model) in enumerate(models):
        stem = f"{idx:02d}_{path.stem}"
        report = linearity_probe(model, segments)
        write_linearity_report(out / f"{stem}_linearity.txt", report)
        print(
            f"{stem} mean_deviation {report.mean_deviation!r} "
            f"max_deviation {report.max_deviation!r} "
            f"mean_sharpness {report.mean_sharpness!r} "
            f"max_sharpness {report.max_sharpness!r}"
        )
        if model.input_dim == 2:
            grid = confidence_grid(model, resolution=(args.grid_resolution, args.grid_resolution))
            write_grid(out / f"{stem}_grid.txt", grid)
        else:
            print(f"{stem}: grid skipped, model input dim is {model.input_dim} (need 2)")
    return 0


_SWEEP_AXES = ("algorithm", "lambda", "batch_sizes", "burn_in")

SUMMARY_COLUMNS = (
    "cell",
    "algorithm",
    "lam",
    "m",
    "m_prime",
    "burn_in",
    "seed",
    "status",
    "best_epoch",
    "best_rob_acc_pgd",
    *(f"final_{c}" for c in metrics_header().split(",")),
)


def _sanitize(token) -> str:
    return "".join(ch if ch.isalnum() or ch in "._-" else "-" for ch in str(token))


def _apply_cell(base_raw: dict, assignment: dict, seed: int) -> dict:
    raw = copy.deepcopy(base_raw)
    raw["seed"] = seed
    train = raw.setdefault("train", {})
    if "algorithm" in assignment:
        train["algorithm"] = assignment["algorithm"]
    if "lambda" in assignment:
        train["lambda"] = assignment["lambda"]
    if "batch_sizes" in assignment:
        m, mp = assignment["batch_sizes"]
        train["batch_size"] = int(m)
        train["interp_batch_size"] = int(mp)
    if "burn_in" in assignment:
        train["burn_in_epochs"] = int(assignment["burn_in"])
    return raw


def cmd_sweep(args) -> int:
    sweep = read_raw_config(args.config)
    unknown = sorted(set(sweep) - {"base", "axes", "seeds"})
    if unknown:
        raise ConfigError(f"unknown key sweep.{unknown[0]}")
    if "base" not in sweep or not isinstance(sweep["base"], dict):
        raise ConfigError("sweep.base must be an experiment config mapping")
    axes = sweep.get("axes", {})
    unknown = sorted(set(axes) - set(_SWEEP_AXES))
    if unknown:
        raise ConfigError(f"unknown key sweep.axes.{unknown[0]}")
    seeds = sweep.get("seeds", [sweep["base"].get("seed", 0)])
    if args.seed is not None:
        seeds = [args.seed]

    axis_values = [axes.get(name, [None]) for name in _SWEEP_AXES]
    out = Path(args.out) if args.out else Path("runs/sweep")
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    n_failed = 0
    for combo in itertools.product(*axis_values):
        assignment = {
            name: value for name, value in zip(_SWEEP_AXES, combo) if value is not None
        }
        for seed in seeds:
            raw = _apply_cell(sweep["base"], assignment, int(seed))
            train = raw.get("train", {})
            status = "ok"
            final_row = {c: "" for c in metrics_header().split(",")}
            best_epoch = ""
            best_pgd = ""
            name = "cell"
            try:
                resolved = resolve_config(raw)
                train = resolved["train"]
                name = "_".join(
                    [
                        _sanitize(train["algorithm"]),
                        f"lam{_sanitize(train['lambda'])}",
                        f"m{train['batch_size']}x{train['interp_batch_size']}",
                        f"burn{train['burn_in_epochs']}",
                        f"seed{resolved['seed']}",
                    ]
                )
                resolved["output"]["dir"] = str(out / "cells" / name)
                result = run_experiment_to_dir(resolved, quiet=True)
                csv_rows = read_metrics_csv(Path(resolved["output"]["dir"]) / "metrics.csv")
                if csv_rows:
                    final_row = csv_rows[-1]
                best_epoch = str(result.best_epoch)
                if result.metrics and result.best_epoch >= 1:
                    b = result.metrics[result.best_epoch - 1].robust_acc_pgd
                    best_pgd = "" if b is None else repr(float(b))
                _say(args.quiet, f"cell {name}: ok")
            except (ConfigError, ValidationError, NumericError) as exc:
                status = f"failed: {type(exc).__name__}"
                n_failed += 1
                _say(args.quiet, f"cell {name}: {status} ({exc})")
            rows.append(
                {
                    "cell": name,
                    "algorithm": str(train.get("algorithm", "")),
                    "lam": _sanitize(train.get("lambda", "")),
                    "m": str(train.get("batch_size", "")),
                    "m_prime": str(train.get("interp_batch_size", "")),
                    "burn_in": str(train.get("burn_in_epochs", "")),
                    "seed": str(seed),
                    "status": status,
                    "best_epoch": best_epoch,
                    "best_rob_acc_pgd": best_pgd,
                    **{f"final_{k}": v for k, v in final_row.items()},
                }
            )

    with open(out / "summary.csv", "w", encoding="ascii") as fh:
        fh.write(",".join(SUMMARY_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(row[c] for c in SUMMARY_COLUMNS) + "\n")
    _say(args.quiet, f"wrote {out / 'summary.csv'} ({len(rows)} cells, {n_failed} failed)")
    return 2 if n_failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advlab",
        description="Desk-scale adversarial-training laboratory.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        p.add_argument("--quiet", action="store_true")

    p_train = sub.add_parser("train", help="run one training experiment")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a saved checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_probe = sub.add_parser("probe", help="linearity probe and confidence grids")
    common(p_probe)
    p_probe.add_argument("--checkpoints", nargs="+", required=True)
    p_probe.add_argument("--pairs", type=int, default=20, help="random cross-class segments")
    p_probe.add_argument("--grid-resolution", type=int, default=50)
    p_probe.set_defaults(func=cmd_probe)

    p_sweep = sub.add_parser("sweep", help="run a grid of experiments")
    common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
