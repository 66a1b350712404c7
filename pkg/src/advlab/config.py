"""Experiment configuration: a strict JSON format with explicit units.

Unknown keys anywhere are hard errors (no silent typos). Perturbation sizes
accept decimals or exact rational strings like "8/255"; the raw form is kept
through resolution so a resolved snapshot re-runs to identical bytes, and the
rational is only converted to float at the point of use.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .attacks import AttackSpec
from .datasets import Dataset, gen_rings, gen_two_gaussians, load_csv, split
from .errors import ConfigError, ValidationError
from .interpolation import parse_lambda_policy
from .nn import ACTIVATIONS, MlpModel, init_model
from .trainers import ALGORITHMS, INTERP_ALGORITHMS, TrainSpec, algorithm_family


def parse_rational(value, path: str) -> float:
    """Numbers pass through; strings like '8/255' are parsed as exact
    rationals and rounded once, at this final conversion."""
    if isinstance(value, bool):
        raise ConfigError(f"{path}: expected a number, got a bool")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"{path}: cannot parse {value!r} as a number or rational") from None
    raise ConfigError(f"{path}: expected a number or rational string, got {type(value).__name__}")


def _check_keys(block: dict, allowed, path: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(f"{path}: expected a mapping")
    unknown = sorted(set(block) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {path}.{unknown[0]}")


def _require(block: dict, key: str, path: str):
    if key not in block:
        raise ConfigError(f"missing required key {path}.{key}")
    return block[key]


_DATASET_KEYS = {
    "rings": {"kind", "n_per_class", "radii", "noise", "seed", "test_fraction"},
    "two_gaussians": {"kind", "n_per_class", "centers", "sigma", "seed", "test_fraction"},
    "csv": {"kind", "path", "label_column", "delimiter", "has_header", "test_fraction"},
}

_ATTACK_KEYS = {"epsilon", "alpha", "steps", "init", "loss", "clamp", "gaussian_scale"}

_TRAIN_KEYS = {
    "algorithm",
    "epochs",
    "batch_size",
    "interp_batch_size",
    "batches_per_epoch",
    "lambda",
    "burn_in_epochs",
    "learning_rate",
    "momentum",
    "weight_decay",
    "lr_milestones",
    "lr_decay",
    "trades_beta",
    "trades_gamma",
    "cross_class_only",
    "parallel_workers",
}

_TOP_KEYS = {"seed", "dataset", "model", "attack", "train", "output"}


def _resolve_dataset(block: dict, master_seed: int) -> dict:
    if "kind" not in block:
        raise ConfigError("missing required key dataset.kind")
    kind = block["kind"]
    if kind not in _DATASET_KEYS:
        raise ConfigError(
            f"dataset.kind must be one of {sorted(_DATASET_KEYS)}, got {kind!r}"
        )
    _check_keys(block, _DATASET_KEYS[kind], "dataset")
    out = {"kind": kind, "test_fraction": block.get("test_fraction", 0.25)}
    if kind == "rings":
        out.update(
            n_per_class=block.get("n_per_class", 800),
            radii=list(block.get("radii", [0.15, 0.35])),
            noise=block.get("noise", 0.02),
            seed=block.get("seed", master_seed),
        )
    elif kind == "two_gaussians":
        out.update(
            n_per_class=block.get("n_per_class", 200),
            centers=[list(c) for c in block.get("centers", [[0.3, 0.3], [0.7, 0.7]])],
            sigma=block.get("sigma", 0.08),
            seed=block.get("seed", master_seed),
        )
    else:
        out.update(
            path=str(_require(block, "path", "dataset")),
            label_column=block.get("label_column", -1),
            delimiter=block.get("delimiter", ","),
            has_header=block.get("has_header", False),
        )
    return out


def _resolve_attack(block: dict, path: str, defaults: dict) -> dict:
    _check_keys(block, _ATTACK_KEYS, path)
    out = dict(defaults)
    out.update(block)
    # validate numbers now so errors carry the key path
    parse_rational(out["epsilon"], f"{path}.epsilon")
    parse_rational(out["alpha"], f"{path}.alpha")
    if not isinstance(out["steps"], int) or isinstance(out["steps"], bool):
        raise ConfigError(f"{path}.steps must be an integer")
    return out


def resolve_config(raw: dict) -> dict:
    """Validate a raw config mapping and materialize every default.

    The result is JSON-serializable, self-contained, and re-resolves to
    itself.
    """
    _check_keys(raw, _TOP_KEYS, "config")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("config.seed must be an integer")

    dataset = _resolve_dataset(dict(raw.get("dataset", {"kind": "two_gaussians"})), seed)

    model_block = dict(raw.get("model", {}))
    _check_keys(model_block, {"hidden_layers", "activation"}, "model")
    model = {
        "hidden_layers": [int(h) for h in model_block.get("hidden_layers", [10, 10, 5])],
        "activation": model_block.get("activation", "relu"),
    }
    if model["activation"] not in ACTIVATIONS:
        raise ConfigError(f"model.activation must be one of {ACTIVATIONS}")

    train_block = dict(raw.get("train", {}))
    _check_keys(train_block, _TRAIN_KEYS, "train")
    algorithm = train_block.get("algorithm", "at")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"train.algorithm must be one of {ALGORITHMS}, got {algorithm!r}")
    interp = algorithm in INTERP_ALGORITHMS
    family = algorithm_family(algorithm)
    trades_gamma = train_block.get("trades_gamma", 0.001)

    train = {
        "algorithm": algorithm,
        "epochs": train_block.get("epochs", 10),
        "batch_size": train_block.get("batch_size", 64 if interp else 128),
        "interp_batch_size": train_block.get("interp_batch_size", 64 if interp else 0),
        "batches_per_epoch": train_block.get("batches_per_epoch", None),
        "lambda": train_block.get(
            "lambda", "uniform" if algorithm == "at_mixup" else 0.5
        ),
        "burn_in_epochs": train_block.get("burn_in_epochs", 0),
        "learning_rate": train_block.get("learning_rate", 0.1),
        "momentum": train_block.get("momentum", 0.9),
        "weight_decay": train_block.get("weight_decay", 5e-4),
        "lr_milestones": list(train_block.get("lr_milestones", [0.5, 0.75])),
        "lr_decay": train_block.get("lr_decay", 0.1),
        "trades_beta": train_block.get("trades_beta", 6.0),
        "trades_gamma": trades_gamma,
        "cross_class_only": train_block.get("cross_class_only", False),
        "parallel_workers": train_block.get("parallel_workers", 1),
    }
    parse_lambda_policy(train["lambda"])

    attack_block = dict(raw.get("attack", {}))
    _check_keys(attack_block, {"train", "eval"}, "attack")
    if family == "trades":
        train_attack_defaults = {
            "epsilon": "8/255",
            "alpha": "2/255",
            "steps": 10,
            "init": "gaussian",
            "loss": "kl_vs_natural",
            "clamp": True,
            "gaussian_scale": trades_gamma,
        }
    elif family == "fastat":
        train_attack_defaults = {
            "epsilon": "8/255",
            "alpha": "10/255",
            "steps": 1,
            "init": "uniform",
            "loss": "ce",
            "clamp": True,
            "gaussian_scale": trades_gamma,
        }
    else:
        train_attack_defaults = {
            "epsilon": "8/255",
            "alpha": "2/255",
            "steps": 10,
            "init": "natural",
            "loss": "ce",
            "clamp": True,
            "gaussian_scale": trades_gamma,
        }
    train_attack = _resolve_attack(
        dict(attack_block.get("train", {})), "attack.train", train_attack_defaults
    )

    eval_block = dict(attack_block.get("eval", {}))
    _check_keys(eval_block, {"pgd", "cw"}, "attack.eval")
    eval_attacks = {}
    for name, steps, loss in (("pgd", 20, "ce"), ("cw", 30, "cw_margin")):
        sub = eval_block.get(name, {})
        if sub is None:
            eval_attacks[name] = None
            continue
        defaults = {
            "epsilon": train_attack["epsilon"],
            "alpha": train_attack["alpha"],
            "steps": steps,
            "init": "natural",
            "loss": loss,
            "clamp": True,
            "gaussian_scale": trades_gamma,
        }
        eval_attacks[name] = _resolve_attack(dict(sub), f"attack.eval.{name}", defaults)

    output_block = dict(raw.get("output", {}))
    _check_keys(output_block, {"dir"}, "output")
    output = {"dir": output_block.get("dir", "runs/experiment")}

    return {
        "seed": seed,
        "dataset": dataset,
        "model": model,
        "attack": {"train": train_attack, "eval": eval_attacks},
        "train": train,
        "output": output,
    }


def read_raw_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw


def load_config(path, seed_override=None, out_override=None) -> dict:
    """Read, optionally override seed/output, and resolve. Overrides are
    applied to the raw mapping so seed-derived defaults follow them."""
    raw = read_raw_config(path)
    if seed_override is not None:
        raw["seed"] = int(seed_override)
    if out_override is not None:
        raw.setdefault("output", {})["dir"] = str(out_override)
    return resolve_config(raw)


def build_attack_spec(block: dict, path: str = "attack") -> AttackSpec:
    return AttackSpec(
        epsilon=parse_rational(block["epsilon"], f"{path}.epsilon"),
        alpha=parse_rational(block["alpha"], f"{path}.alpha"),
        steps=int(block["steps"]),
        init=block["init"],
        loss=block["loss"],
        clamp=bool(block["clamp"]),
        gaussian_scale=float(block["gaussian_scale"]),
    )


def build_datasets(resolved: dict) -> tuple[Dataset, Dataset]:
    block = resolved["dataset"]
    kind = block["kind"]
    if kind == "rings":
        full = gen_rings(
            n_per_class=int(block["n_per_class"]),
            radii=tuple(block["radii"]),
            noise=float(block["noise"]),
            seed=int(block["seed"]),
        )
    elif kind == "two_gaussians":
        full = gen_two_gaussians(
            n_per_class=int(block["n_per_class"]),
            centers=[tuple(c) for c in block["centers"]],
            sigma=float(block["sigma"]),
            seed=int(block["seed"]),
        )
    else:
        full, _ = load_csv(
            block["path"],
            label_column=block["label_column"],
            delimiter=block["delimiter"],
            has_header=bool(block["has_header"]),
        )
    return split(full, float(block["test_fraction"]), seed=int(resolved["seed"]))


def build_train_spec(resolved: dict) -> TrainSpec:
    t = resolved["train"]
    return TrainSpec(
        algorithm=t["algorithm"],
        epochs=int(t["epochs"]),
        batch_size=int(t["batch_size"]),
        interp_batch_size=int(t["interp_batch_size"]),
        batches_per_epoch=None if t["batches_per_epoch"] is None else int(t["batches_per_epoch"]),
        attack=build_attack_spec(resolved["attack"]["train"], "attack.train"),
        lambda_policy=parse_lambda_policy(t["lambda"]),
        burn_in_epochs=int(t["burn_in_epochs"]),
        learning_rate=float(t["learning_rate"]),
        momentum=float(t["momentum"]),
        weight_decay=float(t["weight_decay"]),
        lr_milestones=tuple(float(f) for f in t["lr_milestones"]),
        lr_decay=float(t["lr_decay"]),
        trades_beta=float(t["trades_beta"]),
        cross_class_only=bool(t["cross_class_only"]),
        parallel_workers=int(t["parallel_workers"]),
        seed=int(resolved["seed"]),
    )


@dataclass
class Experiment:
    """A fully materialized run: data, initial model, and specs."""

    resolved: dict
    train_ds: Dataset
    test_ds: Dataset
    model: MlpModel
    spec: TrainSpec
    eval_attacks: dict
    out_dir: Path


def build_experiment(resolved: dict) -> Experiment:
    resolved = copy.deepcopy(resolved)
    try:
        train_ds, test_ds = build_datasets(resolved)
    except ValidationError as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    layer_sizes = [train_ds.feature_dim, *resolved["model"]["hidden_layers"], train_ds.n_classes]
    model = init_model(layer_sizes, resolved["model"]["activation"], seed=resolved["seed"])
    spec = build_train_spec(resolved)
    eval_attacks = {
        name: None if block is None else build_attack_spec(block, f"attack.eval.{name}")
        for name, block in resolved["attack"]["eval"].items()
    }
    if spec.batch_size + spec.interp_batch_size > train_ds.n:
        raise ConfigError(
            f"train.batch_size + train.interp_batch_size = "
            f"{spec.batch_size + spec.interp_batch_size} exceeds the "
            f"{train_ds.n}-sample training split"
        )
    return Experiment(
        resolved=resolved,
        train_ds=train_ds,
        test_ds=test_ds,
        model=model,
        spec=spec,
        eval_attacks=eval_attacks,
        out_dir=Path(resolved["output"]["dir"]),
    )


def dump_config(resolved: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
