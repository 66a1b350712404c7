"""Training algorithms: adversarial training plain or with interpolated data
(vanilla mixup or guided interpolation from the previous epoch's attackable
pool), the KL-regularized variant, geometry-weighted reweighting, and the
single-step fast variant.

All variants share one epoch skeleton; they differ only in how adversarial
variants are generated and how the batch loss is assembled. With an
interpolation batch of zero, every interpolated variant runs the identical
code path (and RNG streams) as its base algorithm, so their trajectories are
bitwise equal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackSpec, fgsm_random, pgd_attack, pgd_attack_with_kappa, trades_attack
from .datasets import Dataset
from .errors import ConfigError, NumericError
from .evaluation import EpochMetrics, eval_natural, eval_robust
from .interpolation import (
    InterpolationSet,
    LambdaPolicy,
    build_interpolation_set,
    build_mixup_set,
)
from .nn import MlpModel, SgdState, forward, loss_and_grads, sgd_step, trades_objective_grads
from .rng import stream

ALGORITHMS = (
    "at",
    "at_mixup",
    "at_gif",
    "trades",
    "trades_gif",
    "gairat",
    "gairat_gif",
    "fastat",
    "fastat_gif",
)
INTERP_ALGORITHMS = frozenset(
    {"at_mixup", "at_gif", "trades_gif", "gairat_gif", "fastat_gif"}
)
_FAMILIES = {
    "at": "at",
    "at_mixup": "at",
    "at_gif": "at",
    "trades": "trades",
    "trades_gif": "trades",
    "gairat": "gairat",
    "gairat_gif": "gairat",
    "fastat": "fastat",
    "fastat_gif": "fastat",
}


def algorithm_family(algorithm: str) -> str:
    return _FAMILIES[algorithm]


@dataclass
class TrainSpec:
    """Everything a training run needs besides the model and the data."""

    algorithm: str = "at"
    epochs: int = 10
    batch_size: int = 128
    interp_batch_size: int = 0
    batches_per_epoch: int | None = None
    attack: AttackSpec = field(default_factory=lambda: AttackSpec(8 / 255, 2 / 255, 10))
    lambda_policy: LambdaPolicy = field(default_factory=LambdaPolicy.fixed)
    burn_in_epochs: int = 0
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_decay: float = 0.1
    trades_beta: float = 6.0
    cross_class_only: bool = False
    parallel_workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}, expected one of {ALGORITHMS}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.interp_batch_size < 0:
            raise ConfigError("interp_batch_size must be >= 0")
        if self.interp_batch_size > 0 and self.algorithm not in INTERP_ALGORITHMS:
            raise ConfigError(
                f"algorithm {self.algorithm!r} does not use interpolated data; "
                "set interp_batch_size=0"
            )
        if self.burn_in_epochs < 0:
            raise ConfigError("burn_in_epochs must be >= 0")
        if self.lr_decay <= 0.0:
            raise ConfigError("lr_decay must be positive")
        if any(not 0.0 < f <= 1.0 for f in self.lr_milestones):
            raise ConfigError("lr milestones are fractions of the epoch budget in (0, 1]")
        if self.trades_beta < 0.0:
            raise ConfigError("trades_beta must be >= 0")
        if self.parallel_workers < 1:
            raise ConfigError("parallel_workers must be >= 1")
        fam = algorithm_family(self.algorithm)
        atk = self.attack
        if fam == "trades":
            if atk.loss != "kl_vs_natural" or atk.init != "gaussian":
                raise ConfigError(
                    "trades algorithms need an attack with loss='kl_vs_natural' and init='gaussian'"
                )
        elif fam == "fastat":
            if atk.init != "uniform" or atk.steps != 1 or atk.loss != "ce":
                raise ConfigError(
                    "fastat algorithms need an attack with init='uniform', steps=1, loss='ce'"
                )
        elif fam == "gairat":
            if atk.loss != "ce":
                raise ConfigError("gairat algorithms need the ce attack loss")
        else:
            if atk.loss not in ("ce", "cw_margin"):
                raise ConfigError("at-family algorithms need the ce or cw_margin attack loss")

    @property
    def trades_gamma(self) -> float:
        """Strength of the Gaussian attack start; stored on the attack spec."""
        return self.attack.gaussian_scale

    def resolved_batches(self, n_train: int) -> int:
        if self.batches_per_epoch is not None:
            if self.batches_per_epoch < 1:
                raise ConfigError("batches_per_epoch must be >= 1")
            return self.batches_per_epoch
        return max(1, math.ceil(n_train / (self.batch_size + self.interp_batch_size)))


def lr_at_epoch(
    initial: float,
    milestone_fractions,
    decay: float,
    total_epochs: int,
    epoch: int,
) -> float:
    """Piecewise-constant rate: multiplied by ``decay`` at each milestone,
    where milestone epochs are floor(fraction * total), at least 1."""
    drops = 0
    for frac in milestone_fractions:
        milestone = max(1, int(frac * total_epochs + 1e-9))
        if epoch >= milestone:
            drops += 1
    return initial * decay**drops


def gairat_omega(kappa, n_steps: int):
    """Geometry weight (1 + tanh(-1 + 5*(1 - 2*kappa/K))) / 2; close to 1 for
    samples fooled immediately, close to 0 for samples never fooled."""
    k = np.asarray(kappa, dtype=np.float64)
    out = (1.0 + np.tanh(-1.0 + 5.0 * (1.0 - 2.0 * k / n_steps))) / 2.0
    return out if out.ndim else float(out)


def normalize_gairat_weights(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=np.float64)
    return w / w.sum()


@dataclass
class EpochTrace:
    """Stored per-batch adversarial variants of original rows, for post-hoc
    re-checks of the attackable bookkeeping."""

    original_ids: np.ndarray
    x_adv: np.ndarray
    attackable: np.ndarray


@dataclass
class EpochOutcome:
    attackable_ids: np.ndarray
    examined_originals: int
    original_draws: int
    original_attackable_draws: int
    interp_draws: int
    interp_attackable_draws: int
    mean_loss: float
    samples_consumed: int
    traces: list[EpochTrace] | None = None


def run_epoch(
    model: MlpModel,
    sgd: SgdState,
    spec: TrainSpec,
    train_ds: Dataset,
    interp_set: InterpolationSet | None,
    epoch: int,
    record_trace: bool = False,
) -> EpochOutcome:
    """One epoch of the algorithm family selected by the spec.

    Every mini-batch draws ``batch_size`` originals plus
    ``interp_batch_size`` interpolated samples (or that many extra originals
    when no interpolation set is active), attacks them, records which
    originals were attackable, and takes one SGD step.
    """
    n = train_ds.n
    m, mp = spec.batch_size, spec.interp_batch_size
    n_batches = spec.resolved_batches(n)
    family = algorithm_family(spec.algorithm)
    workers = spec.parallel_workers
    use_interp = interp_set is not None and len(interp_set) > 0 and mp > 0

    attackable_ids: set[int] = set()
    examined: set[int] = set()
    loss_sum = 0.0
    orig_draws = orig_attackable = 0
    interp_draws = interp_attackable = 0
    consumed = 0
    traces: list[EpochTrace] | None = [] if record_trace else None

    for batch in range(1, n_batches + 1):
        rng_orig = stream(spec.seed, "sample-original", epoch, batch)
        if use_interp:
            orig_idx = np.sort(rng_orig.choice(n, size=m, replace=False))
            rng_interp = stream(spec.seed, "sample-interp", epoch, batch)
            interp_idx = np.sort(rng_interp.choice(len(interp_set), size=mp, replace=False))
            x = np.vstack([train_ds.features[orig_idx], interp_set.features[interp_idx]])
            y = np.vstack([train_ds.labels[orig_idx], interp_set.soft_labels[interp_idx]])
            parent_classes = interp_set.parent_classes[interp_idx]
            n_orig_rows = m
        else:
            orig_idx = np.sort(rng_orig.choice(n, size=m + mp, replace=False))
            x = train_ds.features[orig_idx]
            y = train_ds.labels[orig_idx]
            parent_classes = None
            n_orig_rows = m + mp

        rng_attack = stream(spec.seed, "attack", epoch, batch)
        kappa = None
        try:
            if family == "trades":
                x_adv = trades_attack(model, x, spec.attack, rng_attack, workers=workers)
            elif family == "gairat":
                x_adv, kappa = pgd_attack_with_kappa(
                    model, x, y, spec.attack, rng_attack, workers=workers
                )
            elif family == "fastat":
                x_adv = fgsm_random(model, x, y, spec.attack, rng_attack, workers=workers)
            else:
                x_adv = pgd_attack(model, x, y, spec.attack, rng_attack, workers=workers)

            # attackability is judged from the training-time variants, pre-update
            preds = np.argmax(forward(model, x_adv), axis=1)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch} batch {batch}: {exc}") from exc
        own = np.argmax(y, axis=1)
        orig_mask = preds[:n_orig_rows] != own[:n_orig_rows]
        attackable_ids.update(int(i) for i in orig_idx[orig_mask])
        examined.update(int(i) for i in orig_idx)
        orig_draws += n_orig_rows
        orig_attackable += int(orig_mask.sum())
        if use_interp:
            imask = (preds[m:] != parent_classes[:, 0]) & (preds[m:] != parent_classes[:, 1])
            interp_draws += mp
            interp_attackable += int(imask.sum())
        consumed += x.shape[0]
        if traces is not None:
            traces.append(
                EpochTrace(
                    original_ids=orig_idx.copy(),
                    x_adv=x_adv[:n_orig_rows].copy(),
                    attackable=orig_mask.copy(),
                )
            )

        try:
            if family == "trades":
                loss, grads = trades_objective_grads(model, x, x_adv, y, spec.trades_beta)
            elif family == "gairat":
                weights = normalize_gairat_weights(gairat_omega(kappa, spec.attack.steps))
                loss, grads = loss_and_grads(model, x_adv, y, "ce", sample_weights=weights)
            else:
                loss, grads = loss_and_grads(model, x_adv, y, "ce")
            sgd_step(model, grads, sgd)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch} batch {batch}: {exc}") from exc
        loss_sum += loss

    return EpochOutcome(
        attackable_ids=np.array(sorted(attackable_ids), dtype=np.int64),
        examined_originals=len(examined),
        original_draws=orig_draws,
        original_attackable_draws=orig_attackable,
        interp_draws=interp_draws,
        interp_attackable_draws=interp_attackable,
        mean_loss=loss_sum / n_batches,
        samples_consumed=consumed,
        traces=traces,
    )


@dataclass
class TrainResult:
    final_model: MlpModel
    best_model: MlpModel
    best_epoch: int
    metrics: list[EpochMetrics]
    epoch_traces: list[list[EpochTrace]] | None = None


def selection_attack(spec: TrainSpec) -> AttackSpec:
    """Training-strength PGD (ce loss, natural start) used to pick the best
    checkpoint, regardless of how training variants were generated."""
    return replace(spec.attack, loss="ce", init="natural")


def default_eval_attacks(train_attack: AttackSpec) -> dict[str, AttackSpec]:
    """Evaluation presets at the training budget: 20-step ce attack and
    30-step margin attack, both from the natural start."""
    return {
        "pgd": replace(train_attack, steps=20, loss="ce", init="natural"),
        "cw": replace(train_attack, steps=30, loss="cw_margin", init="natural"),
    }


def run_training(
    model: MlpModel,
    spec: TrainSpec,
    train_ds: Dataset,
    eval_ds: Dataset | None = None,
    eval_attacks: dict[str, AttackSpec | None] | None = None,
    on_epoch=None,
    record_trace: bool = False,
) -> TrainResult:
    """Full training run: epochs of the selected algorithm, per-epoch metrics
    on the held-out set (the training set when none is given), and tracking
    of both the final model and the checkpoint with the best robust accuracy.

    During burn-in, and whenever the attackable pool is too small to pair,
    the interpolated slots are filled with extra original samples so every
    epoch consumes the same number of training samples.
    """
    n = train_ds.n
    if spec.batch_size + spec.interp_batch_size > n:
        raise ConfigError(
            f"batch of {spec.batch_size}+{spec.interp_batch_size} exceeds dataset size {n}"
        )
    eval_data = eval_ds if eval_ds is not None else train_ds
    if eval_attacks is None:
        eval_attacks = default_eval_attacks(spec.attack)
    sel_attack = selection_attack(spec)
    n_batches = spec.resolved_batches(n)

    sgd = SgdState(
        learning_rate=spec.learning_rate,
        momentum=spec.momentum,
        weight_decay=spec.weight_decay,
    )
    attackable_prev = np.arange(n, dtype=np.int64)  # epoch 0 pool is the whole dataset
    metrics: list[EpochMetrics] = []
    epoch_traces: list[list[EpochTrace]] | None = [] if record_trace else None
    best_model: MlpModel | None = None
    best_acc = -np.inf
    best_epoch = 0

    for epoch in range(1, spec.epochs + 1):
        sgd.learning_rate = lr_at_epoch(
            spec.learning_rate, spec.lr_milestones, spec.lr_decay, spec.epochs, epoch
        )
        interp_set = None
        if (
            spec.interp_batch_size > 0
            and spec.algorithm in INTERP_ALGORITHMS
            and epoch > spec.burn_in_epochs
        ):
            rng_set = stream(spec.seed, "interp-set", epoch)
            target = spec.interp_batch_size * n_batches
            if spec.algorithm == "at_mixup":
                interp_set = build_mixup_set(train_ds, target, spec.lambda_policy, rng_set)
            else:
                interp_set = build_interpolation_set(
                    train_ds,
                    attackable_prev,
                    target,
                    spec.lambda_policy,
                    rng_set,
                    cross_class_only=spec.cross_class_only,
                )
            if interp_set.fallback or len(interp_set) == 0:
                interp_set = None

        outcome = run_epoch(model, sgd, spec, train_ds, interp_set, epoch, record_trace)
        attackable_prev = outcome.attackable_ids
        if epoch_traces is not None:
            epoch_traces.append(outcome.traces or [])

        natural = eval_natural(model, eval_data)
        rob_pgd = (
            eval_robust(
                model,
                eval_data,
                eval_attacks["pgd"],
                rng=stream(spec.seed, "eval", "pgd", epoch),
                workers=spec.parallel_workers,
            )
            if eval_attacks.get("pgd")
            else None
        )
        rob_cw = (
            eval_robust(
                model,
                eval_data,
                eval_attacks["cw"],
                rng=stream(spec.seed, "eval", "cw", epoch),
                workers=spec.parallel_workers,
            )
            if eval_attacks.get("cw")
            else None
        )
        sel_acc = eval_robust(model, eval_data, sel_attack, workers=spec.parallel_workers)
        if sel_acc > best_acc:
            best_acc = sel_acc
            best_model = model.copy()
            best_epoch = epoch

        row = EpochMetrics(
            epoch=epoch,
            learning_rate=sgd.learning_rate,
            train_loss=outcome.mean_loss,
            natural_acc=natural,
            robust_acc_pgd=rob_pgd,
            robust_acc_cw=rob_cw,
            attackable_ratio_original=(
                len(outcome.attackable_ids) / outcome.examined_originals
                if outcome.examined_originals
                else 0.0
            ),
            attackable_ratio_interp=(
                outcome.interp_attackable_draws / outcome.interp_draws
                if outcome.interp_draws
                else None
            ),
            attackable_set_size=len(outcome.attackable_ids),
            examined_originals=outcome.examined_originals,
        )
        metrics.append(row)
        if on_epoch is not None:
            on_epoch(row)

    if best_model is None:
        best_model = model.copy()
        best_epoch = spec.epochs
    return TrainResult(
        final_model=model,
        best_model=best_model,
        best_epoch=best_epoch,
        metrics=metrics,
        epoch_traces=epoch_traces,
    )
