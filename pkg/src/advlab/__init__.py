"""Desk-scale adversarial-training laboratory.

A small MLP engine with exact gradients, sign-gradient attacks inside an
l-infinity ball, attackable-data bookkeeping, mixup and guided interpolation,
six training algorithms, and the instrumentation to compare them.
"""

from .attacks import AttackSpec, cw_margin_loss, fgsm_random, pgd_attack, project, trades_attack
from .datasets import Dataset, gen_rings, gen_two_gaussians, load_csv, pca_project, split
from .errors import ConfigError, DimensionError, NumericError, ValidationError
from .estimator import RobustMLPClassifier
from .evaluation import (
    EpochMetrics,
    LinearityReport,
    attackable_ratio,
    confidence_grid,
    eval_natural,
    eval_robust,
    linearity_probe,
)
from .interpolation import (
    AttackableSet,
    LabeledSample,
    LambdaPolicy,
    build_interpolation_set,
    build_mixup_set,
    interpolate_pair,
    is_attackable,
    is_attackable_interp,
    sample_lambda,
)
from .nn import (
    MlpModel,
    SgdState,
    forward,
    grad_input,
    grad_params,
    init_model,
    load_checkpoint,
    loss_ce_soft,
    loss_kl,
    save_checkpoint,
    sgd_step,
    softmax,
)
from .trainers import TrainSpec, gairat_omega, lr_at_epoch, run_epoch, run_training

__version__ = "0.1.0"

__all__ = [
    "AttackSpec",
    "AttackableSet",
    "ConfigError",
    "Dataset",
    "DimensionError",
    "EpochMetrics",
    "LabeledSample",
    "LambdaPolicy",
    "LinearityReport",
    "MlpModel",
    "NumericError",
    "RobustMLPClassifier",
    "SgdState",
    "TrainSpec",
    "ValidationError",
    "attackable_ratio",
    "build_interpolation_set",
    "build_mixup_set",
    "confidence_grid",
    "cw_margin_loss",
    "eval_natural",
    "eval_robust",
    "fgsm_random",
    "forward",
    "gairat_omega",
    "gen_rings",
    "gen_two_gaussians",
    "grad_input",
    "grad_params",
    "init_model",
    "interpolate_pair",
    "is_attackable",
    "is_attackable_interp",
    "linearity_probe",
    "load_checkpoint",
    "load_csv",
    "loss_ce_soft",
    "loss_kl",
    "lr_at_epoch",
    "pca_project",
    "pgd_attack",
    "project",
    "run_epoch",
    "run_training",
    "sample_lambda",
    "save_checkpoint",
    "sgd_step",
    "softmax",
    "split",
    "trades_attack",
]
