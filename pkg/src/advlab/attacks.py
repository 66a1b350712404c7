"""Sign-gradient attacks inside an l-infinity ball.

Covers multi-step ascent with cross-entropy or margin loss, the single-step
variant with a uniform random start, and the KL-maximizing variant with a
Gaussian start. Every sample's trajectory depends only on its own row, so a
batch can be attacked in chunks (or threads) and still reproduce the serial
result bitwise.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, ValidationError
from .nn import MlpModel, as_matrix, forward, input_grad_rows, validate_soft_labels

INIT_MODES = ("natural", "uniform", "gaussian")
ATTACK_LOSSES = ("ce", "cw_margin", "kl_vs_natural")


@dataclass(frozen=True)
class AttackSpec:
    """Perturbation budget and search settings for one attack."""

    epsilon: float
    alpha: float
    steps: int = 10
    init: str = "natural"
    loss: str = "ce"
    clamp: bool = True
    gaussian_scale: float = 1e-3

    def __post_init__(self):
        if not np.isfinite(self.epsilon) or self.epsilon < 0.0:
            raise ConfigError(f"epsilon must be finite and >= 0, got {self.epsilon!r}")
        if not np.isfinite(self.alpha) or self.alpha < 0.0:
            raise ConfigError(f"alpha must be finite and >= 0, got {self.alpha!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps!r}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"unknown init {self.init!r}, expected one of {INIT_MODES}")
        if self.loss not in ATTACK_LOSSES:
            raise ConfigError(f"unknown attack loss {self.loss!r}, expected one of {ATTACK_LOSSES}")
        if self.init == "gaussian" and not self.gaussian_scale > 0.0:
            raise ConfigError("gaussian init requires gaussian_scale > 0")


def project(x_adv, x_origin, epsilon: float, clamp: bool = True) -> np.ndarray:
    """Clip into [x_origin - eps, x_origin + eps], then into [0, 1] if clamp.

    Idempotent: applying it twice returns the same bytes.
    """
    adv = as_matrix(x_adv, "x_adv")
    origin = as_matrix(x_origin, "x_origin")
    if adv.shape != origin.shape:
        raise DimensionError(f"shape mismatch: {adv.shape} vs {origin.shape}")
    out = np.clip(adv, origin - epsilon, origin + epsilon)
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


def cw_margin_loss(logits, labels) -> np.ndarray:
    """Per-row margin max_{i != y} z_i - z_y; positive once the row is misclassified."""
    z = as_matrix(logits, "logits")
    if z.shape[1] < 2:
        raise ValidationError("margin loss needs at least two classes")
    idx = np.asarray(labels, dtype=np.int64).reshape(-1)
    if idx.shape[0] != z.shape[0]:
        raise DimensionError("labels do not match the batch size")
    if np.any(idx < 0) or np.any(idx >= z.shape[1]):
        raise ValidationError("label index out of range")
    rows = np.arange(z.shape[0])
    masked = z.copy()
    masked[rows, idx] = -np.inf
    return masked.max(axis=1) - z[rows, idx]


def _initial_point(x: np.ndarray, spec: AttackSpec, rng) -> np.ndarray:
    if spec.init == "natural":
        return x.copy()
    if rng is None:
        raise ConfigError(f"init {spec.init!r} needs an rng")
    if spec.init == "uniform":
        start = x + rng.uniform(-spec.epsilon, spec.epsilon, size=x.shape)
    else:
        start = x + spec.gaussian_scale * rng.standard_normal(size=x.shape)
    return project(start, x, spec.epsilon, spec.clamp)


def _ascend(model, x, start, soft_labels, spec, reference_logits, kappa_targets):
    """K projected sign steps; optionally counts, per row, the steps at which
    the current iterate is still predicted as its target class."""
    adv = start
    kappa = np.zeros(x.shape[0], dtype=np.int64) if kappa_targets is not None else None
    loss_kind = "kl_vs_reference" if spec.loss == "kl_vs_natural" else spec.loss
    for _ in range(spec.steps):
        if kappa is not None:
            preds = np.argmax(forward(model, adv), axis=1)
            kappa += (preds == kappa_targets).astype(np.int64)
        g = input_grad_rows(model, adv, soft_labels, loss_kind, reference_logits)
        adv = project(adv + spec.alpha * np.sign(g), x, spec.epsilon, spec.clamp)
    return adv, kappa


def _attack(model, x, soft_labels, spec, rng, reference_logits=None, kappa_targets=None, workers=1):
    x = as_matrix(x, "x")
    start = _initial_point(x, spec, rng)
    if workers <= 1 or x.shape[0] < 2:
        adv, kappa = _ascend(model, x, start, soft_labels, spec, reference_logits, kappa_targets)
    else:
        # rows are independent, so chunked execution is bitwise equal to serial
        adv = np.empty_like(x)
        kappa = np.zeros(x.shape[0], dtype=np.int64) if kappa_targets is not None else None
        bounds = np.linspace(0, x.shape[0], workers + 1).astype(int)
        chunks = [(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]

        def work(lo, hi):
            sl = slice(lo, hi)
            out, kap = _ascend(
                model,
                x[sl],
                start[sl],
                None if soft_labels is None else soft_labels[sl],
                spec,
                None if reference_logits is None else reference_logits[sl],
                None if kappa_targets is None else kappa_targets[sl],
            )
            adv[sl] = out
            if kap is not None:
                kappa[sl] = kap

        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            list(pool.map(lambda c: work(*c), chunks))
    assert np.all(np.abs(adv - x) <= spec.epsilon + 1e-12), "left the epsilon ball"
    assert not spec.clamp or (adv.min() >= 0.0 and adv.max() <= 1.0), "left the unit box"
    return adv, kappa


def pgd_attack(model: MlpModel, x, soft_labels, spec: AttackSpec, rng=None, workers: int = 1):
    """Multi-step projected sign ascent on CE or margin loss.

    Soft labels are attacked as given; the margin loss reduces them to
    argmax with ties broken toward the lower class index.
    """
    if spec.loss not in ("ce", "cw_margin"):
        raise ConfigError(f"pgd_attack supports ce or cw_margin loss, got {spec.loss!r}")
    y = validate_soft_labels(soft_labels, model.n_classes)
    adv, _ = _attack(model, x, y, spec, rng, workers=workers)
    return adv


def pgd_attack_with_kappa(
    model: MlpModel, x, soft_labels, spec: AttackSpec, rng=None, workers: int = 1
):
    """PGD that also reports kappa: for each sample, at how many of the K
    steps the current iterate was still predicted as argmax of its label."""
    if spec.loss != "ce":
        raise ConfigError("kappa counting is defined for the ce attack loss")
    y = validate_soft_labels(soft_labels, model.n_classes)
    targets = np.argmax(y, axis=1)
    adv, kappa = _attack(model, x, y, spec, rng, kappa_targets=targets, workers=workers)
    return adv, kappa


def fgsm_random(model: MlpModel, x, soft_labels, spec: AttackSpec, rng, workers: int = 1):
    """One projected sign step from a uniform random start inside the ball."""
    if spec.init != "uniform":
        raise ConfigError("fgsm_random requires init='uniform'")
    if spec.steps != 1:
        raise ConfigError("fgsm_random requires steps=1")
    if spec.loss != "ce":
        raise ConfigError("fgsm_random uses the ce loss")
    y = validate_soft_labels(soft_labels, model.n_classes)
    adv, _ = _attack(model, x, y, spec, rng, workers=workers)
    return adv


def trades_attack(model: MlpModel, x, spec: AttackSpec, rng, workers: int = 1):
    """KL-maximizing attack from a Gaussian start; the natural-input
    prediction is frozen as the reference distribution."""
    if spec.loss != "kl_vs_natural":
        raise ConfigError("trades_attack requires loss='kl_vs_natural'")
    if spec.init != "gaussian":
        raise ConfigError("trades_attack requires init='gaussian'")
    reference = forward(model, x)
    adv, _ = _attack(model, x, None, spec, rng, reference_logits=reference, workers=workers)
    return adv


def run_attack(model: MlpModel, x, soft_labels, spec: AttackSpec, rng=None, workers: int = 1):
    """Dispatch on the spec's loss: ce/cw_margin go to PGD, kl_vs_natural to
    the Gaussian-start KL attack."""
    if spec.loss == "kl_vs_natural":
        return trades_attack(model, x, spec, rng, workers=workers)
    return pgd_attack(model, x, soft_labels, spec, rng, workers=workers)
