"""Attackable/guarded bookkeeping and convex data interpolation.

An original sample counts as attackable when its adversarial variant is
predicted as some class other than its label. An interpolated sample counts
as attackable only when the prediction differs from BOTH parents' classes.
Interpolation sets are built once per epoch: guided interpolation pairs
members of the previous epoch's attackable pool, vanilla mixup pairs
arbitrary dataset members.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .nn import MlpModel, forward, validate_soft_labels


@dataclass(frozen=True)
class InterpolationRecord:
    parent_i: int
    parent_j: int
    lam: float
    parent_class_i: int = -1
    parent_class_j: int = -1


@dataclass(frozen=True)
class LabeledSample:
    """One feature vector with a soft label.

    ``provenance`` is None for original (one-hot) samples and records the
    parent ids and interpolation weight otherwise.
    """

    features: np.ndarray
    soft_label: np.ndarray
    provenance: InterpolationRecord | None = None
    sample_id: int = -1

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64).reshape(-1)
        y = validate_soft_labels(self.soft_label).reshape(-1)
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValidationError("features must lie in [0, 1]")
        if self.provenance is None and not _is_one_hot(y):
            raise ValidationError("original samples must carry an exactly one-hot label")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "soft_label", y)

    @property
    def is_original(self) -> bool:
        return self.provenance is None

    @property
    def hard_label(self) -> int:
        return int(np.argmax(self.soft_label))


def _is_one_hot(y: np.ndarray) -> bool:
    return int(np.sum(y == 1.0)) == 1 and int(np.sum(y == 0.0)) == y.shape[0] - 1


@dataclass(frozen=True)
class LambdaPolicy:
    """How interpolation weights are drawn: a fixed value, U(0,1), or Beta(a,b)."""

    mode: str
    value: float = 0.5
    a: float = 0.3
    b: float = 0.3

    def __post_init__(self):
        if self.mode not in ("fixed", "uniform", "beta"):
            raise ValidationError(f"unknown lambda mode {self.mode!r}")
        if self.mode == "fixed" and not 0.0 <= self.value <= 1.0:
            raise ValidationError(f"fixed lambda must lie in [0, 1], got {self.value!r}")
        if self.mode == "beta" and (self.a <= 0.0 or self.b <= 0.0):
            raise ValidationError("beta parameters must be positive")

    @classmethod
    def fixed(cls, value: float = 0.5) -> "LambdaPolicy":
        return cls(mode="fixed", value=value)

    @classmethod
    def uniform(cls) -> "LambdaPolicy":
        return cls(mode="uniform")

    @classmethod
    def beta(cls, a: float = 0.3, b: float = 0.3) -> "LambdaPolicy":
        return cls(mode="beta", a=a, b=b)


def parse_lambda_policy(value) -> LambdaPolicy:
    """Accepts a LambdaPolicy, a number (fixed), 'uniform', 'beta(a,b)', or a
    config mapping like {'mode': 'beta', 'a': 0.3, 'b': 0.3}."""
    if isinstance(value, LambdaPolicy):
        return value
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return LambdaPolicy.fixed(float(value))
    if isinstance(value, str):
        text = value.strip().lower()
        if text == "uniform":
            return LambdaPolicy.uniform()
        if text.startswith("beta(") and text.endswith(")"):
            parts = text[5:-1].split(",")
            if len(parts) != 2:
                raise ValidationError(f"cannot parse beta parameters from {value!r}")
            return LambdaPolicy.beta(float(parts[0]), float(parts[1]))
        try:
            return LambdaPolicy.fixed(float(text))
        except ValueError:
            raise ValidationError(f"cannot parse lambda policy from {value!r}") from None
    if isinstance(value, dict):
        known = {"mode", "value", "a", "b"}
        unknown = set(value) - known
        if unknown:
            raise ValidationError(f"unknown lambda policy keys: {sorted(unknown)}")
        return LambdaPolicy(**value)
    raise ValidationError(f"cannot parse lambda policy from {value!r}")


def sample_lambda(policy: LambdaPolicy, rng) -> float:
    if policy.mode == "fixed":
        return policy.value
    if policy.mode == "uniform":
        return float(rng.random())
    return float(rng.beta(policy.a, policy.b))


def _sample_lambdas(policy: LambdaPolicy, rng, size: int) -> np.ndarray:
    if policy.mode == "fixed":
        return np.full(size, policy.value)
    if policy.mode == "uniform":
        return rng.random(size)
    return rng.beta(policy.a, policy.b, size)


def interpolate_pair(s_i: LabeledSample, s_j: LabeledSample, lam: float) -> LabeledSample:
    """Convex combination lam * s_i + (1 - lam) * s_j of features and labels."""
    if s_i.features.shape != s_j.features.shape:
        raise ValidationError("parents disagree on feature dimension")
    if s_i.soft_label.shape != s_j.soft_label.shape:
        raise ValidationError("parents disagree on class count")
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"lambda must lie in [0, 1], got {lam!r}")
    return LabeledSample(
        features=lam * s_i.features + (1.0 - lam) * s_j.features,
        soft_label=lam * s_i.soft_label + (1.0 - lam) * s_j.soft_label,
        provenance=InterpolationRecord(
            s_i.sample_id, s_j.sample_id, lam, s_i.hard_label, s_j.hard_label
        ),
    )


class AttackableSet:
    """Sample ids flagged attackable during one epoch; insertion is idempotent."""

    def __init__(self, epoch: int, ids=()):
        self.epoch = epoch
        self._ids = set(int(i) for i in ids)

    def add(self, sample_id: int) -> None:
        self._ids.add(int(sample_id))

    def update(self, ids) -> None:
        self._ids.update(int(i) for i in ids)

    def ids(self) -> np.ndarray:
        """Members in ascending id order, so downstream sampling is reproducible."""
        return np.array(sorted(self._ids), dtype=np.int64)

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, sample_id) -> bool:
        return int(sample_id) in self._ids


def predicted_classes(model: MlpModel, x) -> np.ndarray:
    """Argmax class per row, ties broken toward the lowest index."""
    return np.argmax(forward(model, x), axis=1)


def attackable_mask(model: MlpModel, x_adv, soft_labels) -> np.ndarray:
    """Original-data rule: prediction on the adversarial variant differs from
    the label's argmax."""
    y = validate_soft_labels(soft_labels, model.n_classes)
    return predicted_classes(model, x_adv) != np.argmax(y, axis=1)


def attackable_mask_interp(model: MlpModel, x_adv, parent_classes) -> np.ndarray:
    """Interpolated-data rule: prediction differs from both parents' classes."""
    parents = np.asarray(parent_classes, dtype=np.int64)
    if parents.ndim != 2 or parents.shape[1] != 2:
        raise ValidationError("parent_classes must have shape (n, 2)")
    preds = predicted_classes(model, x_adv)
    return (preds != parents[:, 0]) & (preds != parents[:, 1])


def is_attackable(model: MlpModel, sample: LabeledSample, x_adv) -> bool:
    """Whether an original sample's adversarial variant is misclassified."""
    if not sample.is_original:
        raise ValidationError("is_attackable applies to original samples")
    return bool(attackable_mask(model, x_adv, sample.soft_label.reshape(1, -1))[0])


def is_attackable_interp(model: MlpModel, sample: LabeledSample, x_adv) -> bool:
    """Whether an interpolated sample's adversarial variant is predicted as
    neither parent's class."""
    if sample.is_original:
        raise ValidationError("is_attackable_interp applies to interpolated samples")
    rec = sample.provenance
    parents = np.array([[rec.parent_class_i, rec.parent_class_j]])
    return bool(attackable_mask_interp(model, x_adv, parents)[0])


def update_attackable_set(att_set: AttackableSet, model: MlpModel, sample: LabeledSample, x_adv):
    """Insert the sample's id iff its adversarial variant is misclassified."""
    if sample.sample_id < 0:
        raise ValidationError("sample has no id; attackable sets are keyed by id")
    if is_attackable(model, sample, x_adv):
        att_set.add(sample.sample_id)
    return att_set


@dataclass
class InterpolationSet:
    """Materialized interpolated samples for one epoch."""

    features: np.ndarray        # (k, d)
    soft_labels: np.ndarray     # (k, C)
    parent_ids: np.ndarray      # (k, 2)
    lams: np.ndarray            # (k,)
    parent_classes: np.ndarray  # (k, 2) argmax class of each parent
    fallback: bool = False      # pool too small; trainer substitutes originals

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def sample(self, idx: int) -> LabeledSample:
        return LabeledSample(
            features=self.features[idx],
            soft_label=self.soft_labels[idx],
            provenance=InterpolationRecord(
                int(self.parent_ids[idx, 0]),
                int(self.parent_ids[idx, 1]),
                float(self.lams[idx]),
                int(self.parent_classes[idx, 0]),
                int(self.parent_classes[idx, 1]),
            ),
        )


def _empty_interp_set(d: int, n_classes: int, fallback: bool) -> InterpolationSet:
    return InterpolationSet(
        features=np.empty((0, d)),
        soft_labels=np.empty((0, n_classes)),
        parent_ids=np.empty((0, 2), dtype=np.int64),
        lams=np.empty(0),
        parent_classes=np.empty((0, 2), dtype=np.int64),
        fallback=fallback,
    )


def _build_pairs(dataset, pool_ids, target_size, policy, rng, cross_class_only):
    pool = np.asarray(pool_ids, dtype=np.int64)
    npool = pool.shape[0]
    classes = dataset.class_indices
    if npool < 2:
        return _empty_interp_set(dataset.feature_dim, dataset.n_classes, fallback=True)
    if cross_class_only and np.unique(classes[pool]).shape[0] < 2:
        return _empty_interp_set(dataset.feature_dim, dataset.n_classes, fallback=True)
    if target_size <= 0:
        return _empty_interp_set(dataset.feature_dim, dataset.n_classes, fallback=False)

    first = rng.integers(npool, size=target_size)
    shifted = rng.integers(npool - 1, size=target_size)
    second = shifted + (shifted >= first)
    if cross_class_only:
        for _ in range(1000):
            same = classes[pool[first]] == classes[pool[second]]
            if not np.any(same):
                break
            n_bad = int(same.sum())
            first[same] = rng.integers(npool, size=n_bad)
            shifted = rng.integers(npool - 1, size=n_bad)
            second[same] = shifted + (shifted >= first[same])
    lams = _sample_lambdas(policy, rng, target_size)

    ids_i, ids_j = pool[first], pool[second]
    xi, xj = dataset.features[ids_i], dataset.features[ids_j]
    yi, yj = dataset.labels[ids_i], dataset.labels[ids_j]
    lam_col = lams[:, None]
    return InterpolationSet(
        features=lam_col * xi + (1.0 - lam_col) * xj,
        soft_labels=lam_col * yi + (1.0 - lam_col) * yj,
        parent_ids=np.stack([ids_i, ids_j], axis=1),
        lams=lams,
        parent_classes=np.stack([classes[ids_i], classes[ids_j]], axis=1),
    )


def build_interpolation_set(
    dataset,
    attackable_ids,
    target_size: int,
    policy: LambdaPolicy,
    rng,
    cross_class_only: bool = False,
) -> InterpolationSet:
    """Pairs drawn uniformly with replacement from the attackable pool; the
    two members of a pair are distinct samples. A pool smaller than two
    yields an empty set with the fallback flag raised."""
    return _build_pairs(dataset, attackable_ids, target_size, policy, rng, cross_class_only)


def build_mixup_set(
    dataset, target_size: int, policy: LambdaPolicy, rng
) -> InterpolationSet:
    """Like build_interpolation_set but pairs come from the whole dataset.

    A singleton dataset degenerates to copies of that sample.
    """
    if dataset.n == 1:
        if target_size <= 0:
            return _empty_interp_set(dataset.feature_dim, dataset.n_classes, fallback=False)
        lams = _sample_lambdas(policy, rng, target_size)
        ids = np.zeros(target_size, dtype=np.int64)
        cls = dataset.class_indices[ids]
        return InterpolationSet(
            features=np.repeat(dataset.features, target_size, axis=0),
            soft_labels=np.repeat(dataset.labels, target_size, axis=0),
            parent_ids=np.stack([ids, ids], axis=1),
            lams=lams,
            parent_classes=np.stack([cls, cls], axis=1),
        )
    return _build_pairs(
        dataset, np.arange(dataset.n), target_size, policy, rng, cross_class_only=False
    )
