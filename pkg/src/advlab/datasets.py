"""Synthetic 2D datasets, CSV ingestion with unit-box normalization,
stratified splitting, and a small power-iteration PCA."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, ValidationError
from .interpolation import LabeledSample
from .rng import stream


def one_hot(class_indices, n_classes: int) -> np.ndarray:
    idx = np.asarray(class_indices, dtype=np.int64).reshape(-1)
    if np.any(idx < 0) or np.any(idx >= n_classes):
        raise ValidationError("class index out of range")
    out = np.zeros((idx.shape[0], n_classes))
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


@dataclass
class Dataset:
    """Immutable-by-convention container: features in [0, 1]^d, one-hot labels."""

    features: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2:
            raise DimensionError("features and labels must be 2-D")
        if x.shape[0] != y.shape[0]:
            raise DimensionError("features and labels disagree on sample count")
        if x.size and (x.min() < 0.0 or x.max() > 1.0):
            raise ValidationError("features must lie in [0, 1]")
        ones = (y == 1.0).sum(axis=1)
        zeros = (y == 0.0).sum(axis=1)
        if np.any(ones != 1) or np.any(zeros != y.shape[1] - 1):
            raise ValidationError("labels must be exactly one-hot")
        self.features = x
        self.labels = y

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_classes(self) -> int:
        return int(self.labels.shape[1])

    @property
    def class_indices(self) -> np.ndarray:
        return np.argmax(self.labels, axis=1)

    def sample(self, idx: int) -> LabeledSample:
        return LabeledSample(
            features=self.features[idx], soft_label=self.labels[idx], sample_id=int(idx)
        )

    def subset(self, ids, split: str | None = None) -> "Dataset":
        ids = np.asarray(ids, dtype=np.int64)
        return Dataset(
            features=self.features[ids].copy(),
            labels=self.labels[ids].copy(),
            split=split if split is not None else self.split,
        )


def gen_two_gaussians(
    n_per_class: int,
    centers=((0.3, 0.3), (0.7, 0.7)),
    sigma: float = 0.08,
    seed: int = 0,
) -> Dataset:
    """Isotropic Gaussian clusters, one per center, clipped into the unit box."""
    if not np.isfinite(sigma) or sigma <= 0.0:
        raise ValidationError(f"sigma must be positive, got {sigma!r}")
    if n_per_class < 1:
        raise ValidationError("need at least one sample per class")
    centers = [tuple(float(v) for v in c) for c in centers]
    for c in centers:
        if len(c) != 2 or any(not 0.0 < v < 1.0 for v in c):
            raise ValidationError(f"centers must lie strictly inside (0,1)^2, got {c}")
    rng = stream(seed, "two-gaussians")
    features, classes = [], []
    for k, c in enumerate(centers):
        pts = np.array(c) + sigma * rng.standard_normal((n_per_class, 2))
        features.append(np.clip(pts, 0.0, 1.0))
        classes.append(np.full(n_per_class, k, dtype=np.int64))
    x = np.vstack(features)
    y = one_hot(np.concatenate(classes), len(centers))
    return Dataset(features=x, labels=y)


def gen_rings(
    n_per_class: int,
    radii=(0.15, 0.35),
    noise: float = 0.02,
    seed: int = 0,
) -> Dataset:
    """Two concentric annuli centered at (0.5, 0.5); class 0 inner, class 1 outer."""
    r_inner, r_outer = (float(r) for r in radii)
    if not 0.0 < r_inner < r_outer:
        raise ValidationError(f"need 0 < r_inner < r_outer, got {radii}")
    if r_outer >= 0.5:
        raise ValidationError(f"outer radius {r_outer} does not fit in the unit box")
    if noise < 0.0:
        raise ValidationError("noise must be >= 0")
    rng = stream(seed, "rings")
    features, classes = [], []
    for k, radius in enumerate((r_inner, r_outer)):
        theta = rng.uniform(0.0, 2.0 * np.pi, n_per_class)
        r = radius + noise * rng.standard_normal(n_per_class)
        pts = 0.5 + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        features.append(np.clip(pts, 0.0, 1.0))
        classes.append(np.full(n_per_class, k, dtype=np.int64))
    return Dataset(features=np.vstack(features), labels=one_hot(np.concatenate(classes), 2))


@dataclass
class CsvSchema:
    """Normalization constants and label mapping fitted on one file and
    reusable on another split of the same table."""

    col_min: np.ndarray
    col_range: np.ndarray  # zero where min == max; such columns map to 0
    classes: list[int]

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        safe = np.where(self.col_range > 0.0, self.col_range, 1.0)
        out = (raw - self.col_min) / safe
        out = np.where(self.col_range > 0.0, out, 0.0)
        return np.clip(out, 0.0, 1.0)


def _parse_cell(token: str, path, line_no: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ValidationError(
            f"{path}:{line_no}: non-numeric cell {token!r}"
        ) from None


def load_csv(
    path,
    label_column=-1,
    delimiter: str = ",",
    has_header: bool = False,
    schema: CsvSchema | None = None,
) -> tuple[Dataset, CsvSchema]:
    """Numeric CSV with one integer label column; features are min-max
    normalized per column into [0, 1]. Errors carry the 1-based line number."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty file")

    header = None
    if has_header:
        header = [h.strip() for h in lines[0][1].split(delimiter)]
        lines = lines[1:]
        if not lines:
            raise ValidationError(f"{path}: no data rows after header")
    if isinstance(label_column, str):
        if header is None:
            raise ValidationError("label column by name requires has_header=True")
        if label_column not in header:
            raise ValidationError(f"label column {label_column!r} not in header {header}")
        label_idx = header.index(label_column)
    else:
        label_idx = int(label_column)

    width = len(lines[0][1].split(delimiter))
    if not -width <= label_idx < width:
        raise ValidationError(f"label column {label_idx} out of range for {width} columns")
    label_idx %= width

    raw_rows, raw_labels = [], []
    for line_no, ln in lines:
        cells = ln.split(delimiter)
        if len(cells) != width:
            raise ValidationError(
                f"{path}:{line_no}: ragged row has {len(cells)} cells, expected {width}"
            )
        values = [_parse_cell(c.strip(), path, line_no) for c in cells]
        label = values[label_idx]
        if label != int(label):
            raise ValidationError(f"{path}:{line_no}: label {label!r} is not an integer")
        raw_labels.append(int(label))
        raw_rows.append([v for i, v in enumerate(values) if i != label_idx])

    raw = np.array(raw_rows, dtype=np.float64)
    if schema is None:
        classes = sorted(set(raw_labels))
        col_min = raw.min(axis=0)
        col_range = raw.max(axis=0) - col_min
        schema = CsvSchema(col_min=col_min, col_range=col_range, classes=classes)
    class_to_idx = {c: i for i, c in enumerate(schema.classes)}
    idx = []
    for (line_no, _), lab in zip(lines, raw_labels):
        if lab not in class_to_idx:
            raise ValidationError(f"{path}:{line_no}: unseen label {lab}")
        idx.append(class_to_idx[lab])
    dataset = Dataset(
        features=schema.normalize(raw), labels=one_hot(idx, len(schema.classes))
    )
    return dataset, schema


def split(dataset: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified, disjoint, seed-deterministic train/test split."""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction must lie in (0, 1), got {test_fraction!r}")
    classes = dataset.class_indices
    train_ids, test_ids = [], []
    for c in range(dataset.n_classes):
        ids = np.flatnonzero(classes == c)
        if ids.shape[0] < 2:
            raise ValidationError(f"class {c} has fewer than 2 samples, cannot split")
        perm = stream(seed, "split", c).permutation(ids)
        n_test = int(round(test_fraction * ids.shape[0]))
        n_test = min(max(n_test, 1), ids.shape[0] - 1)
        test_ids.append(perm[:n_test])
        train_ids.append(perm[n_test:])
    train_ids = np.sort(np.concatenate(train_ids))
    test_ids = np.sort(np.concatenate(test_ids))
    return dataset.subset(train_ids, "train"), dataset.subset(test_ids, "test")


@dataclass
class PcaBasis:
    """Top-k principal directions of the centered data."""

    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    eigenvalues: np.ndarray
    explained_variance_ratio: np.ndarray
    box_min: np.ndarray = field(default=None)  # type: ignore[assignment]
    box_range: np.ndarray = field(default=None)  # type: ignore[assignment]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.components.T

    def to_unit_box(self, projected: np.ndarray) -> np.ndarray:
        safe = np.where(self.box_range > 0.0, self.box_range, 1.0)
        out = (projected - self.box_min) / safe
        out = np.where(self.box_range > 0.0, out, 0.0)
        return np.clip(out, 0.0, 1.0)


def _power_iteration(cov: np.ndarray, rng, max_iter: int = 1000, tol: float = 1e-12):
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v  # null direction; matrix is (numerically) exhausted
        v_new = w / norm
        lam = float(v_new @ cov @ v_new)
        if np.linalg.norm(cov @ v_new - lam * v_new) <= tol:
            v = v_new
            break
        v = v_new
    # fix orientation: largest-magnitude entry is positive
    pivot = int(np.argmax(np.abs(v)))
    if v[pivot] < 0.0:
        v = -v
    return lam, v


def pca_project(dataset: Dataset, k: int = 2) -> tuple[Dataset, PcaBasis]:
    """Project onto the top-k principal directions (power iteration with
    deflation) and min-max the projected coordinates into the unit box."""
    d = dataset.feature_dim
    if not 1 <= k <= d:
        raise ValidationError(f"k must lie in [1, {d}], got {k}")
    x = dataset.features
    mean = x.mean(axis=0)
    xc = x - mean
    denom = max(dataset.n - 1, 1)
    cov = (xc.T @ xc) / denom
    total_var = float(np.trace(cov))

    rng = stream(0xC0FFEE, "pca-start")
    work = cov.copy()
    eigenvalues, components = [], []
    for _ in range(k):
        lam, v = _power_iteration(work, rng)
        eigenvalues.append(lam)
        components.append(v)
        work = work - lam * np.outer(v, v)
    eigenvalues = np.array(eigenvalues)
    components = np.array(components)
    evr = eigenvalues / total_var if total_var > 0.0 else np.zeros(k)

    projected = xc @ components.T
    box_min = projected.min(axis=0)
    box_range = projected.max(axis=0) - box_min
    basis = PcaBasis(
        mean=mean,
        components=components,
        eigenvalues=eigenvalues,
        explained_variance_ratio=evr,
        box_min=box_min,
        box_range=box_range,
    )
    out = Dataset(
        features=basis.to_unit_box(projected), labels=dataset.labels.copy(), split=dataset.split
    )
    return out, basis
