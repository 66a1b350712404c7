"""Accuracy metrics, attackable-ratio measurement, the boundary-linearity
probe, and table exports (metrics CSV, confidence grids, probe reports).

Floats are serialized with repr(), the shortest round-trip form, so files
written from identical runs are byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import AttackSpec, run_attack
from .datasets import Dataset
from .errors import ValidationError
from .interpolation import InterpolationSet, attackable_mask, attackable_mask_interp
from .nn import MlpModel, forward, softmax
from .rng import stream

METRICS_COLUMNS = (
    "epoch",
    "lr",
    "train_loss",
    "nat_acc",
    "rob_acc_pgd",
    "rob_acc_cw",
    "att_ratio_orig",
    "att_ratio_interp",
    "att_set_size",
)


@dataclass
class EpochMetrics:
    """One metrics row per epoch; interp ratio is None when the epoch used no
    interpolated data. ``examined_originals`` backs the ratio but is not a
    CSV column."""

    epoch: int
    learning_rate: float
    train_loss: float
    natural_acc: float
    robust_acc_pgd: float | None
    robust_acc_cw: float | None
    attackable_ratio_original: float
    attackable_ratio_interp: float | None
    attackable_set_size: int
    examined_originals: int = 0

    def csv_row(self) -> str:
        cells = [
            str(self.epoch),
            repr(float(self.learning_rate)),
            repr(float(self.train_loss)),
            repr(float(self.natural_acc)),
            "" if self.robust_acc_pgd is None else repr(float(self.robust_acc_pgd)),
            "" if self.robust_acc_cw is None else repr(float(self.robust_acc_cw)),
            repr(float(self.attackable_ratio_original)),
            ""
            if self.attackable_ratio_interp is None
            else repr(float(self.attackable_ratio_interp)),
            str(self.attackable_set_size),
        ]
        return ",".join(cells)


def metrics_header() -> str:
    return ",".join(METRICS_COLUMNS)


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(metrics_header() + "\n")
        for m in metrics:
            fh.write(m.csv_row() + "\n")


def read_metrics_csv(path) -> list[dict]:
    """Rows as dicts of raw strings, keyed by column name."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != metrics_header():
        raise ValidationError(f"{path}: missing or unexpected metrics header")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(METRICS_COLUMNS):
            raise ValidationError(f"{path}: malformed metrics row {ln!r}")
        rows.append(dict(zip(METRICS_COLUMNS, cells)))
    return rows


def eval_natural(model: MlpModel, dataset: Dataset) -> float:
    """Fraction of samples whose argmax prediction matches the label."""
    if dataset.n == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    preds = np.argmax(forward(model, dataset.features), axis=1)
    return float(np.mean(preds == dataset.class_indices))


def eval_robust(
    model: MlpModel, dataset: Dataset, attack: AttackSpec, rng=None, workers: int = 1
) -> float:
    """Accuracy after attacking every test point. With epsilon 0 the attack
    cannot move anything and this equals eval_natural bitwise."""
    if dataset.n == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    x_adv = run_attack(model, dataset.features, dataset.labels, attack, rng, workers=workers)
    preds = np.argmax(forward(model, x_adv), axis=1)
    return float(np.mean(preds == dataset.class_indices))


def attackable_ratio(
    model: MlpModel,
    samples,
    attack: AttackSpec | None = None,
    *,
    x_adv=None,
    rng=None,
    workers: int = 1,
) -> float:
    """Fraction of samples whose adversarial variant satisfies the matching
    attackability rule (original vs interpolated, chosen by container type).

    Pass ``x_adv`` to reuse stored adversarial variants instead of attacking.
    """
    if isinstance(samples, Dataset):
        features, labels = samples.features, samples.labels
        interp = False
    elif isinstance(samples, InterpolationSet):
        features, labels = samples.features, samples.soft_labels
        interp = True
    else:
        raise ValidationError("samples must be a Dataset or an InterpolationSet")
    if features.shape[0] == 0:
        raise ValidationError("cannot measure an empty sample set")
    if x_adv is None:
        if attack is None:
            raise ValidationError("need either an attack spec or precomputed x_adv")
        x_adv = run_attack(model, features, labels, attack, rng, workers=workers)
    if interp:
        mask = attackable_mask_interp(model, x_adv, samples.parent_classes)
    else:
        mask = attackable_mask(model, x_adv, labels)
    return float(np.mean(mask))


@dataclass
class SegmentLinearity:
    deviation: float
    sharpness: float


@dataclass
class LinearityReport:
    """Per-segment deviation from the endpoint-linear confidence path and
    maximum confidence slope, with batch aggregates."""

    segments: list[SegmentLinearity]

    @property
    def mean_deviation(self) -> float:
        return float(np.mean([s.deviation for s in self.segments]))

    @property
    def max_deviation(self) -> float:
        return float(np.max([s.deviation for s in self.segments]))

    @property
    def mean_sharpness(self) -> float:
        return float(np.mean([s.sharpness for s in self.segments]))

    @property
    def max_sharpness(self) -> float:
        return float(np.max([s.sharpness for s in self.segments]))


def linearity_probe(
    model: MlpModel,
    segments,
    samples_per_segment: int = 101,
    class_index: int = 1,
) -> LinearityReport:
    """Evaluate the class confidence along straight segments.

    deviation D = mean_t |p(t) - L(t)| with L the endpoint interpolation;
    sharpness = max_t |p(t + dt) - p(t)| / dt. A confidence profile that is
    affine in t gives D = 0.
    """
    if samples_per_segment < 3:
        raise ValidationError("need at least 3 samples per segment")
    if not segments:
        raise ValidationError("need at least one segment")
    if not 0 <= class_index < model.n_classes:
        raise ValidationError(f"class_index {class_index} out of range")
    t = np.arange(samples_per_segment) / (samples_per_segment - 1)
    dt = 1.0 / (samples_per_segment - 1)
    out = []
    for a, b in segments:
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        b = np.asarray(b, dtype=np.float64).reshape(-1)
        if a.shape != b.shape:
            raise ValidationError("segment endpoints disagree on dimension")
        if np.array_equal(a, b):
            raise ValidationError("segment endpoints are identical")
        points = (1.0 - t)[:, None] * a[None, :] + t[:, None] * b[None, :]
        p = softmax(forward(model, points))[:, class_index]
        linear = p[0] + t * (p[-1] - p[0])
        deviation = float(np.mean(np.abs(p - linear)))
        sharpness = float(np.max(np.abs(np.diff(p))) / dt)
        out.append(SegmentLinearity(deviation=deviation, sharpness=sharpness))
    return LinearityReport(segments=out)


def default_probe_segments(dataset: Dataset, n_pairs: int = 20, seed: int = 0):
    """Random cross-class point pairs plus the pair of the first two class
    means; every caller with the same dataset and seed gets the same segments."""
    classes = dataset.class_indices
    present = np.unique(classes)
    if present.shape[0] < 2:
        raise ValidationError("probe segments need at least two classes")
    rng = stream(seed, "probe-segments")
    by_class = {int(c): np.flatnonzero(classes == c) for c in present}
    segments = []
    for _ in range(n_pairs):
        for _attempt in range(100):
            c1, c2 = rng.choice(present, size=2, replace=False)
            i = int(rng.choice(by_class[int(c1)]))
            j = int(rng.choice(by_class[int(c2)]))
            a, b = dataset.features[i], dataset.features[j]
            if not np.array_equal(a, b):
                segments.append((a.copy(), b.copy()))
                break
    mean_a = dataset.features[by_class[int(present[0])]].mean(axis=0)
    mean_b = dataset.features[by_class[int(present[1])]].mean(axis=0)
    if not np.array_equal(mean_a, mean_b):
        segments.append((mean_a, mean_b))
    return segments


def confidence_grid(model: MlpModel, bounds=((0.0, 1.0), (0.0, 1.0)), resolution=(50, 50)):
    """Softmax confidences on a uniform 2-D grid.

    Returns rows of (x, y, conf_0, ..., conf_{C-1}), row-major with the first
    coordinate varying slowest.
    """
    if model.input_dim != 2:
        raise ValidationError("confidence grids are defined for 2-D models")
    if isinstance(resolution, int):
        resolution = (resolution, resolution)
    nx, ny = (int(r) for r in resolution)
    if nx < 1 or ny < 1:
        raise ValidationError("resolution must be positive")
    (x0, x1), (y0, y1) = bounds
    xs = np.linspace(x0, x1, nx) if nx > 1 else np.array([float(x0)])
    ys = np.linspace(y0, y1, ny) if ny > 1 else np.array([float(y0)])
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    conf = softmax(forward(model, points))
    return np.hstack([points, conf])


def write_grid(path, grid: np.ndarray) -> None:
    n_classes = grid.shape[1] - 2
    header = "x y " + " ".join(f"conf_{c}" for c in range(n_classes))
    with open(path, "w", encoding="ascii") as fh:
        fh.write(header + "\n")
        for row in grid:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


REPORT_MAGIC = "linearity-report"
REPORT_VERSION = 1


def write_linearity_report(path, report: LinearityReport) -> None:
    lines = [f"{REPORT_MAGIC} {REPORT_VERSION}"]
    for i, seg in enumerate(report.segments):
        lines.append(f"segment {i} deviation {seg.deviation!r} sharpness {seg.sharpness!r}")
    lines.append(f"mean_deviation {report.mean_deviation!r}")
    lines.append(f"max_deviation {report.max_deviation!r}")
    lines.append(f"mean_sharpness {report.mean_sharpness!r}")
    lines.append(f"max_sharpness {report.max_sharpness!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_linearity_report(path) -> dict:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != f"{REPORT_MAGIC} {REPORT_VERSION}":
        raise ValidationError(f"{path}: not a linearity report")
    segments, aggregates = [], {}
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "segment":
            segments.append(
                SegmentLinearity(deviation=float(parts[3]), sharpness=float(parts[5]))
            )
        else:
            aggregates[parts[0]] = float(parts[1])
    return {"segments": segments, **aggregates}
