"""Minimal dense MLP engine: forward pass, losses, exact gradients, SGD.

All numeric state is C-contiguous float64. Affine layers go through
``np.einsum`` instead of BLAS matmul: einsum keeps every output row bitwise
independent of the rest of the batch, so per-sample, chunked, and full-batch
evaluation agree exactly. That property is what makes parallel attack
generation reproducible byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, ValidationError
from .rng import stream

ACTIVATIONS = ("relu", "tanh")
LOSS_KINDS = ("ce", "kl_vs_reference", "cw_margin")


def as_matrix(a, name: str = "array") -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 2-D array (1-D becomes a row)."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim == 1:
        out = out.reshape(1, -1)
    if out.ndim != 2:
        raise DimensionError(f"{name} must be 1-D or 2-D, got shape {out.shape}")
    require_finite(out, name)
    return out


def require_finite(a: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {name}")
    return a


def _affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum, not matmul: BLAS gemm rounds differently for different batch
    # shapes, einsum does not.
    return np.einsum("ij,kj->ik", x, w) + b


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_deriv(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


@dataclass
class MlpModel:
    """Fully connected stack; hidden layers share one activation, the last
    layer emits raw logits.

    ``weights[l]`` has shape (layer_sizes[l+1], layer_sizes[l]) and
    ``biases[l]`` has shape (layer_sizes[l+1],).
    """

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, inputs) -> np.ndarray:
        return forward(self, inputs)

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_sizes=tuple(self.layer_sizes),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            activation=self.activation,
        )

    def check_shapes(self) -> None:
        sizes = self.layer_sizes
        if len(sizes) < 2:
            raise ValidationError("need at least input and output layer sizes")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise DimensionError("weight/bias count does not match layer_sizes")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (sizes[l + 1], sizes[l])
            if w.shape != want:
                raise DimensionError(f"weights[{l}] has shape {w.shape}, want {want}")
            if b.shape != (sizes[l + 1],):
                raise DimensionError(f"biases[{l}] has shape {b.shape}, want {(sizes[l + 1],)}")


def init_model(layer_sizes, activation: str = "relu", seed: int = 0) -> MlpModel:
    """Build an MLP with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights and
    zero biases; bitwise deterministic per seed."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ValidationError("layer_sizes needs at least an input dim and a class count")
    if any(s < 1 for s in sizes):
        raise ValidationError(f"layer sizes must be positive, got {sizes}")
    if activation not in ACTIVATIONS:
        raise ValidationError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")
    rng = stream(seed, "model-init")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(layer_sizes=sizes, weights=weights, biases=biases, activation=activation)


def _forward_cached(model: MlpModel, inputs) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Returns (activations, preactivations); activations[0] is the input and
    preactivations[-1] the raw logits."""
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != model.input_dim:
        raise DimensionError(
            f"inputs have {x.shape[1]} features, model expects {model.input_dim}"
        )
    acts = [x]
    pres = []
    for l in range(model.n_layers):
        z = _affine(acts[-1], model.weights[l], model.biases[l])
        pres.append(z)
        if l < model.n_layers - 1:
            acts.append(_act(z, model.activation))
        else:
            acts.append(z)
    return acts, pres


def forward(model: MlpModel, inputs) -> np.ndarray:
    """Raw logits for a batch; deterministic for fixed model and inputs."""
    _, pres = _forward_cached(model, inputs)
    return require_finite(pres[-1], "logits")


def softmax(logits) -> np.ndarray:
    z = as_matrix(logits, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = as_matrix(logits, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def validate_soft_labels(soft_labels, n_classes: int | None = None) -> np.ndarray:
    y = as_matrix(soft_labels, "soft_labels")
    if n_classes is not None and y.shape[1] != n_classes:
        raise DimensionError(f"soft labels have {y.shape[1]} classes, expected {n_classes}")
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise ValidationError("soft label entries must lie in [0, 1]")
    sums = y.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValidationError(f"soft label row {bad} sums to {sums[bad]!r}, not 1")
    return y


def loss_ce_soft(logits, soft_labels) -> float:
    """Mean cross-entropy against soft targets: -(1/b) sum_i sum_c y_ic log softmax(z_i)_c."""
    z = as_matrix(logits, "logits")
    y = validate_soft_labels(soft_labels, z.shape[1])
    if y.shape[0] != z.shape[0]:
        raise DimensionError("logits and soft labels disagree on batch size")
    per_row = -(y * log_softmax(z)).sum(axis=1)
    return float(np.mean(per_row))


def loss_kl(natural_logits, adv_logits) -> float:
    """Mean KL(softmax(natural) || softmax(adv)) over the batch; never negative."""
    zp = as_matrix(natural_logits, "natural_logits")
    zq = as_matrix(adv_logits, "adv_logits")
    if zp.shape != zq.shape:
        raise DimensionError(f"logit shapes differ: {zp.shape} vs {zq.shape}")
    logp = log_softmax(zp)
    logq = log_softmax(zq)
    p = np.exp(logp)
    per_row = np.where(p > 0.0, p * (logp - logq), 0.0).sum(axis=1)
    # sub-ulp negatives from rounding are clamped; true KL is >= 0
    per_row = np.maximum(per_row, 0.0)
    return float(np.mean(per_row))


def _hard_labels(soft_labels: np.ndarray) -> np.ndarray:
    # argmax breaks ties toward the lowest class index
    return np.argmax(soft_labels, axis=1)


def _loss_rows_and_dlogits(
    logits: np.ndarray,
    soft_labels: np.ndarray | None,
    loss_kind: str,
    reference_logits: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row loss values and per-row d(loss_row)/d(logits), unscaled.

    Callers apply batch averaging or sample weights; keeping rows unscaled is
    what lets chunked evaluation match full-batch evaluation bitwise.
    """
    if loss_kind == "ce":
        y = validate_soft_labels(soft_labels, logits.shape[1])
        logq = log_softmax(logits)
        rows = -(y * logq).sum(axis=1)
        dz = np.exp(logq) - y
    elif loss_kind == "kl_vs_reference":
        if reference_logits is None:
            raise ValidationError("loss_kind 'kl_vs_reference' requires reference_logits")
        ref = as_matrix(reference_logits, "reference_logits")
        if ref.shape != logits.shape:
            raise DimensionError("reference logits shape does not match logits")
        logp = log_softmax(ref)
        logq = log_softmax(logits)
        p = np.exp(logp)
        rows = np.maximum(np.where(p > 0.0, p * (logp - logq), 0.0).sum(axis=1), 0.0)
        dz = np.exp(logq) - p
    elif loss_kind == "cw_margin":
        y = validate_soft_labels(soft_labels, logits.shape[1])
        idx = _hard_labels(y)
        rows_arange = np.arange(logits.shape[0])
        masked = logits.copy()
        masked[rows_arange, idx] = -np.inf
        runner_up = np.argmax(masked, axis=1)
        rows = logits[rows_arange, runner_up] - logits[rows_arange, idx]
        dz = np.zeros_like(logits)
        dz[rows_arange, runner_up] = 1.0
        dz[rows_arange, idx] = -1.0
    else:
        raise ValidationError(f"unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")
    return rows, dz


def _backward_params(model, acts, pres, dz_last) -> list[tuple[np.ndarray, np.ndarray]]:
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * model.n_layers  # type: ignore[list-item]
    delta = dz_last
    for l in range(model.n_layers - 1, -1, -1):
        dw = np.einsum("bi,bj->ij", delta, acts[l])
        db = delta.sum(axis=0)
        grads[l] = (dw, db)
        if l > 0:
            delta = np.einsum("bi,ij->bj", delta, model.weights[l]) * _act_deriv(
                pres[l - 1], model.activation
            )
    return grads


def _backward_input(model, pres, dz_last) -> np.ndarray:
    delta = dz_last
    for l in range(model.n_layers - 1, 0, -1):
        delta = np.einsum("bi,ij->bj", delta, model.weights[l]) * _act_deriv(
            pres[l - 1], model.activation
        )
    return np.einsum("bi,ij->bj", delta, model.weights[0])


def input_grad_rows(
    model: MlpModel,
    inputs,
    soft_labels=None,
    loss_kind: str = "ce",
    reference_logits=None,
) -> np.ndarray:
    """Per-row gradient of each row's own loss w.r.t. its input (no batch
    averaging). Row i depends only on input row i."""
    acts, pres = _forward_cached(model, inputs)
    _, dz = _loss_rows_and_dlogits(pres[-1], soft_labels, loss_kind, reference_logits)
    return require_finite(_backward_input(model, pres, dz), "input gradient")


def grad_input(
    model: MlpModel,
    inputs,
    soft_labels=None,
    loss_kind: str = "ce",
    reference_logits=None,
) -> np.ndarray:
    """Gradient of the mean batch loss w.r.t. the inputs."""
    rows = input_grad_rows(model, inputs, soft_labels, loss_kind, reference_logits)
    return rows / rows.shape[0]


def loss_and_grads(
    model: MlpModel,
    inputs,
    soft_labels=None,
    loss_kind: str = "ce",
    reference_logits=None,
    sample_weights=None,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Scalar batch loss and parameter gradients.

    Without ``sample_weights`` the loss is the batch mean; with weights it is
    sum_i w_i * loss_i (weights are used as given, normalize first if they
    should sum to one).
    """
    acts, pres = _forward_cached(model, inputs)
    rows, dz = _loss_rows_and_dlogits(pres[-1], soft_labels, loss_kind, reference_logits)
    b = rows.shape[0]
    if sample_weights is None:
        w = np.full(b, 1.0 / b)
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        if w.shape != (b,):
            raise DimensionError(f"sample_weights must have shape ({b},), got {w.shape}")
    loss = float(np.sum(w * rows))
    grads = _backward_params(model, acts, pres, dz * w[:, None])
    for dw, db in grads:
        require_finite(dw, "weight gradient")
        require_finite(db, "bias gradient")
    return loss, grads


def grad_params(
    model: MlpModel,
    inputs,
    soft_labels=None,
    loss_kind: str = "ce",
    reference_logits=None,
    sample_weights=None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Parameter gradients of the (weighted) batch loss; one (dW, db) per layer."""
    return loss_and_grads(
        model, inputs, soft_labels, loss_kind, reference_logits, sample_weights
    )[1]


def trades_objective_grads(
    model: MlpModel,
    natural_inputs,
    adv_inputs,
    soft_labels,
    beta: float,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Loss and parameter gradients of mean[ CE(f(x), y) + beta * KL(f(x) || f(x_adv)) ].

    The KL term is differentiated through both the natural and the
    adversarial forward pass.
    """
    acts_n, pres_n = _forward_cached(model, natural_inputs)
    acts_a, pres_a = _forward_cached(model, adv_inputs)
    z_nat, z_adv = pres_n[-1], pres_a[-1]
    y = validate_soft_labels(soft_labels, z_nat.shape[1])
    if z_nat.shape != z_adv.shape:
        raise DimensionError("natural and adversarial batches disagree in shape")
    b = z_nat.shape[0]

    logp = log_softmax(z_nat)
    logq = log_softmax(z_adv)
    p, q = np.exp(logp), np.exp(logq)
    u = logp - logq

    ce_rows = -(y * logp).sum(axis=1)
    kl_rows = np.maximum(np.where(p > 0.0, p * u, 0.0).sum(axis=1), 0.0)
    loss = float(np.mean(ce_rows + beta * kl_rows))

    # d/dz_nat of CE is (p - y); of KL it is p * (u - <u>_p)
    u_mean = (p * u).sum(axis=1, keepdims=True)
    dz_nat = ((p - y) + beta * p * (u - u_mean)) / b
    dz_adv = beta * (q - p) / b

    grads_n = _backward_params(model, acts_n, pres_n, dz_nat)
    grads_a = _backward_params(model, acts_a, pres_a, dz_adv)
    grads = [(gn[0] + ga[0], gn[1] + ga[1]) for gn, ga in zip(grads_n, grads_a)]
    for dw, db in grads:
        require_finite(dw, "weight gradient")
        require_finite(db, "bias gradient")
    return loss, grads


@dataclass
class SgdState:
    """Heavy-ball SGD with L2 weight decay added to the gradients.

    Velocities are allocated lazily on the first step and always mirror the
    parameter shapes.
    """

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocities: list[tuple[np.ndarray, np.ndarray]] | None = field(default=None)

    def __post_init__(self):
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0.0:
            raise ValidationError(f"learning rate must be positive, got {self.learning_rate!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum!r}")
        if self.weight_decay < 0.0:
            raise ValidationError(f"weight decay must be >= 0, got {self.weight_decay!r}")


def sgd_step(model: MlpModel, grads, state: SgdState) -> MlpModel:
    """In-place update: g <- grad + wd*p; v <- mu*v + g; p <- p - lr*v."""
    if len(grads) != model.n_layers:
        raise DimensionError("gradient list length does not match model layers")
    if state.velocities is None:
        state.velocities = [
            (np.zeros_like(w), np.zeros_like(b)) for w, b in zip(model.weights, model.biases)
        ]
    for l, (dw, db) in enumerate(grads):
        w, b = model.weights[l], model.biases[l]
        if dw.shape != w.shape or db.shape != b.shape:
            raise DimensionError(f"gradient shapes at layer {l} do not match parameters")
        vw, vb = state.velocities[l]
        vw *= state.momentum
        vw += dw + state.weight_decay * w
        vb *= state.momentum
        vb += db + state.weight_decay * b
        w -= state.learning_rate * vw
        b -= state.learning_rate * vb
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise NumericError(f"non-finite parameters after update in layer {l}")
    return model


CHECKPOINT_MAGIC = "mlp-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: MlpModel, path) -> None:
    """Text checkpoint with hex floats; round-trips bitwise."""
    model.check_shapes()
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        "layer_sizes " + " ".join(str(s) for s in model.layer_sizes),
        f"activation {model.activation}",
    ]
    for l in range(model.n_layers):
        w, b = model.weights[l], model.biases[l]
        lines.append(f"tensor w{l} {w.shape[0]} {w.shape[1]}")
        for row in w:
            lines.append(" ".join(v.hex() for v in row))
        lines.append(f"tensor b{l} {b.shape[0]}")
        lines.append(" ".join(v.hex() for v in b))
    lines.append("end")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> MlpModel:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    try:
        magic, version = lines[0].split()
        if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint header {lines[0]!r}")
        if not lines[1].startswith("layer_sizes "):
            raise ValidationError("missing layer_sizes line")
        sizes = tuple(int(s) for s in lines[1].split()[1:])
        activation = lines[2].split()[1]
        pos = 3
        weights, biases = [], []
        for l in range(len(sizes) - 1):
            head = lines[pos].split()
            if head[:2] != ["tensor", f"w{l}"]:
                raise ValidationError(f"expected tensor w{l} at line {pos + 1}")
            rows, cols = int(head[2]), int(head[3])
            pos += 1
            w = np.empty((rows, cols))
            for r in range(rows):
                w[r] = [float.fromhex(tok) for tok in lines[pos].split()]
                pos += 1
            head = lines[pos].split()
            if head[:2] != ["tensor", f"b{l}"]:
                raise ValidationError(f"expected tensor b{l} at line {pos + 1}")
            n = int(head[2])
            pos += 1
            b = np.array([float.fromhex(tok) for tok in lines[pos].split()])
            if b.shape != (n,):
                raise ValidationError(f"bias b{l} has wrong length")
            pos += 1
            weights.append(w)
            biases.append(b)
        if lines[pos] != "end":
            raise ValidationError("missing end marker")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed checkpoint file {path}: {exc}") from exc
    model = MlpModel(layer_sizes=sizes, weights=weights, biases=biases, activation=activation)
    model.check_shapes()
    return model
