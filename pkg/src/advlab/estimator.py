"""Scikit-learn style front end: an adversarially trained MLP classifier.

The estimator hides the lab plumbing behind fit/predict/predict_proba and
composes with sklearn pipelines and model selection (get_params/set_params
come from BaseEstimator). Features are min-max scaled into the unit box at
fit time because the attacks operate there; epsilon and the attack step size
are therefore expressed in scaled units.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attacks import AttackSpec
from .datasets import Dataset, one_hot, split
from .errors import ValidationError
from .evaluation import eval_natural, eval_robust
from .interpolation import parse_lambda_policy
from .nn import forward, init_model, softmax
from .trainers import TrainSpec, algorithm_family, run_training


class RobustMLPClassifier(ClassifierMixin, BaseEstimator):
    """MLP classifier trained on adversarial variants of the data.

    Parameters
    ----------
    algorithm:
        One of at, at_mixup, at_gif, trades, trades_gif, gairat, gairat_gif,
        fastat, fastat_gif. The *_gif variants interpolate pairs drawn from
        the previous epoch's attackable samples; at_mixup interpolates
        arbitrary pairs.
    hidden_layer_sizes:
        Hidden widths; input and output sizes come from the data.
    epsilon, attack_step_size, attack_steps:
        Perturbation budget, per-step size, and step count of the training
        attack, in min-max scaled feature units.
    interp_lambda:
        Interpolation weight policy: a float for a fixed weight, "uniform",
        or "beta(a,b)".
    validation_fraction:
        Held out (stratified) for per-epoch metrics and best-checkpoint
        selection; 0 evaluates on the training split instead.
    """

    def __init__(
        self,
        algorithm: str = "at",
        hidden_layer_sizes=(10, 10, 5),
        activation: str = "relu",
        epochs: int = 20,
        batch_size: int = 64,
        interp_batch_size: int = 0,
        batches_per_epoch=None,
        epsilon: float = 8 / 255,
        attack_step_size: float = 2 / 255,
        attack_steps: int = 10,
        interp_lambda=0.5,
        burn_in_epochs: int = 0,
        learning_rate: float = 0.1,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        lr_milestones=(0.5, 0.75),
        lr_decay: float = 0.1,
        trades_beta: float = 6.0,
        trades_gamma: float = 1e-3,
        validation_fraction: float = 0.0,
        use_best_checkpoint: bool = True,
        parallel_workers: int = 1,
        random_state: int = 0,
    ):
        self.algorithm = algorithm
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.interp_batch_size = interp_batch_size
        self.batches_per_epoch = batches_per_epoch
        self.epsilon = epsilon
        self.attack_step_size = attack_step_size
        self.attack_steps = attack_steps
        self.interp_lambda = interp_lambda
        self.burn_in_epochs = burn_in_epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_milestones = lr_milestones
        self.lr_decay = lr_decay
        self.trades_beta = trades_beta
        self.trades_gamma = trades_gamma
        self.validation_fraction = validation_fraction
        self.use_best_checkpoint = use_best_checkpoint
        self.parallel_workers = parallel_workers
        self.random_state = random_state

    def _train_attack(self) -> AttackSpec:
        family = algorithm_family(self.algorithm)
        if family == "trades":
            return AttackSpec(
                epsilon=self.epsilon,
                alpha=self.attack_step_size,
                steps=self.attack_steps,
                init="gaussian",
                loss="kl_vs_natural",
                gaussian_scale=self.trades_gamma,
            )
        if family == "fastat":
            return AttackSpec(
                epsilon=self.epsilon,
                alpha=self.attack_step_size,
                steps=1,
                init="uniform",
                loss="ce",
            )
        return AttackSpec(
            epsilon=self.epsilon,
            alpha=self.attack_step_size,
            steps=self.attack_steps,
            init="natural",
            loss="ce",
        )

    def _scale(self, X: np.ndarray) -> np.ndarray:
        safe = np.where(self.scale_range_ > 0.0, self.scale_range_, 1.0)
        scaled = (X - self.scale_min_) / safe
        scaled = np.where(self.scale_range_ > 0.0, scaled, 0.0)
        return np.clip(scaled, 0.0, 1.0)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValidationError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        self.scale_min_ = X.min(axis=0)
        self.scale_range_ = X.max(axis=0) - self.scale_min_

        data = Dataset(
            features=self._scale(X), labels=one_hot(y_idx, self.classes_.shape[0])
        )
        seed = 0 if self.random_state is None else int(self.random_state)
        if self.validation_fraction and self.validation_fraction > 0.0:
            train_ds, eval_ds = split(data, float(self.validation_fraction), seed=seed)
        else:
            train_ds, eval_ds = data, None

        spec = TrainSpec(
            algorithm=self.algorithm,
            epochs=int(self.epochs),
            batch_size=min(int(self.batch_size), max(1, train_ds.n - int(self.interp_batch_size))),
            interp_batch_size=int(self.interp_batch_size),
            batches_per_epoch=self.batches_per_epoch,
            attack=self._train_attack(),
            lambda_policy=parse_lambda_policy(self.interp_lambda),
            burn_in_epochs=int(self.burn_in_epochs),
            learning_rate=float(self.learning_rate),
            momentum=float(self.momentum),
            weight_decay=float(self.weight_decay),
            lr_milestones=tuple(float(f) for f in self.lr_milestones),
            lr_decay=float(self.lr_decay),
            trades_beta=float(self.trades_beta),
            parallel_workers=int(self.parallel_workers),
            seed=seed,
        )
        model = init_model(
            [train_ds.feature_dim, *[int(h) for h in self.hidden_layer_sizes], train_ds.n_classes],
            activation=self.activation,
            seed=seed,
        )
        result = run_training(model, spec, train_ds, eval_ds)
        self.final_model_ = result.final_model
        self.best_model_ = result.best_model
        self.best_epoch_ = result.best_epoch
        self.history_ = result.metrics
        self.model_ = (
            result.best_model if (self.use_best_checkpoint and eval_ds is not None) else result.final_model
        )
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValidationError(
                f"X has {X.shape[1]} features, fit saw {self.n_features_in_}"
            )
        return forward(self.model_, self._scale(X))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def robust_score(self, X, y, attack: AttackSpec | None = None) -> float:
        """Accuracy after attacking each point with the training attack (or a
        given spec) in scaled feature space; natural starts keep this
        deterministic."""
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=np.float64)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= self.classes_.shape[0]) or np.any(self.classes_[idx] != y):
            raise ValidationError("y contains labels unseen at fit time")
        data = Dataset(features=self._scale(X), labels=one_hot(idx, self.classes_.shape[0]))
        if attack is None:
            base = self._train_attack()
            attack = AttackSpec(
                epsilon=base.epsilon, alpha=base.alpha, steps=base.steps, init="natural", loss="ce"
            )
        return eval_robust(self.model_, data, attack)

    def natural_score(self, X, y) -> float:
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y, dtype=np.float64)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= self.classes_.shape[0]) or np.any(self.classes_[idx] != y):
            raise ValidationError("y contains labels unseen at fit time")
        data = Dataset(features=self._scale(X), labels=one_hot(idx, self.classes_.shape[0]))
        return eval_natural(self.model_, data)
