"""Scikit-learn style facade over the core modules.

EarlyExitClassifier owns the whole pipeline: standardization, an internal
train/validation split, network construction, joint or frozen training, and
gated prediction at the configured threshold. The heavy lifting lives in the
framework-free modules; this class only adapts them to the fit/predict
convention so the model composes with sklearn tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .errors import DataError
from .gating import GateConfig, decide, evaluate_rows
from .graph import build
from .harness import default_network_spec, derive_seeds
from .training import TrainConfig, train


class EarlyExitClassifier(BaseEstimator, ClassifierMixin):
    """Backbone classifier with a confidence-gated early exit.

    Parameters
    ----------
    hidden_units : sidenet hidden layer width.
    theta : confidence threshold for exiting at the sidenet during predict.
    alpha : weight of the sidenet loss in joint training.
    mode : "joint" or "frozen".
    width : backbone hidden width.
    val_fraction : share of the fit data held out (stratified) for the
        plateau scheduler's validation loss.
    """

    def __init__(
        self,
        hidden_units: int = 32,
        theta: float = 0.9,
        alpha: float = 1.0,
        mode: str = "joint",
        epochs: int = 30,
        batch_size: int = 64,
        lr: float = 0.003,
        width: int = 64,
        val_fraction: float = 0.15,
        seed: int = 0,
    ):
        self.hidden_units = hidden_units
        self.theta = theta
        self.alpha = alpha
        self.mode = mode
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.width = width
        self.val_fraction = val_fraction
        self.seed = seed

    def _stratified_split(self, y_enc: np.ndarray, rng) -> tuple:
        """Per-class holdout so both parts keep every class."""
        val_idx = []
        for c in np.unique(y_enc):
            idx = np.flatnonzero(y_enc == c)
            if len(idx) < 2:
                raise DataError(f"class {c} needs at least 2 examples to fit")
            idx = rng.permutation(idx)
            k = min(len(idx) - 1, max(1, int(round(self.val_fraction * len(idx)))))
            val_idx.append(idx[:k])
        val_idx = np.concatenate(val_idx)
        mask = np.zeros(len(y_enc), dtype=bool)
        mask[val_idx] = True
        return np.flatnonzero(~mask), np.flatnonzero(mask)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if not 0.0 < self.val_fraction < 1.0:
            raise DataError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        n_classes = len(self.classes_)
        if n_classes < 2:
            raise DataError("need at least 2 classes")
        self.n_features_in_ = X.shape[1]

        seeds = derive_seeds(self.seed)
        rng = np.random.default_rng(seeds["split"])
        train_idx, val_idx = self._stratified_split(y_enc, rng)

        self.mean_ = X[train_idx].mean(axis=0)
        std = X[train_idx].std(axis=0)
        self.std_ = np.where(std == 0.0, 1.0, std)
        Xs = (X - self.mean_) / self.std_

        spec = default_network_spec(
            dim=self.n_features_in_,
            num_classes=n_classes,
            width=self.width,
            hidden_units=self.hidden_units,
        )
        self.model_ = build(spec, seeds["build"])
        cfg = TrainConfig(
            mode=self.mode,
            alpha=self.alpha,
            lr_init=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=seeds["shuffle"],
        )
        self.train_log_ = train(
            self.model_,
            Dataset(Xs[train_idx], y_enc[train_idx].astype(np.int64), n_classes),
            Dataset(Xs[val_idx], y_enc[val_idx].astype(np.int64), n_classes),
            cfg,
        )
        return self

    def _gated_results(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DataError(
                f"X has {X.shape[1]} features, fit saw {self.n_features_in_}"
            )
        Xs = (X - self.mean_) / self.std_
        gate = GateConfig(theta=self.theta)
        return [decide(self.model_, h, gate) for h in evaluate_rows(self.model_, Xs)], Xs

    def predict(self, X):
        results, _ = self._gated_results(X)
        return self.classes_[np.array([r.predicted_class for r in results])]

    def predict_proba(self, X):
        """Probability rows from whichever head answered each input."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise DataError(
                f"X has {X.shape[1]} features, fit saw {self.n_features_in_}"
            )
        Xs = (X - self.mean_) / self.std_
        gate = GateConfig(theta=self.theta)
        rows = []
        for heads in evaluate_rows(self.model_, Xs):
            fired = None
            for j, probs_row, conf in zip(heads.side_js, heads.side_probs, heads.side_confs):
                if conf >= gate.theta:
                    fired = probs_row
                    break
            rows.append(fired if fired is not None else heads.main_probs)
        return np.vstack(rows)

    def inference_details(self, X):
        """Per-input gated results: source, confidence, parameters used."""
        results, _ = self._gated_results(X)
        return results
