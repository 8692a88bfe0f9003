"""scikit-learn compatible wrapper around the autoencoder-classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import DimensionError
from .model import ModelConfig, build_model, encode, forward_train
from .tensor import Tensor, softmax
from .training import TrainConfig, predict_logits, train


class FGRNetClassifier(ClassifierMixin, BaseEstimator):
    """Joint reconstruction + classification network on (N, 3, H, W) images.

    Labels may be any hashable values; they are mapped to ``0..k-1`` in
    sorted order and exposed as ``classes_``.
    """

    def __init__(self, preset: str = "desk", rec_loss: str = "mse", alpha: float = 0.5,
                 learning_rate: float = 1e-3, batch_size: int = 2, epochs: int = 15,
                 lr_decay_gamma: float | None = None, augment: bool = True, balance: bool = True,
                 validation_fraction: float = 0.2, seed: int = 0):
        self.preset = preset
        self.rec_loss = rec_loss
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr_decay_gamma = lr_decay_gamma
        self.augment = augment
        self.balance = balance
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _check_images(self, X, fitting: bool = False) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
        if X.ndim != 4:
            raise DimensionError(f"expected (N, C, H, W) images, got rank {X.ndim}", axis="rank")
        if not fitting:
            cfg = self.params_.config
            if X.shape[1] != cfg.in_channels:
                raise DimensionError(f"expected {cfg.in_channels} channels, got {X.shape[1]}", axis="channel")
            if X.shape[2:] != (cfg.input_size, cfg.input_size):
                raise DimensionError(f"expected {cfg.input_size}x{cfg.input_size} images, got {X.shape[2:]}",
                                     axis="height")
        return X

    def fit(self, X, y):
        X = self._check_images(X, fitting=True)
        y = np.asarray(y)
        if len(y) != len(X):
            raise DimensionError(f"{len(X)} images but {len(y)} labels", axis="batch")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        config = ModelConfig.from_preset(self.preset, num_classes=len(self.classes_),
                                         input_size=X.shape[2], in_channels=X.shape[1])
        tc = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
                         alpha=self.alpha, rec_loss=self.rec_loss, lr_decay_gamma=self.lr_decay_gamma,
                         augment=self.augment, balance=self.balance,
                         validation_fraction=self.validation_fraction, seed=self.seed)
        self.params_, self.history_ = train(build_model(config, self.seed), X, encoded, tc)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return predict_logits(self.params_, self._check_images(X))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(Tensor(self.decision_function(X).astype(np.float64))).data

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        """Globally average-pooled bottleneck features, shape (N, channels)."""
        check_is_fitted(self, "params_")
        X = self._check_images(X)
        frozen = self.params_.frozen()
        feats = [encode(frozen, X[s:s + 32])[0].data.mean(axis=(2, 3)) for s in range(0, len(X), 32)]
        return np.concatenate(feats)

    def reconstruct(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = self._check_images(X)
        frozen = self.params_.frozen()
        return np.concatenate([forward_train(frozen, X[s:s + 16])[0].data for s in range(0, len(X), 16)])
