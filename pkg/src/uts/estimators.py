"""Scikit-learn style classifier over 32x32 RGB tiles."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .classes import CLASS_NAMES
from .lvit import AblationConfig, load_checkpoint, predict_proba, save_checkpoint
from .tiling import TILE_SIZE
from .train import TrainConfig, train_epochs


def check_tiles(X, tile_size: int = TILE_SIZE) -> np.ndarray:
    """Validate an ``(N, k, k, 3)`` stack of tiles scaled to ``[0, 1]``."""
    x = np.asarray(X, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (tile_size, tile_size, 3):
        raise ValueError(f"expected tiles of shape (N, {tile_size}, {tile_size}, 3), got {x.shape}")
    if len(x) == 0:
        raise ValueError("no tiles given")
    if not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
        raise ValueError("tile values must be finite and within [0, 1]")
    return x


class LViTClassifier(ClassifierMixin, BaseEstimator):
    """Tile classifier trained with mini-batch SGD.

    ``ablation`` picks one of ``backbone``, ``vtm``, ``vtm_datse`` or ``all``.
    """

    def __init__(self, ablation: str = "all", linear_attention: bool = False, epochs: int = 30,
                 batch_size: int = 64, learning_rate: float = 0.05, random_state: int = 0):
        self.ablation = ablation
        self.linear_attention = linear_attention
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.epochs, self.learning_rate, self.random_state,
                           self.ablation, self.linear_attention)

    def fit(self, X, y, eval_set=None):
        x = check_tiles(X)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if len(y) != len(x):
            raise ValueError(f"{len(x)} tiles but {len(y)} labels")
        val = None
        if eval_set is not None:
            val = (check_tiles(eval_set[0]), np.asarray(eval_set[1], dtype=np.int64))
        result = train_epochs(x, y, self._train_config(), val=val)
        self.params_ = result.params
        self.config_ = result.config
        self.loss_curve_ = result.loss_curve
        self.classes_ = np.arange(len(CLASS_NAMES))
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return predict_proba(check_tiles(X), self.params_, self.config_)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        save_checkpoint(path, self.params_, self.config_)

    @classmethod
    def from_checkpoint(cls, path) -> "LViTClassifier":
        params, config = load_checkpoint(path)
        ablation = config.label if config.label != "custom" else "all"
        est = cls(ablation=ablation, linear_attention=config.linear_attention)
        est.params_, est.config_ = params, config
        est.classes_ = np.arange(len(CLASS_NAMES))
        est.loss_curve_ = []
        return est


__all__ = ["LViTClassifier", "check_tiles", "AblationConfig"]
