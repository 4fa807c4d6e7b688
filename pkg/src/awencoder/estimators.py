"""scikit-learn style wrappers around the functional pipeline.

Inputs may be flat ``(n, H*W*C)`` rows or ``(n, H, W, C)`` images; flat
rows are reshaped with ``image_shape``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .contrastive import ContrastiveConfig, pretrain
from .models import MLP, ProbeConfig, predict_labels, train_linear_probe
from .watermark import EmbedConfig, PGDConfig, embed_watermark, generate_watermark


def _images(X, image_shape) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim == 2:
        if int(np.prod(image_shape)) != X.shape[1]:
            raise ValueError(f"expected {int(np.prod(image_shape))} features for images of shape "
                             f"{tuple(image_shape)}, got {X.shape[1]}")
        return X.reshape(len(X), *image_shape)
    if X.shape[1:] != tuple(image_shape):
        raise ValueError(f"expected images of shape {tuple(image_shape)}, got {X.shape[1:]}")
    return X


def _flat(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64)
    return X.reshape(len(X), -1)


def _encoder_of(obj) -> MLP:
    if isinstance(obj, MLP):
        return obj
    check_is_fitted(obj, "model_")
    return obj.model_.encoder


class ContrastiveEncoder(TransformerMixin, BaseEstimator):
    """Self-supervised encoder; ``transform`` returns embeddings."""

    def __init__(self, algorithm="simclr", epochs=50, batch_size=50, learning_rate=0.003,
                 temperature=None, hidden_dims=(256, 128), embed_dim=32,
                 image_shape=(16, 16, 3), random_state=0):
        self.algorithm = algorithm
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.temperature = temperature
        self.hidden_dims = hidden_dims
        self.embed_dim = embed_dim
        self.image_shape = image_shape
        self.random_state = random_state

    def _config(self) -> ContrastiveConfig:
        return ContrastiveConfig(algorithm=self.algorithm, temperature=self.temperature,
                                 batch_size=self.batch_size, epochs=self.epochs,
                                 learning_rate=self.learning_rate, hidden_dims=tuple(self.hidden_dims),
                                 embed_dim=self.embed_dim)

    def fit(self, X, y=None):
        images = _images(X, self.image_shape)
        self.model_ = pretrain(images, self._config(), int(self.random_state))
        self.history_ = list(self.model_.history)
        self.n_features_in_ = int(np.prod(self.image_shape))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.encoder.predict_array(_flat(X))


class ProbeClassifier(ClassifierMixin, BaseEstimator):
    """Linear probe on the frozen embeddings of ``encoder``."""

    def __init__(self, encoder=None, learning_rate=0.05, epochs=200, random_state=0):
        self.encoder = encoder
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        self.encoder_ = _encoder_of(self.encoder)
        cfg = ProbeConfig(len(self.classes_), self.learning_rate, self.epochs, int(self.random_state))
        self.probe_ = train_linear_probe(self.encoder_, X.reshape(len(X), -1), codes, cfg)
        self.n_features_in_ = self.encoder_.input_dim
        return self

    def predict(self, X):
        check_is_fitted(self, "probe_")
        return self.classes_[predict_labels(self.encoder_, self.probe_, _flat(X))]


class WatermarkGenerator(TransformerMixin, BaseEstimator):
    """PGD watermark toward ``key_image``; ``transform`` stamps images with it."""

    def __init__(self, encoder=None, key_image=None, epsilon=15 / 255, steps=200, step_size=None,
                 n_generation=500, image_shape=(16, 16, 3), random_state=0):
        self.encoder = encoder
        self.key_image = key_image
        self.epsilon = epsilon
        self.steps = steps
        self.step_size = step_size
        self.n_generation = n_generation
        self.image_shape = image_shape
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.key_image is None:
            raise ValueError("key_image is required")
        X = _flat(X)
        cfg = PGDConfig(self.steps, self.step_size, self.n_generation)
        self.watermark_ = generate_watermark(_encoder_of(self.encoder), X, self.key_image, self.epsilon,
                                             cfg, int(self.random_state), tuple(self.image_shape))
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "watermark_")
        return self.watermark_.apply(_flat(X))


class WatermarkEmbedder(TransformerMixin, BaseEstimator):
    """Fine-tunes a fitted :class:`ContrastiveEncoder` under the joint loss."""

    def __init__(self, base=None, watermark=None, alpha=40.0, epochs=50, learning_rate=0.003,
                 batch_size=None, random_state=0):
        self.base = base
        self.watermark = watermark
        self.alpha = alpha
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y=None):
        check_is_fitted(self.base, "model_")
        wm = self.watermark.watermark_ if isinstance(self.watermark, WatermarkGenerator) else self.watermark
        if wm is None:
            raise ValueError("watermark is required")
        images = _images(X, self.base.image_shape)
        cfg = EmbedConfig(self.alpha, self.epochs, self.learning_rate, self.batch_size)
        self.model_ = embed_watermark(self.base.model_, images, wm, cfg, self.base._config(),
                                      int(self.random_state))
        self.history_ = list(self.model_.history)
        self.n_features_in_ = images[0].size
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.encoder.predict_array(_flat(X))
