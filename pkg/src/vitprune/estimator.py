"""Scikit-learn compatible estimators wrapping the transformer pipeline.

``VisionTransformerClassifier`` fits the gated transformer on image data
(optionally with the L1 gate penalty). ``PrunedVisionTransformerClassifier``
runs the full compress cycle inside ``fit``: baseline training, sparsity
training, global-threshold slicing at ``prune_rate``, and fine-tuning.
Both follow the estimator protocol (``fit``/``predict``/``score``,
``get_params``/``set_params``), so they compose with model selection
utilities; inputs may be (n, c, h, w) arrays or flattened 2-d rows.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .cost import build_cost_report, count_params
from .data import Dataset, ImageSplit
from .errors import DimensionError
from .model import ModelConfig, forward, init_model
from .pruning import apply_plan, build_plan
from .tensor import no_grad
from .train import TrainConfig, evaluate, train


def _as_image_array(X, image_size: int | None, in_channels: int | None):
    """Coerce X to (n, c, h, w) float64, inferring geometry when needed."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4:
        return np.ascontiguousarray(X)
    if X.ndim == 2:
        if image_size is None or in_channels is None:
            raise DimensionError(
                "2-d input needs explicit image_size and in_channels to be "
                "reshaped into images")
        expected = in_channels * image_size * image_size
        if X.shape[1] != expected:
            raise DimensionError(
                f"2-d input has {X.shape[1]} features; expected "
                f"{expected} = {in_channels}*{image_size}*{image_size}")
        return np.ascontiguousarray(
            X.reshape(X.shape[0], in_channels, image_size, image_size))
    raise DimensionError(f"expected 2-d or 4-d input, got {X.ndim}-d")


class _ImageClassifierBase(BaseEstimator, ClassifierMixin):
    """Shared data preparation and prediction plumbing."""

    def _prepare(self, X, y):
        images = _as_image_array(X, self.image_size, self.in_channels)
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != images.shape[0]:
            raise DimensionError(
                f"labels shape {y.shape} does not match {images.shape[0]} samples")
        if images.shape[0] == 0:
            raise DimensionError("cannot fit on an empty dataset")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.in_channels_ = images.shape[1]
        self.image_size_ = images.shape[2]
        mean = images.mean(axis=(0, 2, 3), keepdims=True)
        std = images.std(axis=(0, 2, 3), keepdims=True)
        std = np.where(std < 1e-12, 1.0, std)
        self.channel_mean_ = mean.reshape(-1)
        self.channel_std_ = std.reshape(-1)
        normed = (images - mean) / std
        train_split = ImageSplit(normed, encoded.astype(np.int64))
        eval_split = self._holdout(train_split)
        return Dataset(train=train_split, eval=eval_split,
                       channel_mean=self.channel_mean_,
                       channel_std=self.channel_std_)

    def _holdout(self, split: ImageSplit) -> ImageSplit:
        """Deterministic per-class sample used only for progress metrics."""
        rng = np.random.default_rng(self.random_state)
        picks = []
        for label in range(len(self.classes_)):
            rows = np.flatnonzero(split.labels == label)
            take = max(1, min(len(rows), 16))
            picks.append(rng.permutation(rows)[:take])
        idx = np.sort(np.concatenate(picks))
        return ImageSplit(split.images[idx], split.labels[idx])

    def _model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size_,
                           patch_size=self.patch_size,
                           in_channels=self.in_channels_,
                           embed_dim=self.embed_dim,
                           num_layers=self.num_layers,
                           num_heads=self.num_heads,
                           mlp_ratio=self.mlp_ratio,
                           num_classes=len(self.classes_))

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        images = _as_image_array(X, self.image_size_, self.in_channels_)
        if images.shape[1:] != (self.in_channels_, self.image_size_,
                                self.image_size_):
            raise DimensionError(
                f"input geometry {images.shape[1:]} does not match the fitted "
                f"model ({self.in_channels_}, {self.image_size_}, "
                f"{self.image_size_})")
        normed = (images - self.channel_mean_.reshape(1, -1, 1, 1)) \
            / self.channel_std_.reshape(1, -1, 1, 1)
        logits = []
        with no_grad():
            for start in range(0, normed.shape[0], 256):
                logits.append(forward(self.model_,
                                      normed[start:start + 256]).data)
        return np.concatenate(logits, axis=0)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)


class VisionTransformerClassifier(_ImageClassifierBase):
    """Gated vision transformer trained as a plain classifier.

    Set ``l1_lambda`` > 0 to add the gate-sparsity penalty during fit
    (the fitted model keeps its real-valued gates either way).
    """

    def __init__(self, patch_size=4, embed_dim=64, num_layers=4, num_heads=4,
                 mlp_ratio=4, image_size=None, in_channels=None, epochs=10,
                 batch_size=64, base_lr=1e-3, min_lr=1e-5, weight_decay=0.05,
                 l1_lambda=0.0, eval_every=1000, random_state=0):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.image_size = image_size
        self.in_channels = in_channels
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.weight_decay = weight_decay
        self.l1_lambda = l1_lambda
        self.eval_every = eval_every
        self.random_state = random_state

    def fit(self, X, y):
        dataset = self._prepare(X, y)
        stage = "sparsity" if self.l1_lambda > 0 else "baseline"
        cfg = TrainConfig(stage=stage, epochs=self.epochs,
                          batch_size=self.batch_size, base_lr=self.base_lr,
                          min_lr=self.min_lr, weight_decay=self.weight_decay,
                          l1_lambda=self.l1_lambda, seed=self.random_state,
                          eval_every=self.eval_every)
        model = init_model(self._model_config(), self.random_state)
        self.model_, self.history_ = train(model, dataset, cfg)
        self.n_params_ = count_params(self.model_)
        return self


class PrunedVisionTransformerClassifier(_ImageClassifierBase):
    """Full compress cycle in one fit: train, sparsify, slice, fine-tune.

    After ``fit`` the wrapped model is hard-pruned at ``prune_rate`` and
    ``cost_report_`` holds the parameter/FLOP accounting.
    """

    def __init__(self, patch_size=4, embed_dim=64, num_layers=4, num_heads=4,
                 mlp_ratio=4, image_size=None, in_channels=None,
                 baseline_epochs=10, sparsity_epochs=10, finetune_epochs=5,
                 batch_size=64, base_lr=1e-3, min_lr=1e-5, weight_decay=0.05,
                 l1_lambda=1e-2, prune_rate=0.4, finetune_lr_scale=0.1,
                 eval_every=1000, random_state=0):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.image_size = image_size
        self.in_channels = in_channels
        self.baseline_epochs = baseline_epochs
        self.sparsity_epochs = sparsity_epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.min_lr = min_lr
        self.weight_decay = weight_decay
        self.l1_lambda = l1_lambda
        self.prune_rate = prune_rate
        self.finetune_lr_scale = finetune_lr_scale
        self.eval_every = eval_every
        self.random_state = random_state

    def fit(self, X, y):
        dataset = self._prepare(X, y)
        common = dict(batch_size=self.batch_size, base_lr=self.base_lr,
                      min_lr=self.min_lr, weight_decay=self.weight_decay,
                      seed=self.random_state, eval_every=self.eval_every)
        model = init_model(self._model_config(), self.random_state)
        model, history = train(model, dataset, TrainConfig(
            stage="baseline", epochs=self.baseline_epochs, **common))
        self.baseline_acc_ = evaluate(model, dataset.eval)
        model, records = train(model, dataset, TrainConfig(
            stage="sparsity", epochs=self.sparsity_epochs,
            l1_lambda=self.l1_lambda, **common))
        history += records
        self.plan_ = build_plan(model, self.prune_rate)
        gate_params = sum(g.scores.data.size for g in model.gate_vectors())
        model = apply_plan(model, self.plan_)
        self.cost_report_ = build_cost_report(self._model_config(), self.plan_,
                                              gate_params_removed=gate_params)
        finetune = dict(common, base_lr=self.base_lr * self.finetune_lr_scale,
                        min_lr=min(self.min_lr,
                                   self.base_lr * self.finetune_lr_scale))
        model, records = train(model, dataset, TrainConfig(
            stage="finetune", epochs=self.finetune_epochs, **finetune))
        history += records
        self.model_ = model
        self.history_ = history
        self.final_acc_ = evaluate(model, dataset.eval)
        return self
