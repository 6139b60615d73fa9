"""scikit-learn style wrappers: a classifier around MiniHViT training and a
transformer that turns images into per-ROI attribution scores."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .atlas import RoiAtlas, aggregate_roi
from .exceptions import ConfigError, ShapeError
from .explain import ShapleyConfig, grad_cam_maps, saliency_maps, shap_values
from .losses import DistillConfig
from .model import MiniHViT, ModelConfig
from .training import AugmentConfig, TrainConfig, train


def check_images(X, channels=None, size=None):
    """Coerce to float64 (n, C, H, W); a (n, H, W) stack gains a channel axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ShapeError(f"expected images of shape (n, C, H, W), got {X.shape}")
    if len(X) == 0:
        raise ShapeError("no images given")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    if channels is not None and X.shape[1] != channels:
        raise ShapeError(f"expected {channels} channels, got {X.shape[1]}")
    if size is not None and X.shape[2:] != (size, size):
        raise ShapeError(f"expected {size}x{size} images, got {X.shape[2]}x{X.shape[3]}")
    return X


def check_labels(y, n):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    return y


class MiniHViTClassifier(ClassifierMixin, BaseEstimator):
    """Fit a MiniHViT on an image stack; labels may be any hashable values."""

    def __init__(self, patch_size=8, stage_embed_dims=(32, 64), stage_depths=(1, 1),
                 heads_per_stage=(2, 4), mlp_ratio=2.0, capture_stage=-1,
                 optimizer="adamw", learning_rate=3e-4, weight_decay=1e-4,
                 schedule="multistep", step_interval=10, step_factor=0.1, epochs=25,
                 batch_size=32, validation_fraction=0.2, class_weighting=True,
                 colour_variation=False, contrast=False, sharpen=False,
                 alpha=0.5, temperature=1.0, random_state=0):
        self.patch_size = patch_size
        self.stage_embed_dims = stage_embed_dims
        self.stage_depths = stage_depths
        self.heads_per_stage = heads_per_stage
        self.mlp_ratio = mlp_ratio
        self.capture_stage = capture_stage
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.step_interval = step_interval
        self.step_factor = step_factor
        self.epochs = epochs
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.class_weighting = class_weighting
        self.colour_variation = colour_variation
        self.contrast = contrast
        self.sharpen = sharpen
        self.alpha = alpha
        self.temperature = temperature
        self.random_state = random_state

    def _model_config(self, X, n_classes):
        return ModelConfig(
            image_size=X.shape[2], channels=X.shape[1], patch_size=self.patch_size,
            stage_embed_dims=self.stage_embed_dims, stage_depths=self.stage_depths,
            heads_per_stage=self.heads_per_stage, mlp_ratio=self.mlp_ratio,
            num_classes=n_classes, seed=self.random_state, capture_stage=self.capture_stage,
        )

    def _train_config(self, distill):
        return TrainConfig(
            optimizer=self.optimizer, learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, schedule=self.schedule,
            step_interval=self.step_interval, step_factor=self.step_factor,
            epochs=self.epochs, batch_size=self.batch_size, seed=self.random_state,
            validation_fraction=self.validation_fraction,
            class_weighting=self.class_weighting,
            augment=AugmentConfig(sharpen=self.sharpen, colour_variation=self.colour_variation,
                                  contrast=self.contrast),
            distill=DistillConfig(self.alpha, self.temperature) if distill else None,
        )

    def fit(self, X, y, teacher=None, X_val=None, y_val=None):
        """Train from scratch. ``teacher`` may be a fitted classifier or a bare
        MiniHViT; it switches on the composite distillation loss."""
        X = check_images(X)
        y = check_labels(y, len(X))
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigError("need at least two classes to fit")
        if isinstance(teacher, MiniHViTClassifier):
            check_is_fitted(teacher)
            teacher = teacher.model_
        model = MiniHViT(self._model_config(X, len(self.classes_)))
        if X_val is not None:
            X_val = check_images(X_val, X.shape[1], X.shape[2])
            y_val = np.searchsorted(self.classes_, check_labels(y_val, len(X_val)))
        self.model_, self.history_ = train(model, X, y_idx, self._train_config(teacher is not None),
                                           teacher=teacher, val_images=X_val, val_labels=y_val)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _checked(self, X):
        check_is_fitted(self)
        cfg = self.model_.config
        return check_images(X, cfg.channels, cfg.image_size)

    def decision_function(self, X):
        logits = self.model_.logits(self._checked(X))
        return logits[:, 1] - logits[:, 0] if logits.shape[1] == 2 else logits

    def predict_proba(self, X):
        return self.model_.predict_proba(self._checked(X))

    def predict(self, X):
        X = self._checked(X)
        return self.classes_[np.argmax(self.model_.logits(X), axis=1)]


class RoiAttribution(TransformerMixin, BaseEstimator):
    """Map images to per-ROI attribution scores for one method.

    ``fit`` records the dataset-mean baseline used by the Shapley engine.
    ``transform`` returns an (n, n_rois) matrix in ``atlas.roi_ids`` order:
    mean |attribution| for saliency and Grad-CAM, signed phi for shap.
    """

    def __init__(self, model, atlas: RoiAtlas, method="saliency", target_class=None,
                 shapley_mode="sampled", sample_budget=None, random_state=0):
        self.model = model
        self.atlas = atlas
        self.method = method
        self.target_class = target_class
        self.shapley_mode = shapley_mode
        self.sample_budget = sample_budget
        self.random_state = random_state

    def _net(self):
        return self.model.model_ if isinstance(self.model, MiniHViTClassifier) else self.model

    def fit(self, X, y=None):
        if self.method not in ("saliency", "gradcam", "shap"):
            raise ConfigError(f"unknown method {self.method!r}")
        X = check_images(X)
        self.baseline_ = X.mean(axis=0)
        self.roi_ids_ = self.atlas.roi_ids.copy()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_images(X, self.baseline_.shape[0], self.baseline_.shape[1])
        net = self._net()
        if self.method == "shap":
            cfg = ShapleyConfig(mode=self.shapley_mode, sample_budget=self.sample_budget,
                                seed=self.random_state)
            rows = [shap_values(net, x, self.atlas, cfg, baseline_image=self.baseline_,
                                target_class=self.target_class).phi for x in X]
            return np.array(rows)
        engine = saliency_maps if self.method == "saliency" else grad_cam_maps
        maps = engine(net, X, self.target_class)[0]
        return np.array([aggregate_roi(m, self.atlas).means for m in maps])

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self)
        return np.array([f"{self.method}_{self.atlas.name(r)}" for r in self.roi_ids_], dtype=object)
