"""Estimator facade with ``fit`` / ``predict`` / ``score`` and input validation."""
from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .detect import Detection
from .train import ToyDataset, TrainConfig, eval_ap, predict, toy_model, train_toy


def check_images(X) -> np.ndarray:
    """Accept (n, h, w, 3) uint8 images whose sides are multiples of 32."""
    arr = np.asarray(X)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"images must have shape (n, h, w, 3), got {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("floating images must lie in [0, 255]")
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    if arr.shape[1] != arr.shape[2] or arr.shape[1] % 32:
        raise ValueError(f"images must be square with sides divisible by 32, got {arr.shape[1:3]}")
    if not len(arr):
        raise ValueError("at least one image is required")
    return arr


def check_targets(y, n_images: int, num_classes: int, image_size: int) -> List[np.ndarray]:
    """Per-image ``(k, 5)`` arrays of ``class, cx, cy, w, h`` in pixels."""
    if len(y) != n_images:
        raise ValueError(f"{len(y)} target arrays for {n_images} images")
    out = []
    for i, t in enumerate(y):
        t = np.asarray(t, dtype=np.float64).reshape(-1, 5)
        if np.any(t[:, 0] < 0) or np.any(t[:, 0] >= num_classes) or np.any(t[:, 0] % 1):
            raise ValueError(f"image {i}: class ids must be integers in [0, {num_classes})")
        if np.any(t[:, 3:] <= 0):
            raise ValueError(f"image {i}: box sizes must be positive")
        if np.any(t[:, 1:3] < 0) or np.any(t[:, 1:3] > image_size):
            raise ValueError(f"image {i}: box centres must lie inside the image")
        out.append(t)
    return out


class YogaDetector(BaseEstimator):
    """Micro-scale YOGA detector trained with the toy harness."""

    def __init__(self, profile: str = "micro", num_classes: int = 3, epochs: int = 100,
                 batch_size: int = 16, label_smoothing: float = 0.1,
                 conf_threshold: float = 0.25, iou_threshold: float = 0.45, seed: int = 0):
        self.profile = profile
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.label_smoothing = label_smoothing
        self.conf_threshold = conf_threshold
        self.iou_threshold = iou_threshold
        self.seed = seed

    def _dataset(self, X, y, prefix="img") -> ToyDataset:
        X = check_images(X)
        y = check_targets(y, len(X), self.num_classes, X.shape[1])
        return ToyDataset(X, y, [f"{prefix}{i:05d}" for i in range(len(X))], self.num_classes)

    def fit(self, X, y, eval_set: Optional[tuple] = None):
        train = self._dataset(X, y)
        val = self._dataset(*eval_set, prefix="val") if eval_set is not None else train
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                          label_smoothing=self.label_smoothing, seed=self.seed)
        self.model_ = toy_model(self.num_classes, train.image_size, self.seed, self.profile)
        self.report_ = train_toy(self.model_, train, val, cfg)
        self.image_size_ = train.image_size
        return self

    def predict(self, X, conf_threshold: Optional[float] = None) -> List[List[Detection]]:
        check_is_fitted(self, "model_")
        X = check_images(X)
        if X.shape[1] != self.image_size_:
            raise ValueError(f"model was fitted on {self.image_size_}px images")
        conf = self.conf_threshold if conf_threshold is None else conf_threshold
        return predict(self.model_, X, self.model_.graph.anchors, conf, self.iou_threshold)

    def score(self, X, y) -> float:
        """AP@0.5 averaged over classes."""
        ds = self._dataset(X, y)
        dets = self.predict(ds.images, conf_threshold=0.001)
        flat = [Detection(d.class_id, d.score, d.box, iid)
                for iid, ds_i in zip(ds.ids, dets) for d in ds_i]
        return eval_ap(flat, ds.gts(), 0.5)
