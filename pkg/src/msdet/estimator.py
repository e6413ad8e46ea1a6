"""scikit-learn style wrapper around training, prediction and AP scoring.

``X`` packs an image pair per sample as ``[n, S, S, 4]`` uint8 (visible
RGB in channels 0..2, infrared in channel 3); use :func:`stack_pair` to
build it. ``y`` is a sequence of ``[k, 5]`` rows ``(class, cx, cy, w, h)``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ContractError, DimensionError
from .harness.config import RunConfig
from .harness.evaluate import evaluate
from .harness.train import SplitArrays, Trainer, predict
from .matchloss import GroundTruth, LossWeights
from .msattn import ModelConfig


def stack_pair(visible, infrared) -> np.ndarray:
    """``[n,S,S,3]`` + ``[n,S,S]`` uint8 images -> ``[n,S,S,4]``."""
    vis = np.asarray(visible)
    ir = np.asarray(infrared)
    if vis.ndim != 4 or vis.shape[-1] != 3 or ir.shape != vis.shape[:3]:
        raise DimensionError(f"expected [n,S,S,3] and [n,S,S], got {vis.shape} and {ir.shape}")
    return np.concatenate([vis, ir[..., None]], axis=-1)


def check_pairs(X) -> tuple:
    """Validate a packed pair array; returns ``(visible, infrared)`` views."""
    X = np.asarray(X)
    if X.ndim != 4 or X.shape[-1] != 4:
        raise DimensionError(f"X must be [n, S, S, 4] (visible RGB + infrared), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X holds no samples")
    if X.dtype != np.uint8:
        if not np.issubdtype(X.dtype, np.number) or X.min() < 0 or X.max() > 255:
            raise ValueError("X must hold uint8-range pixel values")
        X = X.astype(np.uint8)
    return X[..., :3], X[..., 3]


def check_targets(y, n: int, num_classes: int) -> list:
    """Validate annotations for ``n`` samples; returns :class:`GroundTruth` objects."""
    if len(y) != n:
        raise ValueError(f"{len(y)} annotation sets for {n} samples")
    gts = [GroundTruth.from_rows(np.asarray(rows, dtype=np.float64).reshape(-1, 5)) for rows in y]
    for g in gts:
        if len(g) and int(g.labels.max()) >= num_classes:
            raise ContractError(f"class id {int(g.labels.max())} outside [0, {num_classes})")
    return gts


class MultispectralDetector(BaseEstimator):
    """Visible/infrared detection transformer with the usual fit/predict/score."""

    def __init__(self, channels=32, heads=2, points=4, levels=3, layers=3, queries=60, num_classes=4,
                 modalities=("visible", "infrared"), mcqs=True, mdca=True, cqs=True, epochs=30,
                 batch_size=8, lr=1e-3, lr_drop_epoch=24, dn_groups=1, seed=0):
        self.channels = channels
        self.heads = heads
        self.points = points
        self.levels = levels
        self.layers = layers
        self.queries = queries
        self.num_classes = num_classes
        self.modalities = modalities
        self.mcqs = mcqs
        self.mdca = mdca
        self.cqs = cqs
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_drop_epoch = lr_drop_epoch
        self.dn_groups = dn_groups
        self.seed = seed

    def _run_config(self) -> RunConfig:
        model = ModelConfig(channels=self.channels, heads=self.heads, points=self.points,
                            levels=self.levels, layers=self.layers, queries=self.queries,
                            num_classes=self.num_classes, modalities=tuple(self.modalities),
                            mcqs=self.mcqs, mdca=self.mdca, cqs=self.cqs)
        return RunConfig(model=model, loss=LossWeights(), seed=self.seed, epochs=self.epochs,
                         batch_size=self.batch_size, lr=self.lr, lr_drop_epoch=self.lr_drop_epoch,
                         dn_groups=self.dn_groups).validate()

    def fit(self, X, y):
        cfg = self._run_config()
        vis, ir = check_pairs(X)
        data = SplitArrays(vis, ir, check_targets(y, len(vis), cfg.model.num_classes))
        trainer = Trainer(cfg, data)
        self.log_ = trainer.run()
        self.net_ = trainer.net
        self.n_steps_ = trainer.step
        return self

    def predict(self, X) -> list:
        """Per sample ``[N, 6]`` rows ``(label, score, cx, cy, w, h)``."""
        check_is_fitted(self, "net_")
        vis, ir = check_pairs(X)
        dets = predict(self.net_, vis, ir)
        return [np.column_stack([d.labels, d.scores, d.boxes]) for d in dets]

    def score(self, X, y) -> float:
        """AP50 over the given samples."""
        check_is_fitted(self, "net_")
        vis, ir = check_pairs(X)
        gts = check_targets(y, len(vis), self.num_classes)
        return evaluate(predict(self.net_, vis, ir), gts, self.num_classes).ap50
