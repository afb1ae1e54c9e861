"""scikit-learn style wrapper around training and windowed inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import mad
from .synthcomp import CompositeSample
from .trainer import TrainConfig, infer, train_samples
from .validation import check_alpha, check_clip


def _as_clips(X, name):
    """Accept one (T, H, W, C) clip or a sequence of them."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        return [X]
    clips = list(X)
    if not clips:
        raise ValueError(f"{name} is empty")
    return clips


class VideoMatter(BaseEstimator):
    """Trimap-free video matting estimator.

    ``fit(X, y)`` takes composited clips ``X`` (T, H, W, 3) and their alpha
    mattes ``y`` (T, H, W, 1); ``predict`` returns mattes of the same length.
    Without separate foreground and background planes, augmentation
    recomposites the clip with itself, which resizes and flips consistently.
    """

    def __init__(self, epochs=5, lr_backbone=2e-5, lr_other=2e-4, weight_decay=1e-4,
                 decay_epochs=(3, 4), window=5, augment=True, sftm_enabled=True,
                 lqtm_enabled=True, cross_attention="deformable", dim=32, n_heads=2,
                 n_points=2, n_enc=1, n_dec=1, lam=5.0, grad_clip=1.0, seed=0):
        self.epochs = epochs
        self.lr_backbone = lr_backbone
        self.lr_other = lr_other
        self.weight_decay = weight_decay
        self.decay_epochs = decay_epochs
        self.window = window
        self.augment = augment
        self.sftm_enabled = sftm_enabled
        self.lqtm_enabled = lqtm_enabled
        self.cross_attention = cross_attention
        self.dim = dim
        self.n_heads = n_heads
        self.n_points = n_points
        self.n_enc = n_enc
        self.n_dec = n_dec
        self.lam = lam
        self.grad_clip = grad_clip
        self.seed = seed

    def train_config(self):
        return TrainConfig(**self.get_params())

    def fit(self, X, y):
        clips = [check_clip(c, "X") for c in _as_clips(X, "X")]
        alphas = [check_alpha(a, "y") for a in _as_clips(y, "y")]
        if len(clips) != len(alphas):
            raise ValueError(f"{len(clips)} clips but {len(alphas)} mattes")
        samples = []
        for i, (c, a) in enumerate(zip(clips, alphas)):
            if c.shape[:3] != a.shape[:3]:
                raise ValueError(f"clip {i}: geometry {c.shape[:3]} != matte {a.shape[:3]}")
            samples.append(CompositeSample(c, c, a, c, seed=i))
        result = train_samples(samples, self.train_config())
        self.checkpoint_ = result.checkpoint
        self.network_ = result.checkpoint.network()
        self.log_ = result.log
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        single = isinstance(X, np.ndarray) and X.ndim == 4
        outs = [infer(self.network_, check_clip(c, "X"), self.window) for c in _as_clips(X, "X")]
        return outs[0] if single else outs

    def transform(self, X):
        return self.predict(X)

    def score(self, X, y):
        """Negative mean MAD (scaled by 1e3); larger is better."""
        preds = self.predict(X)
        if isinstance(preds, np.ndarray):
            preds = [preds]
        alphas = [check_alpha(a, "y") for a in _as_clips(y, "y")]
        return -float(np.mean([mad(p, g) for p, g in zip(preds, alphas)]))
