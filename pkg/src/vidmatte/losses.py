"""Training objective: weighted focal + dice + temporal-consistency loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, clip, log, sqrt


@dataclass
class LossConfig:
    lam: float = 5.0
    alpha_f: float = 0.25
    gamma: float = 2.0
    eps: float = 1e-6

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"focal weight must be positive, got {self.lam}")
        if not 0 < self.alpha_f < 1:
            raise ValueError(f"focal balance must lie in (0, 1), got {self.alpha_f}")
        if self.gamma < 0:
            raise ValueError(f"focal exponent must be >= 0, got {self.gamma}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")


@dataclass
class LossReport:
    total: Tensor
    focal: Tensor
    dice: Tensor
    temporal: Tensor

    def as_dict(self):
        return {k: float(getattr(self, k).data) for k in ("total", "focal", "dice", "temporal")}


def _pair(p, g):
    p = as_tensor(p)
    g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match target shape {g.shape}")
    return p, g


def focal_loss(p, g, cfg=None):
    """Soft-target focal loss, averaged over every pixel of every frame.

    Per pixel: ``-a*g*(1-p)^y*log(p) - (1-a)*(1-g)*p^y*log(1-p)``; with a hard
    positive target only the first term remains.
    """
    cfg = cfg or LossConfig()
    p, g = _pair(p, g)
    pc = clip(p, cfg.eps, 1.0 - cfg.eps)
    q = 1.0 - pc
    pos = (q ** cfg.gamma) * log(pc) * (cfg.alpha_f * g)
    neg = (pc ** cfg.gamma) * log(q) * ((1.0 - cfg.alpha_f) * (1.0 - g))
    return -(pos + neg).mean()


def dice_loss(p, g, eps=1e-6):
    """``1 - 2*sum(pg) / (sum(p^2) + sum(g^2) + eps)`` per frame, averaged over frames."""
    p, g = _pair(p, g)
    axes = tuple(range(1, p.ndim))
    inter = (p * g).sum(axis=axes)
    denom = (p * p).sum(axis=axes) + (g * g).sum(axis=axes) + eps
    return (1.0 - 2.0 * inter / denom).mean()


def temporal_loss(p, g):
    """RMS mismatch of forward frame differences, per frame pair, averaged over pairs."""
    p, g = _pair(p, g)
    if p.shape[0] < 2:
        return Tensor(0.0)
    resid = (p[1:] - p[:-1]) - (g[1:] - g[:-1])
    axes = tuple(range(1, p.ndim))
    return sqrt((resid * resid).mean(axis=axes)).mean()


def total_loss(p, g, cfg=None):
    cfg = cfg or LossConfig()
    focal = focal_loss(p, g, cfg)
    dice = dice_loss(p, g, cfg.eps)
    tmp = temporal_loss(p, g)
    return LossReport(focal * cfg.lam + dice + tmp, focal, dice, tmp)
