"""Input validation for clips and mattes."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def _as_4d(x, name):
    arr = check_array(x, ensure_2d=False, allow_nd=True, dtype=np.float64,
                      ensure_all_finite=True, input_name=name)
    if arr.ndim != 4:
        raise ValueError(f"{name} must be 4-D (T, H, W, C), got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError(f"{name} needs at least one frame")
    return arr


def check_clip(x, name="clip"):
    """Return ``x`` as a float64 (T, H, W, 3) array with values in [0, 1]."""
    arr = _as_4d(x, name)
    if arr.shape[-1] != 3:
        raise ValueError(f"{name} must have 3 channels, got shape {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_alpha(x, name="alpha"):
    """Return ``x`` as a float64 (T, H, W, 1) array with values in [0, 1].

    A 3-D (T, H, W) array gets a trailing channel axis.
    """
    arr = np.asarray(x)
    if arr.ndim == 3:
        arr = arr[..., None]
    arr = _as_4d(arr, name)
    if arr.shape[-1] != 1:
        raise ValueError(f"{name} must have 1 channel, got shape {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_same_geometry(a, b, names=("prediction", "ground truth")):
    if np.shape(a)[:3] != np.shape(b)[:3]:
        raise ValueError(f"{names[0]} shape {np.shape(a)} does not match {names[1]} shape {np.shape(b)}")


def check_pair(p, g):
    """Validate a predicted/ground-truth matte pair of equal shape."""
    p = check_alpha(p, "prediction")
    g = check_alpha(g, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth shape {g.shape}")
    return p, g


def check_divisible(h, w, factor=16):
    if h % factor or w % factor:
        raise ValueError(f"frame size {h}x{w} must be divisible by {factor}")
