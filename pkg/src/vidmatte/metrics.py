"""Alpha-matte evaluation metrics, reported at the conventional scales.

MAD and MSE are means over all pixels and frames (x1e3). Grad and Conn are
per-frame pixel sums averaged over frames (x1e-3). dtSSD is the per-pair RMS
of the frame-difference mismatch averaged over pairs (x1e2).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .validation import check_pair

SCALES = {"mad": 1e3, "mse": 1e3, "grad": 1e-3, "conn": 1e-3, "dtssd": 1e2}
KEYS = tuple(SCALES)
GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_MIN_DROP = 0.15


@dataclass
class MetricReport:
    mad: float
    mse: float
    grad: float
    conn: float
    dtssd: float
    per_frame: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def csv_row(self, clip_id):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([clip_id] + [repr(getattr(self, k)) for k in KEYS])
        return buf.getvalue()


def _frames(x):
    return x[..., 0]


def mad(p, g):
    p, g = check_pair(p, g)
    return float(np.abs(p - g).mean() * SCALES["mad"])


def mse(p, g):
    p, g = check_pair(p, g)
    return float(((p - g) ** 2).mean() * SCALES["mse"])


def gaussian_derivative_kernels(sigma=GRAD_SIGMA):
    """First-order Gaussian derivative kernels (along rows, along cols), unit L2 norm.

    Support is truncated at 3 sigma.
    """
    half = int(np.ceil(3 * sigma))
    x = np.arange(-half, half + 1, dtype=np.float64)
    gauss = np.exp(-x ** 2 / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))
    dgauss = -x * gauss / sigma ** 2
    ky = np.outer(dgauss, gauss)
    ky /= np.sqrt((ky ** 2).sum())
    return ky, ky.T.copy()


def gradient_magnitude(frame, sigma=GRAD_SIGMA):
    ky, kx = gaussian_derivative_kernels(sigma)
    gy = ndimage.correlate(frame, ky, mode="nearest")
    gx = ndimage.correlate(frame, kx, mode="nearest")
    return np.sqrt(gy ** 2 + gx ** 2)


def grad_error(p, g, sigma=GRAD_SIGMA):
    p, g = check_pair(p, g)
    min_size = 7
    if p.shape[1] < min_size or p.shape[2] < min_size:
        raise ValueError(f"gradient error needs frames of at least {min_size}x{min_size}, got {p.shape[1:3]}")
    errs = [((gradient_magnitude(pf, sigma) - gradient_magnitude(gf, sigma)) ** 2).sum()
            for pf, gf in zip(_frames(p), _frames(g))]
    return float(np.mean(errs) * SCALES["grad"])


_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _largest_component(mask):
    labels, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.reshape(-1))[1:]
    # ties resolve to the lowest label, i.e. the first component in raster order
    return labels == (int(np.argmax(sizes)) + 1)


def connectivity_levels(p, g, step=CONN_STEP):
    """Per pixel, the highest threshold whose shared largest 4-connected component contains it."""
    level = np.zeros_like(p)
    for k in range(1, int(round(1.0 / step))):
        theta = round(k * step, 12)
        omega = _largest_component((p >= theta) & (g >= theta))
        level[omega] = theta
    return level


def _phi(a, level):
    d = a - level
    return np.where(d >= CONN_MIN_DROP, 1.0 - d, 1.0)


def conn_error(p, g, step=CONN_STEP):
    p, g = check_pair(p, g)
    errs = []
    for pf, gf in zip(_frames(p), _frames(g)):
        level = connectivity_levels(pf, gf, step)
        errs.append(np.abs(_phi(pf, level) - _phi(gf, level)).sum())
    return float(np.mean(errs) * SCALES["conn"])


def dtssd_pairs(p, g):
    resid = (p[1:] - p[:-1]) - (g[1:] - g[:-1])
    return np.sqrt((resid ** 2).reshape(resid.shape[0], -1).mean(axis=1))


def dtssd(p, g):
    p, g = check_pair(p, g)
    if p.shape[0] < 2:
        raise ValueError("dtSSD needs at least two frames")
    return float(dtssd_pairs(p, g).mean() * SCALES["dtssd"])


def evaluate_clip(p, g, per_frame=True):
    """All five metrics for one clip, plus an optional per-frame breakdown."""
    p, g = check_pair(p, g)
    report = MetricReport(mad(p, g), mse(p, g), grad_error(p, g), conn_error(p, g), dtssd(p, g))
    if per_frame:
        pairs = dtssd_pairs(p, g) * SCALES["dtssd"]
        for t in range(p.shape[0]):
            pt, gt = p[t:t + 1], g[t:t + 1]
            report.per_frame.append({
                "frame": t,
                "mad": mad(pt, gt),
                "mse": mse(pt, gt),
                "grad": grad_error(pt, gt),
                "conn": conn_error(pt, gt),
                "dtssd": float(pairs[t - 1]) if t > 0 else 0.0,
            })
    return report


def aggregate(reports):
    """Unweighted mean of per-clip metrics."""
    if not reports:
        raise ValueError("no reports to aggregate")
    return MetricReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in KEYS})
