"""Alpha prediction from the finest fused feature map and the decoded queries."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tensor, matmul, reshape, sigmoid, upsample2x
from .synthcomp import FormatError, read_header
from .validation import check_alpha

MAGIC = b"VMKA"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class MattePrediction:
    logits: Tensor  # (T, H/2, W/2, 1)
    alpha: Tensor  # (T, H, W, 1)


def project_queries(features, queries):
    """Per-frame dot product of every pixel feature with that frame's query.

    ``features`` (T, h, w, C) and ``queries`` (T, C) give logits (T, h, w, 1).
    """
    t_, h, w, c = features.shape
    if queries.shape != (t_, c):
        raise ShapeError(f"queries {queries.shape} do not match features {features.shape}")
    flat = reshape(features, (t_, h * w, c))
    return reshape(matmul(flat, reshape(queries, (t_, c, 1))), (t_, h, w, 1))


def predict(features, queries):
    logits = project_queries(features, queries)
    return MattePrediction(logits, upsample2x(sigmoid(logits)))


def save_alpha(alpha, path):
    """Write a (T, H, W, 1) matte as a VMKA container of little-endian float32."""
    alpha = check_alpha(alpha)
    t_, h, w, _ = alpha.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, t_, h, w))
        fh.write(np.ascontiguousarray(alpha, dtype="<f4").tobytes())


def load_alpha(path):
    buf = Path(path).read_bytes()
    t_, h, w = read_header(buf, MAGIC, path)
    n = t_ * h * w
    if len(buf) != _HEADER.size + 4 * n:
        raise FormatError(f"{path}: expected {_HEADER.size + 4 * n} bytes, found {len(buf)}")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).astype(np.float64)
    return arr.reshape(t_, h, w, 1)
