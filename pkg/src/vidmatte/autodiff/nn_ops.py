"""Differentiable kernels used by the matting network."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, as_tensor, note_kinks


def softmax(x, axis=-1):
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of bounds for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply ``gamma * xhat + beta``.

    The divisor is ``sqrt(max(var, eps))``: rows with real spread come out with
    exactly unit variance, and a constant row normalizes to zero.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine params {gamma.shape}/{beta.shape} do not match channels {c}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    active = var >= eps
    rstd = 1.0 / np.sqrt(np.maximum(var, eps))
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            # the variance term drops out where the eps floor is active
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - active * xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor._result(out, (x, gamma, beta), backward)


def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation on NHWC input with an (kh, kw, cin, cout) kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects x[N,H,W,C] and w[kh,kw,cin,cout], got {x.shape} and {w.shape}")
    n, h, wd_, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d input channels {cin} do not match kernel {w.shape}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd_, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d of {x.shape} with kernel {kh}x{kw}, stride {stride}, "
                         f"padding {padding} has no output positions")
    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    wdat = w.data
    out = np.zeros((n, ho, wo, cout))
    windows = []
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
            windows.append((i, j, patch))
            out += patch @ wdat[i, j]
    if b is not None:
        out += b.data

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i, j, _ in windows:
                gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += g @ wdat[i, j].T
            gx = gxp[:, p:p + h, p:p + wd_, :] if p else gxp
        if w.requires_grad:
            g2 = g.reshape(-1, cout)
            gw = np.empty_like(wdat)
            for i, j, patch in windows:
                gw[i, j] = patch.reshape(-1, cin).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, backward)


def sample_levels(value, level_shapes, level_offsets, points):
    """Bilinearly sample a multi-level, multi-head value table.

    ``value`` is (T, L, M, d): per frame, the concatenation of row-major
    flattened levels, split into M heads. ``points`` is (T, Q, M, nL, K, 2)
    holding (row, col) positions in the pixel coordinates of the level each
    point belongs to (integers are pixel centres). Positions outside the
    level contribute zeros. Returns (T, Q, M, nL, K, d).
    """
    if value.ndim != 4 or points.ndim != 6 or points.shape[-1] != 2:
        raise ShapeError(f"sample_levels expects value[T,L,M,d] and points[T,Q,M,nL,K,2], "
                         f"got {value.shape} and {points.shape}")
    t_, l_, m_, d_ = value.shape
    _, q_, pm, nl, k_, _ = points.shape
    if points.shape[0] != t_ or pm != m_ or nl != len(level_shapes):
        raise ShapeError(f"points {points.shape} inconsistent with value {value.shape} "
                         f"and {len(level_shapes)} levels")
    table = value.data.reshape(t_ * l_ * m_, d_)
    pts = points.data
    py, px = pts[..., 0], pts[..., 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly, lx = py - y0, px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    note_kinks(y0)
    note_kinks(x0)

    hs = np.array([s[0] for s in level_shapes], dtype=np.int64).reshape(1, 1, 1, nl, 1)
    ws = np.array([s[1] for s in level_shapes], dtype=np.int64).reshape(1, 1, 1, nl, 1)
    offs = np.array(level_offsets, dtype=np.int64).reshape(1, 1, 1, nl, 1)
    tt = np.arange(t_).reshape(t_, 1, 1, 1, 1)
    mm = np.arange(m_).reshape(1, 1, m_, 1, 1)

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            valid = (yy >= 0) & (yy < hs) & (xx >= 0) & (xx < ws)
            pos = offs + np.clip(yy, 0, hs - 1) * ws + np.clip(xx, 0, ws - 1)
            idx = ((tt * l_ + pos) * m_ + mm)
            wy = ly if dy else 1.0 - ly
            wx = lx if dx else 1.0 - lx
            weight = np.where(valid, wy * wx, 0.0)
            # d weight / d row, d weight / d col
            dwy = np.where(valid, (1.0 if dy else -1.0) * wx, 0.0)
            dwx = np.where(valid, (1.0 if dx else -1.0) * wy, 0.0)
            corners.append((idx.reshape(-1), weight.reshape(-1), dwy, dwx))

    n_samples = t_ * q_ * m_ * nl * k_
    out = np.zeros((n_samples, d_))
    gathered = []
    for idx, weight, _, _ in corners:
        v = table[idx]
        gathered.append(v)
        out += weight[:, None] * v
    out = out.reshape(t_, q_, m_, nl, k_, d_)

    def backward(g):
        g2 = g.reshape(n_samples, d_)
        gv = gp = None
        if value.requires_grad:
            rows = np.concatenate([c[0] for c in corners])
            cols = np.tile(np.arange(n_samples), 4)
            vals = np.concatenate([c[1] for c in corners])
            scatter = sp.csr_matrix((vals, (rows, cols)), shape=(table.shape[0], n_samples))
            gv = np.asarray(scatter @ g2).reshape(value.shape)
        if points.requires_grad:
            gy = np.zeros(n_samples)
            gx = np.zeros(n_samples)
            for (_, _, dwy, dwx), v in zip(corners, gathered):
                proj = (v * g2).sum(axis=1)
                gy += dwy.reshape(-1) * proj
                gx += dwx.reshape(-1) * proj
            gp = np.stack([gy, gx], axis=-1).reshape(points.shape)
        return gv, gp

    return Tensor._result(out, (value, points), backward)


def bilinear_sample(x, points):
    """Sample an (H, W, C) map at (P, 2) continuous (row, col) positions."""
    if x.ndim != 3 or points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"bilinear_sample expects x[H,W,C] and points[P,2], got {x.shape} and {points.shape}")
    h, w, c = x.shape
    p = points.shape[0]
    value = x.reshape(1, h * w, 1, c)
    pts = points.reshape(1, p, 1, 1, 1, 2)
    return sample_levels(value, [(h, w)], [0], pts).reshape(p, c)


def interpolation_matrix(n_in, n_out):
    """Row-stochastic (n_out, n_in) linear-interpolation matrix, half-pixel centres."""
    mat = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize of (N, H, W, C) with align_corners=False semantics."""
    if x.ndim != 4:
        raise ShapeError(f"resize_bilinear expects x[N,H,W,C], got {x.shape}")
    _, h, w, _ = x.shape
    rh = interpolation_matrix(h, out_h)
    rw = interpolation_matrix(w, out_w)
    out = np.einsum("ah,nhwc,bw->nabc", rh, x.data, rw, optimize=True)

    def backward(g):
        return (np.einsum("ah,nabc,bw->nhwc", rh, g, rw, optimize=True),)

    return Tensor._result(out, (x,), backward)


def upsample2x(x):
    return resize_bilinear(x, 2 * x.shape[1], 2 * x.shape[2])
