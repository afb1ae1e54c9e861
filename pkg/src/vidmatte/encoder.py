"""Transformer encoder over per-frame token sequences, temporal fusion and FPN."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import (
    MLP,
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    add,
    concat,
    mul,
    reshape,
    sample_levels,
    softmax,
    upsample2x,
)
from .backbone import FeatureSequences, unflatten


@dataclass
class EncoderOutput:
    sequences: FeatureSequences
    fused_pyramid: list


@lru_cache(maxsize=64)
def _sine_embedding(h, w, dim, temperature=10000.0):
    if dim % 4:
        raise ValueError(f"positional embedding width must be divisible by 4, got {dim}")
    half = dim // 2
    ys = (np.arange(h) + 0.5) / h * 2 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2 * np.pi
    freqs = temperature ** (2 * (np.arange(half) // 2) / half)
    ey = ys[:, None] / freqs
    ex = xs[:, None] / freqs
    ey = np.where(np.arange(half) % 2 == 0, np.sin(ey), np.cos(ey))
    ex = np.where(np.arange(half) % 2 == 0, np.sin(ex), np.cos(ex))
    emb = np.concatenate([np.repeat(ey[:, None, :], w, axis=1),
                          np.repeat(ex[None, :, :], h, axis=0)], axis=-1)
    emb = emb.reshape(h * w, dim)
    emb.setflags(write=False)
    return emb


def sine_embedding(h, w, dim):
    """Fixed 2D sinusoidal embedding of an h x w grid, shape (h*w, dim)."""
    return _sine_embedding(int(h), int(w), int(dim))


def reference_points(level_shapes):
    """Normalized (row, col) cell centres of every token, shape (L, 2)."""
    pts = []
    for h, w in level_shapes:
        yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        pts.append(np.stack([yy.reshape(-1), xx.reshape(-1)], axis=-1))
    return np.concatenate(pts, axis=0)


class DeformableAttention(Module):
    """Multi-scale deformable attention.

    Each query predicts, per head, ``n_levels * n_points`` offsets (in pixels
    of the target level) around its reference point and a softmax over those
    points; the output is the weighted sum of bilinearly sampled values.
    Offsets and weights start at zero, so the initial attention is a uniform
    average at the reference points.
    """

    def __init__(self, rng, dim, n_heads, n_levels, n_points):
        if dim % n_heads:
            raise ValueError(f"dim {dim} is not divisible by n_heads {n_heads}")
        self.dim, self.n_heads, self.n_levels, self.n_points = dim, n_heads, n_levels, n_points
        self.value_proj = Linear(rng, dim, dim)
        self.offset_head = Linear(rng, dim, n_heads * n_levels * n_points * 2, zero=True)
        self.weight_head = Linear(rng, dim, n_heads * n_levels * n_points, zero=True)
        self.out_proj = Linear(rng, dim, dim)

    def __call__(self, query, value_input, refs, level_shapes, level_offsets, return_weights=False):
        """``query`` (T, Q, C), ``value_input`` (T, L, C), ``refs`` (T|1, Q, 2) normalized.

        ``refs`` may be an array (fixed) or a Tensor (learned).
        """
        t_, q_, c = query.shape
        m, nl, k = self.n_heads, len(level_shapes), self.n_points
        if nl != self.n_levels:
            raise ValueError(f"attention built for {self.n_levels} levels, got {nl}")
        d = c // m
        value = reshape(self.value_proj(value_input), (t_, value_input.shape[1], m, d))
        offsets = reshape(self.offset_head(query), (t_, q_, m, nl, k, 2))
        logits = reshape(self.weight_head(query), (t_, q_, m, nl * k))
        weights = reshape(softmax(logits, axis=-1), (t_, q_, m, nl, k, 1))

        sizes = np.array(level_shapes, dtype=np.float64).reshape(1, 1, 1, nl, 1, 2)
        if isinstance(refs, Tensor):
            r = reshape(refs, (refs.shape[0], q_, 1, 1, 1, 2))
            base = add(mul(r, sizes), -0.5)
        else:
            r = np.asarray(refs, dtype=np.float64).reshape(-1, q_, 1, 1, 1, 2)
            base = Tensor(r * sizes - 0.5)
        points = add(base, offsets)
        samples = sample_levels(value, level_shapes, level_offsets, points)
        out = (samples * weights).sum(axis=(3, 4))
        out = self.out_proj(reshape(out, (t_, q_, c)))
        if return_weights:
            return out, weights
        return out


def deformable_self_attention(x, attn, pos=None, return_weights=False):
    """Self-attention of a FeatureSequences over its own levels."""
    query = x.data if pos is None else add(x.data, pos)
    refs = reference_points(x.level_shapes)[None]
    res = attn(query, x.data, refs, x.level_shapes, x.level_offsets, return_weights=return_weights)
    if return_weights:
        return x.with_data(res[0]), res[1]
    return x.with_data(res)


class EncoderBlock(Module):
    def __init__(self, rng, dim, n_heads, n_levels, n_points, mlp_ratio=4):
        self.attn = DeformableAttention(rng, dim, n_heads, n_levels, n_points)
        self.norm1 = LayerNorm(dim)
        self.mlp = MLP(rng, dim, mlp_ratio * dim)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x, pos=None):
        return encoder_block(x, self, pos)


def encoder_block(x, block, pos=None):
    """Residual deformable self-attention then residual MLP, each followed by LayerNorm."""
    sa = deformable_self_attention(x, block.attn, pos).data
    h = block.norm1(add(sa, x.data))
    out = block.norm2(add(block.mlp(h), h))
    return x.with_data(out)


class SFTM(Module):
    """Short-range temporal fusion: a 3x3 conv over each level summed with the previous frame."""

    def __init__(self, rng, dim, n_levels):
        self.convs = [Conv2d(rng, dim, dim, k=3, stride=1, padding=1, gain=1.0) for _ in range(n_levels)]

    def __call__(self, levels):
        return sftm(levels, self)


def previous_frames(level):
    """Shift a (T, h, w, C) map one frame back in time; the first frame pairs with itself."""
    if level.shape[0] == 1:
        return level
    return concat([level[0:1], level[:-1]], axis=0)


def sftm(levels, module):
    return [conv(add(lv, previous_frames(lv))) for conv, lv in zip(module.convs, levels)]


class FPN(Module):
    """Top-down fusion: ``out_i = in_i + up2x(conv1x1(out_{i+1}))``, coarsest level passed through."""

    def __init__(self, rng, dim, n_levels):
        self.laterals = [Conv2d(rng, dim, dim, k=1, padding=0, gain=1.0) for _ in range(n_levels - 1)]

    def __call__(self, levels):
        return fpn_fuse(levels, self)


def fpn_fuse(levels, module):
    n = len(levels)
    fused = [None] * n
    fused[-1] = levels[-1]
    for i in range(n - 2, -1, -1):
        fused[i] = add(levels[i], upsample2x(module.laterals[i](fused[i + 1])))
    return fused


class Encoder(Module):
    def __init__(self, rng, dim=32, n_heads=2, n_levels=4, n_points=2, n_blocks=1, sftm_enabled=True):
        self.dim = dim
        # independent streams: toggling SFTM leaves the other initial weights unchanged
        block_rng, embed_rng, sftm_rng, fpn_rng = rng.spawn(4)
        self.blocks = [EncoderBlock(r, dim, n_heads, n_levels, n_points) for r in block_rng.spawn(n_blocks)]
        self.level_embed = Parameter(embed_rng.normal(0.0, 0.02, size=(n_levels, dim)))
        self.sftm = SFTM(sftm_rng, dim, n_levels) if sftm_enabled else None
        self.fpn = FPN(fpn_rng, dim, n_levels)

    def position_embedding(self, level_shapes):
        parts = []
        for i, (h, w) in enumerate(level_shapes):
            parts.append(add(Tensor(sine_embedding(h, w, self.dim)), self.level_embed[i:i + 1]))
        return parts[0] if len(parts) == 1 else concat(parts, axis=0)

    def __call__(self, seq):
        pos = self.position_embedding(seq.level_shapes)
        x = seq
        for block in self.blocks:
            x = block(x, pos)
        levels = unflatten(x)
        if self.sftm is not None:
            levels = self.sftm(levels)
        return EncoderOutput(x, self.fpn(levels))
