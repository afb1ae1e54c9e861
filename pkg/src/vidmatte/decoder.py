"""Query branch: one learnable query per frame, refined against that frame's tokens.

Each decoder block runs query self-attention, per-frame cross-attention and,
optionally, long-range temporal aggregation (LQTM): a softmax over frames of
a linear score of each frame's cross-attention output, whose weighted sum is
added back to every query.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    MLP,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    Tensor,
    add,
    matmul,
    reshape,
    sigmoid,
    softmax,
    transpose,
)
from .encoder import DeformableAttention


@dataclass
class QuerySet:
    queries: Tensor
    positional_embedding: Tensor

    def __post_init__(self):
        if self.queries.shape != self.positional_embedding.shape:
            raise ValueError(f"queries {self.queries.shape} and positional embedding "
                             f"{self.positional_embedding.shape} differ")

    @property
    def n_frames(self):
        return self.queries.shape[0]


class MultiHeadAttention(Module):
    """Dense scaled dot-product attention over a short token axis."""

    def __init__(self, rng, dim, n_heads):
        if dim % n_heads:
            raise ValueError(f"dim {dim} is not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.q_proj = Linear(rng, dim, dim)
        # a key bias shifts every score of a query equally, so softmax ignores it
        self.k_proj = Linear(rng, dim, dim, bias=False)
        self.v_proj = Linear(rng, dim, dim)
        self.out_proj = Linear(rng, dim, dim)

    def heads(self, x):
        # (..., N, C) -> (..., M, N, d)
        *lead, n, c = x.shape
        m = self.n_heads
        x = reshape(x, tuple(lead) + (n, m, c // m))
        nd = len(lead)
        axes = tuple(range(nd)) + (nd + 1, nd, nd + 2)
        return transpose(x, axes)

    def merge(self, x):
        *lead, m, n, d = x.shape
        nd = len(lead)
        axes = tuple(range(nd)) + (nd + 1, nd, nd + 2)
        return reshape(transpose(x, axes), tuple(lead) + (n, m * d))

    def __call__(self, q_in, k_in, v_in, return_weights=False):
        q = self.heads(self.q_proj(q_in))
        k = self.heads(self.k_proj(k_in))
        v = self.heads(self.v_proj(v_in))
        d = q.shape[-1]
        scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
        weights = softmax(scores * (1.0 / np.sqrt(d)), axis=-1)
        out = self.out_proj(self.merge(matmul(weights, v)))
        if return_weights:
            return out, weights
        return out


def query_self_attention(q, block):
    """Residual self-attention over the T queries, then residual MLP; LayerNorm after each."""
    x = q.queries
    h = add(x, q.positional_embedding)
    sa = block.self_attn(h, h, x)
    x1 = block.norm_sa(add(sa, x))
    x2 = block.norm_sa_mlp(add(block.mlp_sa(x1), x1))
    return QuerySet(x2, q.positional_embedding)


def dense_cross_attention(query, tokens, attn, return_weights=False):
    """Each frame's query (T, C) attends over all L tokens (T, L, C) of that frame only."""
    t_, c = query.shape
    out = attn(reshape(query, (t_, 1, c)), tokens, tokens, return_weights=return_weights)
    if return_weights:
        return reshape(out[0], (t_, c)), out[1]
    return reshape(out, (t_, c))


def deformable_cross_attention(query, refs, seq, attn):
    """Deformable sampling of each frame's pyramid around a learned reference point."""
    t_, c = query.shape
    out = attn(reshape(query, (t_, 1, c)), seq.data, reshape(refs, (t_, 1, 2)),
               seq.level_shapes, seq.level_offsets)
    return reshape(out, (t_, c))


def lqtm(ca, proj, return_weights=False):
    """Aggregate per-frame cross-attention outputs ``ca`` (T, C) into one (1, C) vector.

    Scores come from ``proj`` (C->1 for one weight per frame, C->C for one per
    channel) and are softmax-normalized over the frame axis.
    """
    weights = softmax(proj(ca), axis=0)
    q_tem = (weights * ca).sum(axis=0, keepdims=True)
    if return_weights:
        return q_tem, weights
    return q_tem


class DecoderBlock(Module):
    def __init__(self, rng, dim, n_heads, n_levels, n_points, cross_attention="deformable",
                 lqtm=True, lqtm_per_channel=False, mlp_ratio=4):
        if cross_attention not in ("deformable", "dense"):
            raise ValueError(f"cross_attention must be 'deformable' or 'dense', got {cross_attention!r}")
        sa_rng, ca_rng, lq_rng = rng.spawn(3)
        self.cross_mode = cross_attention
        self.self_attn = MultiHeadAttention(sa_rng, dim, n_heads)
        self.norm_sa = LayerNorm(dim)
        self.mlp_sa = MLP(sa_rng, dim, mlp_ratio * dim)
        self.norm_sa_mlp = LayerNorm(dim)
        if cross_attention == "deformable":
            self.cross_attn = DeformableAttention(ca_rng, dim, n_heads, n_levels, n_points)
        else:
            self.cross_attn = MultiHeadAttention(ca_rng, dim, n_heads)
        # no bias: the softmax over frames is shift invariant
        self.lqtm_proj = Linear(lq_rng, dim, dim if lqtm_per_channel else 1, bias=False) if lqtm else None
        self.norm_ca = LayerNorm(dim)
        self.mlp_ca = MLP(ca_rng, dim, mlp_ratio * dim)
        self.norm_out = LayerNorm(dim)

    def cross(self, q, seq, refs=None):
        query = add(q.queries, q.positional_embedding)
        if self.cross_mode == "dense":
            return dense_cross_attention(query, seq.data, self.cross_attn)
        return deformable_cross_attention(query, refs, seq, self.cross_attn)

    def __call__(self, q, seq, refs=None, lqtm_enabled=True):
        return decoder_block(q, seq, self, refs, lqtm_enabled)


def decoder_block(q, seq, block, refs=None, lqtm_enabled=True):
    if q.n_frames != seq.n_frames:
        raise ValueError(f"{q.n_frames} queries for {seq.n_frames} frames")
    q = query_self_attention(q, block)
    ca = block.cross(q, seq, refs)
    h = add(ca, q.queries)
    if lqtm_enabled and block.lqtm_proj is not None:
        h = add(h, lqtm(ca, block.lqtm_proj))
    h = block.norm_ca(h)
    out = block.norm_out(add(block.mlp_ca(h), h))
    return QuerySet(out, q.positional_embedding)


class Decoder(Module):
    """Learned queries plus a stack of decoder blocks.

    Query ``t`` of a window reuses the learned slot ``t mod n_queries``, so
    inference windows may be longer or shorter than training windows.
    """

    def __init__(self, rng, dim=32, n_heads=2, n_levels=4, n_points=2, n_blocks=1, n_queries=5,
                 cross_attention="deformable", lqtm_enabled=True, lqtm_per_channel=False):
        q_rng, ref_rng, block_rng = rng.spawn(3)
        self.n_queries = n_queries
        self.lqtm_enabled = lqtm_enabled
        self.cross_mode = cross_attention
        self.query_content = Parameter(np.zeros((n_queries, dim)))
        self.query_pos = Parameter(q_rng.normal(0.0, 0.02, size=(n_queries, dim)))
        if cross_attention == "deformable":
            self.ref_head = Linear(ref_rng, dim, 2)
        self.blocks = [DecoderBlock(r, dim, n_heads, n_levels, n_points, cross_attention,
                                    lqtm_enabled, lqtm_per_channel)
                       for r in block_rng.spawn(n_blocks)]
        # the matte logit is an unscaled C-dim dot product; starting the last gain at
        # 1/sqrt(C) keeps initial logits O(1) instead of saturating the sigmoid
        self.blocks[-1].norm_out.gamma.data[...] = 1.0 / np.sqrt(dim)

    def initial_queries(self, n_frames):
        idx = np.arange(n_frames) % self.n_queries
        if n_frames == self.n_queries:
            return QuerySet(self.query_content, self.query_pos)
        return QuerySet(self.query_content[idx], self.query_pos[idx])

    def reference_points(self, q):
        return sigmoid(self.ref_head(q.positional_embedding))

    def __call__(self, seq):
        q = self.initial_queries(seq.n_frames)
        refs = self.reference_points(q) if self.cross_mode == "deformable" else None
        for block in self.blocks:
            q = block(q, seq, refs, self.lqtm_enabled)
        return q
