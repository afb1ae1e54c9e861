"""Registry of finite-difference gradient checks shared by the tests and the CLI.

Every target builds a fresh random probe from a seed and reduces its output
to a scalar through a fixed random projection, so no gradient coordinate is
trivially uniform. Probes never exceed 2 frames of 16x16.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .autodiff import (
    LayerNorm,
    Linear,
    Parameter,
    abs_,
    bilinear_sample,
    concat,
    conv2d,
    exp,
    gradcheck,
    layer_norm,
    log,
    matmul,
    relu,
    resize_bilinear,
    sigmoid,
    softmax,
    sqrt,
    upsample2x,
)
from .backbone import flatten_levels
from .decoder import DecoderBlock, QuerySet, lqtm, query_self_attention
from .encoder import (
    FPN,
    SFTM,
    DeformableAttention,
    EncoderBlock,
    deformable_self_attention,
)
from .losses import dice_loss, focal_loss, temporal_loss, total_loss
from .model import MattingNetwork, ModelConfig
from .predictor import predict

SMOOTH_TOL = 1e-5
MODULE_TOL = 1e-4
SCOPES = ("op", "module", "model")


@dataclass(frozen=True)
class Target:
    name: str
    scope: str
    build: object
    tol: float = MODULE_TOL
    eps: float = 1e-4
    max_coords: int | None = None


@dataclass
class CheckResult:
    name: str
    scope: str
    worst: float
    tol: float
    seeds: int

    @property
    def passed(self):
        return self.worst < self.tol

    def line(self):
        flag = "ok" if self.passed else "FAIL"
        return f"{self.scope:6s} {self.name:24s} worst={self.worst:.3e} tol={self.tol:.0e} {flag}"


def _param(rng, *shape, lo=None, hi=None):
    if lo is None:
        return Parameter(rng.normal(size=shape))
    return Parameter(rng.uniform(lo, hi, size=shape))


def _project(out, seed):
    """Scalar ``sum(out * R)`` with R drawn afresh from ``seed`` on every call."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return (out * r).sum()


def _jitter_heads(module, rng, scale=0.3):
    # zero-initialized heads sample exactly on pixel centres, a kink of the bilinear kernel
    for attn in module:
        attn.offset_head.weight.data[...] = rng.normal(0, scale, attn.offset_head.weight.shape)
        attn.offset_head.bias.data[...] = rng.normal(0, scale, attn.offset_head.bias.shape)
        attn.weight_head.weight.data[...] = rng.normal(0, scale, attn.weight_head.weight.shape)


def _random_sequences(rng, t_, h, w, c, n_levels=4):
    shapes = [(max(1, h >> i), max(1, w >> i)) for i in range(n_levels)]
    levels = [_param(rng, t_, a, b, c) for a, b in shapes]
    return levels, flatten_levels(levels)


# op scope


def _elementwise(rng):
    a = _param(rng, 3, 4)
    b = _param(rng, 3, 4, lo=0.5, hi=2.0)
    return lambda: _project(a * b - a / b + (b ** 1.5) + 0.5 * a, 1), [a, b]


def _exp_log_sqrt(rng):
    a = _param(rng, 4, 3)
    b = _param(rng, 4, 3, lo=0.5, hi=2.0)
    return lambda: _project(exp(a * 0.5) + log(b) + sqrt(b), 2), [a, b]


def _sigmoid(rng):
    a = _param(rng, 5, 4)
    return lambda: _project(sigmoid(a * 2.0), 3), [a]


def _relu_abs(rng):
    # keep inputs away from the kink at zero
    a = Parameter(rng.choice([-1, 1], size=(4, 4)) * rng.uniform(0.2, 1.5, size=(4, 4)))
    return lambda: _project(relu(a) + abs_(a) * 0.5, 4), [a]


def _softmax(rng):
    a = _param(rng, 3, 4, 5)
    return lambda: _project(softmax(a, axis=-1) + softmax(a, axis=0), 5), [a]


def _layer_norm(rng):
    a = _param(rng, 4, 6)
    g = _param(rng, 6)
    b = _param(rng, 6)
    return lambda: _project(layer_norm(a, g, b), 6), [a, g, b]


def _matmul(rng):
    a = _param(rng, 2, 3, 4)
    b = _param(rng, 2, 4, 5)
    return lambda: _project(matmul(a, b), 7), [a, b]


def _reductions(rng):
    a = _param(rng, 2, 3, 4)
    b = _param(rng, 1, 3, 1)

    def f():
        x = (a + b) * a
        y = concat([x[:, 1:], x.mean(axis=1, keepdims=True)], axis=1)
        return _project(y.sum(axis=-1) + x.transpose((2, 1, 0)).sum(axis=0).reshape((6,))[:3].sum(), 8)
    return f, [a, b]


def _conv(stride, padding):
    def build(rng):
        x = _param(rng, 2, 7, 6, 3)
        w = _param(rng, 3, 3, 3, 4)
        b = _param(rng, 4)
        return lambda: _project(conv2d(x, w, b, stride, padding), 9), [x, w, b]
    return build


def _bilinear(rng):
    x = _param(rng, 5, 6, 2)
    # interior and out-of-bounds points alike; uniform draws avoid the lattice almost surely
    pts = Parameter(rng.uniform(-1.2, 6.2, size=(12, 2)))
    return lambda: _project(bilinear_sample(x, pts), 10), [x, pts]


def _upsample(rng):
    x = _param(rng, 2, 3, 4, 2)
    return lambda: _project(upsample2x(x) + resize_bilinear(x, 5, 3).sum(), 11), [x]


# module scope


def _deformable_attention(rng):
    attn = DeformableAttention(rng, 8, 2, 4, 2)
    _jitter_heads([attn], rng)
    levels, seq = _random_sequences(rng, 2, 8, 8, 8)
    pos = _param(rng, seq.length, 8)
    out_seed = 12

    def f():
        s = flatten_levels(levels)
        return _project(deformable_self_attention(s, attn, pos).data, out_seed)
    return f, attn.parameters() + levels + [pos]


def _learned_refs_attention(rng):
    attn = DeformableAttention(rng, 8, 2, 4, 2)
    _jitter_heads([attn], rng)
    levels, seq = _random_sequences(rng, 2, 8, 8, 8)
    query = _param(rng, 2, 3, 8)
    logits = _param(rng, 2, 3, 2)
    out_seed = 13

    def f():
        s = flatten_levels(levels)
        return _project(attn(query, s.data, sigmoid(logits), s.level_shapes, s.level_offsets), out_seed)
    return f, attn.parameters() + [query, logits] + levels


def _encoder_block(rng):
    block = EncoderBlock(rng, 8, 2, 4, 2)
    _jitter_heads([block.attn], rng)
    levels, _ = _random_sequences(rng, 2, 8, 8, 8)
    out_seed = 14

    def f():
        return _project(block(flatten_levels(levels)).data, out_seed)
    return f, block.parameters() + levels


def _sftm(rng):
    mod = SFTM(rng, 4, 2)
    levels = [_param(rng, 2, 6, 6, 4), _param(rng, 2, 3, 3, 4)]
    out_seed = 15
    return lambda: sum(_project(o, out_seed) for o in mod(levels)), mod.parameters() + levels


def _fpn(rng):
    mod = FPN(rng, 4, 3)
    levels = [_param(rng, 2, 8, 8, 4), _param(rng, 2, 4, 4, 4), _param(rng, 2, 2, 2, 4)]
    weights = [np.random.default_rng(16 + i).normal(size=lv.shape) for i, lv in enumerate(levels)]

    def f():
        return sum((o * w).sum() for o, w in zip(mod(levels), weights))
    return f, mod.parameters() + levels


def _decoder_block(mode):
    def build(rng):
        block = DecoderBlock(rng, 8, 2, 4, 2, cross_attention=mode)
        if mode == "deformable":
            _jitter_heads([block.cross_attn], rng)
        levels, _ = _random_sequences(rng, 2, 8, 8, 8)
        q = _param(rng, 2, 8)
        pos = _param(rng, 2, 8)
        refs = _param(rng, 2, 2, lo=0.1, hi=0.9)
        out_seed = 20

        def f():
            out = block(QuerySet(q, pos), flatten_levels(levels), refs if mode == "deformable" else None)
            return _project(out.queries, out_seed)
        extra = [refs] if mode == "deformable" else []
        return f, block.parameters() + levels + [q, pos] + extra
    return build


def _query_self_attention(rng):
    block = DecoderBlock(rng, 8, 2, 4, 2, cross_attention="dense")
    q = _param(rng, 3, 8)
    pos = _param(rng, 3, 8)
    params = [p for n, p in block.named_parameters() if n.startswith(("self_attn", "norm_sa", "mlp_sa"))]
    return lambda: _project(query_self_attention(QuerySet(q, pos), block).queries, 24), params + [q, pos]


def _lqtm(per_channel):
    def build(rng):
        proj = Linear(rng, 6, 6 if per_channel else 1, bias=False)
        ca = _param(rng, 4, 6)
        out_seed = 21
        return lambda: _project(lqtm(ca, proj), out_seed), proj.parameters() + [ca]
    return build


def _layer_norm_module(rng):
    ln = LayerNorm(6)
    ln.gamma.data[...] = rng.normal(size=6)
    x = _param(rng, 3, 6)
    return lambda: _project(ln(x), 22), ln.parameters() + [x]


def _predictor(rng):
    feats = _param(rng, 2, 8, 8, 4)
    queries = Parameter(rng.normal(size=(2, 4)) * 0.5)
    out_seed = 23
    return lambda: _project(predict(feats, queries).alpha, out_seed), [feats, queries]


def _alpha_pair(rng, shape=(2, 8, 8, 1)):
    logits = _param(rng, *shape)
    g = rng.uniform(0, 1, size=shape)
    g[rng.uniform(size=shape) < 0.3] = 0.0
    g[rng.uniform(size=shape) < 0.3] = 1.0
    return logits, g


def _focal(rng):
    logits, g = _alpha_pair(rng)
    return lambda: focal_loss(sigmoid(logits), g), [logits]


def _dice(rng):
    logits, g = _alpha_pair(rng)
    return lambda: dice_loss(sigmoid(logits), g), [logits]


def _temporal(rng):
    logits, g = _alpha_pair(rng, (3, 6, 6, 1))
    return lambda: temporal_loss(sigmoid(logits), g), [logits]


def _total(rng):
    logits, g = _alpha_pair(rng)
    return lambda: total_loss(sigmoid(logits), g).total, [logits]


# model scope

TINY_MODEL = ModelConfig(backbone_channels=(4, 4, 6, 6), dim=8, n_heads=2, n_points=1,
                         n_enc=1, n_dec=1, n_queries=2)


def _model(cross):
    def build(rng):
        cfg = replace(TINY_MODEL, cross_attention=cross)
        net = MattingNetwork(cfg, seed=int(rng.integers(2 ** 31)))
        attns = [b.attn for b in net.encoder.blocks]
        if cross == "deformable":
            attns += [b.cross_attn for b in net.decoder.blocks]
        _jitter_heads(attns, rng)
        net.decoder.query_content.data[...] = rng.normal(0, 0.5, net.decoder.query_content.shape)
        # zero biases on dead inputs put ReLU pre-activations exactly on the kink
        for name, p in net.named_parameters():
            if name.endswith(".bias"):
                p.data[...] = rng.normal(0, 0.1, p.shape)
        clip = rng.uniform(0, 1, size=(2, 16, 16, 3))
        g = rng.uniform(0, 1, size=(2, 16, 16, 1))
        return lambda: total_loss(net(clip).alpha, g).total, net.parameters()
    return build


TARGETS = [
    Target("elementwise", "op", _elementwise, SMOOTH_TOL, eps=1e-5),
    Target("exp_log_sqrt", "op", _exp_log_sqrt, SMOOTH_TOL, eps=1e-5),
    Target("sigmoid", "op", _sigmoid, SMOOTH_TOL, eps=1e-5),
    Target("relu_abs", "op", _relu_abs, SMOOTH_TOL, eps=1e-5),
    Target("softmax", "op", _softmax, SMOOTH_TOL, eps=1e-5),
    Target("layer_norm", "op", _layer_norm, SMOOTH_TOL, eps=1e-5),
    Target("matmul", "op", _matmul, SMOOTH_TOL, eps=1e-5),
    Target("reductions", "op", _reductions, SMOOTH_TOL, eps=1e-5),
    Target("conv2d_s1", "op", _conv(1, 1), SMOOTH_TOL, eps=1e-5),
    Target("conv2d_s2", "op", _conv(2, 1), SMOOTH_TOL, eps=1e-5),
    Target("conv2d_valid", "op", _conv(1, 0), SMOOTH_TOL, eps=1e-5),
    Target("upsample", "op", _upsample, SMOOTH_TOL, eps=1e-5),
    Target("bilinear_sample", "op", _bilinear, MODULE_TOL),
    Target("deformable_attention", "module", _deformable_attention, max_coords=12),
    Target("deform_learned_refs", "module", _learned_refs_attention, max_coords=12),
    Target("encoder_block", "module", _encoder_block, max_coords=8),
    Target("sftm", "module", _sftm, max_coords=16),
    Target("fpn", "module", _fpn, max_coords=16),
    Target("decoder_block", "module", _decoder_block("deformable"), max_coords=8),
    Target("decoder_block_dense", "module", _decoder_block("dense"), max_coords=8),
    Target("lqtm", "module", _lqtm(False)),
    Target("lqtm_per_channel", "module", _lqtm(True)),
    Target("layer_norm_module", "module", _layer_norm_module),
    Target("query_self_attention", "module", _query_self_attention, SMOOTH_TOL, max_coords=8),
    Target("predictor", "module", _predictor, SMOOTH_TOL, max_coords=32),
    Target("focal_loss", "module", _focal, SMOOTH_TOL),
    Target("dice_loss", "module", _dice),
    Target("temporal_loss", "module", _temporal),
    Target("total_loss", "module", _total),
    Target("model", "model", _model("deformable"), max_coords=2),
    Target("model_dense", "model", _model("dense"), max_coords=2),
]


def targets(scope=None):
    if scope is not None and scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    return [t for t in TARGETS if scope is None or t.scope == scope]


def check_target(target, seed):
    rng = np.random.default_rng([seed, _stable_id(target.name)])
    f, params = target.build(rng)
    return gradcheck(f, params, eps=target.eps, max_coords=target.max_coords, rng=rng,
                     kink_aware=True)


def _stable_id(name):
    return sum((i + 1) * ord(c) for i, c in enumerate(name))


def run_suite(scope=None, seeds=range(20)):
    """Worst relative error of every target over ``seeds``."""
    seeds = list(seeds)
    out = []
    for t in targets(scope):
        worst = max(check_target(t, s) for s in seeds)
        out.append(CheckResult(t.name, t.scope, worst, t.tol, len(seeds)))
    return out

