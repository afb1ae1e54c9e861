"""Per-frame CNN feature pyramid and its flattening into token sequences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Conv2d, Module, Tensor, concat, relu, reshape
from .validation import check_divisible

N_LEVELS = 4


@dataclass
class FeatureSequences:
    """Flattened multi-level features: ``data`` is (T, L, C)."""

    data: Tensor
    level_shapes: list
    level_offsets: list

    @property
    def n_frames(self):
        return self.data.shape[0]

    @property
    def length(self):
        return self.data.shape[1]

    def with_data(self, data):
        return FeatureSequences(data, self.level_shapes, self.level_offsets)


def sequence_length(h, w):
    """Total token count of a 4-level pyramid at strides 2, 4, 8, 16."""
    return sum((h >> i) * (w >> i) for i in range(1, N_LEVELS + 1))


def level_geometry(level_shapes):
    offsets = np.cumsum([0] + [h * w for h, w in level_shapes])[:-1]
    return [int(o) for o in offsets]


def flatten_levels(levels):
    """Concatenate (T, h_i, w_i, C) maps into a row-major (T, L, C) sequence."""
    t_ = levels[0].shape[0]
    c = levels[0].shape[-1]
    shapes = [(lv.shape[1], lv.shape[2]) for lv in levels]
    parts = [reshape(lv, (t_, h * w, c)) for lv, (h, w) in zip(levels, shapes)]
    data = parts[0] if len(parts) == 1 else concat(parts, axis=1)
    return FeatureSequences(data, shapes, level_geometry(shapes))


def unflatten(seq):
    """Inverse of :func:`flatten_levels`."""
    t_, _, c = seq.data.shape
    out = []
    for (h, w), off in zip(seq.level_shapes, seq.level_offsets):
        part = seq.data[:, off:off + h * w, :]
        out.append(reshape(part, (t_, h, w, c)))
    return out


class Backbone(Module):
    """Four stages, each a stride-2 3x3 conv and a stride-1 3x3 conv, both ReLU."""

    def __init__(self, rng, channels=(16, 32, 64, 96), in_channels=3):
        self.channels = tuple(channels)
        self.stages = []
        cin = in_channels
        for cout in self.channels:
            stage = Module()
            stage.down = Conv2d(rng, cin, cout, k=3, stride=2, padding=1)
            stage.conv = Conv2d(rng, cout, cout, k=3, stride=1, padding=1)
            self.stages.append(stage)
            cin = cout

    def __call__(self, clip):
        return extract_pyramid(clip, self)


def extract_pyramid(clip, backbone):
    """Return the list of feature maps F1..F4 at strides 2, 4, 8, 16."""
    if not isinstance(clip, Tensor):
        clip = Tensor(clip)
    _, h, w, _ = clip.shape
    check_divisible(h, w, 2 ** N_LEVELS)
    levels = []
    x = clip
    for stage in backbone.stages:
        x = relu(stage.down(x))
        x = relu(stage.conv(x))
        levels.append(x)
    return levels


class Projection(Module):
    """Per-level 1x1 convolutions to the common token width."""

    def __init__(self, rng, in_channels, dim):
        self.convs = [Conv2d(rng, c, dim, k=1, padding=0, gain=1.0) for c in in_channels]

    def __call__(self, pyramid):
        return project_and_flatten(pyramid, self)


def project_and_flatten(pyramid, proj):
    return flatten_levels([conv(lv) for conv, lv in zip(proj.convs, pyramid)])
