import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vidmatte.autodiff import Parameter, Tensor, gradcheck
from vidmatte.backbone import (
    Backbone,
    Projection,
    extract_pyramid,
    flatten_levels,
    project_and_flatten,
    sequence_length,
    unflatten,
)


@pytest.fixture(scope="module")
def nets():
    rng = np.random.default_rng(0)
    bb = Backbone(rng)
    return bb, Projection(rng, bb.channels, 8)


def test_pyramid_sizes(nets):
    bb, _ = nets
    clip = np.random.default_rng(1).uniform(size=(1, 64, 64, 3))
    levels = extract_pyramid(clip, bb)
    assert [lv.shape for lv in levels] == [(1, 32, 32, 16), (1, 16, 16, 32), (1, 8, 8, 64), (1, 4, 4, 96)]


def test_indivisible_size_rejected(nets):
    with pytest.raises(ValueError):
        extract_pyramid(np.zeros((1, 40, 24, 3)), nets[0])


def test_identical_frames_identical_features(nets):
    bb, _ = nets
    frame = np.random.default_rng(2).uniform(size=(1, 32, 32, 3))
    levels = extract_pyramid(np.concatenate([frame, frame]), bb)
    for lv in levels:
        assert np.array_equal(lv.data[0], lv.data[1])


def test_frame_permutation_equivariance(nets):
    bb, proj = nets
    clip = np.random.default_rng(3).uniform(size=(3, 32, 32, 3))
    perm = [2, 0, 1]
    a = project_and_flatten(extract_pyramid(clip, bb), proj).data.data
    b = project_and_flatten(extract_pyramid(clip[perm], bb), proj).data.data
    np.testing.assert_array_equal(a[perm], b)


def test_flatten_length_and_indexing(nets):
    bb, proj = nets
    clip = np.random.default_rng(4).uniform(size=(2, 64, 64, 3))
    pyramid = extract_pyramid(clip, bb)
    seq = project_and_flatten(pyramid, proj)
    assert seq.length == 1024 + 256 + 64 + 16 == 1360
    assert seq.level_offsets == [0, 1024, 1280, 1344]
    f2 = proj.convs[1](pyramid[1]).data
    h2, w2 = seq.level_shapes[1]
    r, c = 5, 11
    np.testing.assert_array_equal(seq.data.data[1, seq.level_offsets[1] + r * w2 + c], f2[1, r, c])


def test_unflatten_round_trip(rng):
    levels = [Tensor(rng.normal(size=(2, 8 >> i, 4 >> i, 3))) for i in range(3)]
    back = unflatten(flatten_levels(levels))
    for a, b in zip(levels, back):
        assert np.array_equal(a.data, b.data)


@given(st.integers(1, 12), st.integers(1, 12))
def test_sequence_length_law(a, b):
    h, w = 16 * a, 16 * b
    expected = sum(h * w // 4 ** i for i in range(1, 5))
    assert sequence_length(h, w) == expected
    shapes = [(h >> i, w >> i) for i in range(1, 5)]
    seq = flatten_levels([Tensor(np.zeros((1, sh, sw, 1))) for sh, sw in shapes])
    assert seq.length == expected


def test_backbone_gradcheck():
    rng = np.random.default_rng(5)
    bb = Backbone(rng, channels=(4, 4, 6, 6))
    proj = Projection(rng, bb.channels, 4)
    for p in bb.parameters():
        if p.data.ndim == 1:
            p.data[...] = rng.normal(0, 0.1, p.shape)
    clip = Parameter(rng.uniform(size=(1, 16, 16, 3)))
    r = rng.normal(size=(1, sequence_length(16, 16), 4))
    f = lambda: (project_and_flatten(extract_pyramid(clip, bb), proj).data * r).sum()  # noqa: E731
    params = bb.parameters() + proj.parameters() + [clip]
    assert gradcheck(f, params, eps=1e-4, max_coords=6, rng=rng, kink_aware=True) < 1e-4
