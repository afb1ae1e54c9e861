import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import dot_oracle

from vidmatte.autodiff import Parameter, ShapeError, Tensor, gradcheck
from vidmatte.predictor import load_alpha, predict, project_queries, save_alpha
from vidmatte.synthcomp import FormatError


def test_zero_query_gives_half(rng):
    out = predict(Tensor(rng.normal(size=(2, 4, 4, 3))), Tensor(np.zeros((2, 3))))
    assert out.alpha.shape == (2, 8, 8, 1)
    np.testing.assert_array_equal(out.alpha.data, 0.5)


def test_one_hot_query_selects_channel(rng):
    f = rng.normal(size=(2, 4, 4, 3))
    q = np.zeros((2, 3))
    q[:, 1] = 1.0
    np.testing.assert_array_equal(project_queries(Tensor(f), Tensor(q)).data[..., 0], f[..., 1])


def test_logits_match_per_pixel_dot(rng):
    f = rng.normal(size=(2, 4, 4, 3))
    q = rng.normal(size=(2, 3))
    out = project_queries(Tensor(f), Tensor(q)).data
    np.testing.assert_allclose(out, dot_oracle(f, q), rtol=0, atol=1e-12)


def test_frames_are_independent(rng):
    f = rng.normal(size=(3, 4, 4, 2))
    q = rng.normal(size=(3, 2))
    base = predict(Tensor(f), Tensor(q)).alpha.data
    q2 = q.copy()
    q2[1] += 5.0
    out = predict(Tensor(f), Tensor(q2)).alpha.data
    np.testing.assert_array_equal(out[[0, 2]], base[[0, 2]])


@given(st.floats(0.01, 5.0), st.integers(0, 1000))
def test_scaling_query_pushes_alpha_away_from_half(lam, seed):
    r = np.random.default_rng(seed)
    f = Tensor(r.normal(size=(1, 3, 3, 2)))
    q = r.normal(size=(1, 2))
    a = predict(f, Tensor(q)).logits.data
    b = predict(f, Tensor((1 + lam) * q)).logits.data
    np.testing.assert_allclose(b, (1 + lam) * a, rtol=1e-12, atol=1e-12)
    # compared before upsampling, which mixes neighbouring pixels
    pa = 1 / (1 + np.exp(-a)) - 0.5
    pb = 1 / (1 + np.exp(-b)) - 0.5
    assert np.all(np.abs(pb) >= np.abs(pa) - 1e-15)
    assert np.all(np.sign(pb) * np.sign(pa) >= 0)


def test_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        project_queries(Tensor(np.zeros((2, 4, 4, 3))), Tensor(np.zeros((2, 4))))


def test_predictor_gradcheck(rng):
    f = Parameter(rng.normal(size=(2, 3, 3, 2)))
    q = Parameter(rng.normal(size=(2, 2)))
    r = rng.normal(size=(2, 6, 6, 1))
    assert gradcheck(lambda: (predict(f, q).alpha * r).sum(), [f, q], eps=1e-5) < 1e-5


def test_alpha_container_round_trip(tmp_path, rng):
    a = rng.uniform(size=(3, 4, 5, 1))
    path = tmp_path / "a.vmka"
    save_alpha(a, path)
    back = load_alpha(path)
    np.testing.assert_array_equal(back, a.astype(np.float32).astype(np.float64))
    assert path.stat().st_size == 20 + 4 * a.size
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_alpha(path)
    (tmp_path / "b.vmka").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(FormatError):
        load_alpha(tmp_path / "b.vmka")
