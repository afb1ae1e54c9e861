import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import bilinear_oracle, conv2d_oracle

from vidmatte.autodiff import (
    Conv2d,
    Linear,
    Module,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    bilinear_sample,
    concat,
    conv2d,
    gradcheck,
    layer_norm,
    log,
    matmul,
    no_grad,
    relu,
    sigmoid,
    softmax,
    upsample2x,
)


def test_matmul_identity_and_hand_example():
    v = Tensor([[1.0], [2.0], [3.0]])
    assert np.array_equal(matmul(Tensor(np.eye(3)), v).data, v.data)
    out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_gradcheck(rng):
    a = Parameter(rng.normal(size=(4, 5)))
    b = Parameter(rng.normal(size=(5, 6)))
    r = rng.normal(size=(4, 6))
    assert gradcheck(lambda: (matmul(a, b) * r).sum(), [a, b], eps=1e-5) < 1e-6


def test_matmul_backward_formula(rng):
    a = Parameter(rng.normal(size=(2, 3, 4)))
    b = Parameter(rng.normal(size=(4, 2)))
    d = rng.normal(size=(2, 3, 2))
    matmul(a, b).backward(d)
    np.testing.assert_allclose(a.grad, d @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, sum(a.data[i].T @ d[i] for i in range(2)), atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    out = softmax(Tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_softmax_random_vector(rng):
    x = Parameter(rng.normal(size=7))
    assert abs(softmax(x).data.sum() - 1.0) < 1e-12
    r = rng.normal(size=7)
    assert gradcheck(lambda: (softmax(x) * r).sum(), [x], eps=1e-5) < 1e-6


def test_softmax_bad_axis():
    with pytest.raises(ValueError):
        softmax(Tensor(np.zeros((2, 3))), axis=2)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3)), st.sampled_from([0, 1, -1]))
def test_softmax_normalized_property(x, axis):
    out = softmax(Tensor(x), axis=axis).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-12)


def test_layer_norm_examples():
    one, zero = Parameter(np.ones(3)), Parameter(np.zeros(3))
    assert np.array_equal(layer_norm(Tensor([[4.0, 4.0, 4.0]]), one, zero).data, np.zeros((1, 3)))
    out = layer_norm(Tensor([[1.0, 2.0, 3.0]]), one, zero).data
    assert abs(out.mean()) < 1e-12
    assert abs(out.var() - 1.0) < 1e-9


def test_layer_norm_gradcheck(rng):
    x = Parameter(rng.normal(size=(2, 4, 8)))
    g = Parameter(rng.normal(size=8))
    b = Parameter(rng.normal(size=8))
    r = rng.normal(size=(2, 4, 8))
    assert gradcheck(lambda: (layer_norm(x, g, b) * r).sum(), [x, g, b], eps=1e-5) < 1e-5


def test_conv2d_identity_and_counting():
    x = np.random.default_rng(0).normal(size=(2, 5, 5, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(conv2d(Tensor(x), Tensor(w), padding=0).data, x)
    ones = conv2d(Tensor(np.ones((1, 5, 5, 1))), Tensor(np.ones((3, 3, 1, 1))), padding=1).data
    assert ones[0, 2, 2, 0] == 9.0
    assert ones[0, 0, 0, 0] == 4.0


def test_conv2d_gradcheck(rng):
    x = Parameter(rng.normal(size=(2, 6, 6, 3)))
    w = Parameter(rng.normal(size=(3, 3, 3, 4)))
    b = Parameter(rng.normal(size=4))
    r = rng.normal(size=(2, 6, 6, 4))
    assert gradcheck(lambda: (conv2d(x, w, b, 1, 1) * r).sum(), [x, w, b], eps=1e-5) < 1e-5


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)])
def test_conv2d_matches_loop_oracle(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding + k)
    x = rng.normal(size=(2, 8, 7, 4))
    w = rng.normal(size=(k, k, 4, 3))
    b = rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data
    np.testing.assert_allclose(out, conv2d_oracle(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv2d_degenerate_output():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.zeros((3, 3, 1, 1))), padding=0)


def test_bilinear_examples():
    x = np.random.default_rng(0).normal(size=(5, 6, 3))
    out = bilinear_sample(Tensor(x), Tensor([[2.0, 3.0]])).data
    np.testing.assert_array_equal(out[0], x[2, 3])
    grid = np.arange(8.0).reshape(2, 2, 2)
    mid = bilinear_sample(Tensor(grid), Tensor([[0.5, 0.5]])).data
    np.testing.assert_allclose(mid[0], grid.reshape(4, 2).mean(axis=0), atol=1e-15)


def test_bilinear_lattice_points_index_exactly(rng):
    x = rng.normal(size=(4, 5, 2))
    pts = np.array([[r, c] for r in range(4) for c in range(5)], dtype=float)
    out = bilinear_sample(Tensor(x), Tensor(pts)).data
    assert np.array_equal(out, x.reshape(20, 2))


def test_bilinear_matches_oracle(rng):
    x = rng.normal(size=(8, 8, 3))
    pts = rng.uniform(-1.5, 8.5, size=(40, 2))
    out = bilinear_sample(Tensor(x), Tensor(pts)).data
    ref = np.stack([bilinear_oracle(x, py, px) for py, px in pts])
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_bilinear_gradcheck_points(rng):
    x = Parameter(rng.normal(size=(5, 5, 2)))
    pts = Parameter(rng.uniform(-0.7, 4.7, size=(10, 2)))
    r = rng.normal(size=(10, 2))
    assert gradcheck(lambda: (bilinear_sample(x, pts) * r).sum(), [x, pts], eps=1e-6) < 1e-4


def test_upsample2x_of_constant_is_constant():
    out = upsample2x(Tensor(np.full((1, 3, 4, 2), 0.25))).data
    assert out.shape == (1, 6, 8, 2)
    np.testing.assert_allclose(out, 0.25, atol=1e-15)


def test_gradcheck_examples(rng):
    x = Parameter(rng.normal(size=6))
    assert gradcheck(lambda: (x * x).sum(), [x]) < 1e-9
    assert gradcheck(lambda: softmax(x).sum(), [x]) < 1e-6


def test_gradcheck_detects_wrong_gradient(rng):
    x = Parameter(rng.uniform(0.5, 1.0, size=4))

    def broken():
        out = x * x
        out._backward = lambda g: (g,)  # drop the factor 2x
        return out.sum()
    assert gradcheck(broken, [x]) > 1e-2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradcheck_non_finite():
    x = Parameter(np.array([-1.0, 1.0]))
    with pytest.raises(NonFiniteError):
        gradcheck(lambda: log(x).sum(), [x])


def test_gradcheck_kink_aware_refines_stencil():
    # pre-activation 5e-4 from the kink: an eps=1e-3 stencil straddles it
    x = Parameter(np.array([5e-4, 0.3]))
    plain = gradcheck(lambda: relu(x).sum(), [x], eps=1e-3)
    guarded = gradcheck(lambda: relu(x).sum(), [x], eps=1e-3, kink_aware=True)
    assert plain > 0.1
    assert guarded < 1e-9


def test_gradients_accumulate_and_zero(rng):
    p = Parameter(rng.normal(size=3))
    (p * 2.0).sum().backward()
    (p * 2.0).sum().backward()
    np.testing.assert_array_equal(p.grad, [4.0, 4.0, 4.0])
    p.zero_grad()
    assert not p.grad.any()


def test_parameter_grad_buffer_iff_requires_grad():
    assert Parameter(np.zeros(2)).grad is not None
    assert Parameter(np.zeros(2), requires_grad=False).grad is None


def test_shared_subexpression_gradient():
    x = Parameter(np.array([3.0]))
    y = x * x
    z = y * y * y  # x^6
    z.sum().backward()
    assert x.grad[0] == pytest.approx(6 * 3.0 ** 5)


def test_no_grad_records_nothing_and_restores():
    p = Parameter(np.ones(2))
    with no_grad():
        out = sigmoid(p * 3.0)
    assert not out.requires_grad
    assert (p * 3.0).requires_grad


def test_concat_and_getitem_gradients(rng):
    a = Parameter(rng.normal(size=(2, 3)))
    b = Parameter(rng.normal(size=(1, 3)))
    r = rng.normal(size=(2, 3))
    f = lambda: (concat([a, b], axis=0)[1:] * r).sum() + a[[0, 0, 1]].sum()  # noqa: E731
    assert gradcheck(f, [a, b], eps=1e-5) < 1e-8


def test_ops_bit_deterministic(rng):
    x = rng.normal(size=(2, 6, 6, 3))
    w = rng.normal(size=(3, 3, 3, 2))
    a = conv2d(Tensor(x), Tensor(w), padding=1).data
    b = conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()


class _Tiny(Module):
    def __init__(self, rng):
        self.fc = Linear(rng, 3, 2)
        self.convs = [Conv2d(rng, 2, 2, k=1), Conv2d(rng, 2, 2, k=1)]


def test_module_names_unique_and_state_round_trip(rng):
    m = _Tiny(rng)
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names)) == 6
    assert "convs.1.weight" in names
    state = m.state_dict()
    other = _Tiny(np.random.default_rng(99))
    other.load_state_dict(state)
    assert all(np.array_equal(state[k], v) for k, v in other.state_dict().items())
    with pytest.raises(KeyError):
        other.load_state_dict({"fc.weight": state["fc.weight"]})
