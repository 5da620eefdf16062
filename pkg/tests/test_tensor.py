import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from memreg import functional as F
from memreg import tensor as T
from memreg.errors import ShapeError
from memreg.gradcheck import TOLERANCE, check_gradients
from memreg.rng import make_rng
from memreg.tensor import Tensor

import gradcases


def test_relu_example():
    np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_softmax_example():
    np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0]), axis=0).data, [0.5, 0.5])


def test_conv2d_ones():
    # every 2x2 window of a 3x3 ones image sums four ones
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 2, 2)))
    out = F.conv2d(x, k, stride=1, padding=0)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def _direct_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w) + b
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1), (1, 2, 5)])
def test_conv2d_matches_direct_loop(stride, pad, k):
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, k, k)), rng.normal(size=4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, _direct_conv(x, w, b, stride, pad), rtol=1e-10, atol=1e-10)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError, match="channel"):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.zeros(3)) + Tensor(np.zeros(4))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError, match="inner"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


def test_backward_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_square():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert np.all(x.grad == 0)


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_backward_shared_subexpression():
    # y is used twice; both paths must reach x
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0
    (y * y + y).sum().backward()
    np.testing.assert_allclose(x.grad, [2 * 2 * 6.0 + 2.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64  # explicit 64-bit arrays are kept


@pytest.mark.parametrize("name", sorted(gradcases.PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(3):
        assert check_gradients(*gradcases.PRIMITIVES[name](rng)) < TOLERANCE


def test_conv1x1_gradients():
    rng = np.random.default_rng(0)
    x, k, b = rng.normal(size=(2, 3, 3, 2)), rng.normal(size=(4, 3, 1, 1)), rng.normal(size=4)
    w = rng.normal(size=(2, 4, 3, 2))
    err = check_gradients(lambda a, c, d: (F.conv2d(a, c, d) * Tensor(w)).sum(), [x, k, b])
    assert err < TOLERANCE


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=4, max_side=5),
                  elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    p = F.softmax(Tensor(x), axis=1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, (3, 4), elements=st.floats(-10, 10, width=32)))
def test_log_softmax_consistent_with_softmax(x):
    a = np.exp(F.log_softmax(Tensor(x), axis=1).data)
    np.testing.assert_allclose(a, F.softmax(Tensor(x), axis=1).data, atol=1e-6)


def test_dropout_eval_is_identity():
    x = Tensor(np.arange(6.0))
    assert F.dropout(x, 0.5, train=False) is x


def test_dropout_statistics():
    x = Tensor(np.ones(200_000, dtype=np.float32))
    out = F.dropout(x, 0.1, train=True, rng=make_rng(0, 7)).data
    kept = out != 0
    assert abs(kept.mean() - 0.9) < 0.005
    np.testing.assert_allclose(out[kept], 1.0 / 0.9, rtol=1e-6)


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_rate(rate):
    with pytest.raises(ValueError, match="rate"):
        F.dropout(Tensor(np.ones(3)), rate, train=True, rng=make_rng(0))


def test_seeded_streams_are_bit_identical():
    a = make_rng(5, 2, 9).normal(size=100)
    b = make_rng(5, 2, 9).normal(size=100)
    c = make_rng(5, 2, 10).normal(size=100)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_op_sequence_determinism():
    def run():
        rng = make_rng(11, 1)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), requires_grad=True)
        h = F.dropout(F.relu(F.conv2d(x, w, padding=1)), 0.1, True, make_rng(11, 2))
        loss = F.log_softmax(h, axis=1).mean()
        loss.backward()
        return loss.data.tobytes() + w.grad.tobytes() + x.grad.tobytes()

    assert run() == run()


def test_upsample_nearest_values():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    out = F.upsample_nearest(x, 2).data[0, 0]
    np.testing.assert_array_equal(out[:2, :2], 0.0)
    np.testing.assert_array_equal(out[2:, 2:], 3.0)


def test_concat_and_gather():
    a = Tensor(np.ones((2, 1)))
    b = Tensor(np.zeros((2, 2)))
    assert T.concat([a, b], axis=1).shape == (2, 3)
    with pytest.raises(ShapeError):
        T.concat([a, Tensor(np.zeros((3, 1)))], axis=1)
