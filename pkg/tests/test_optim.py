import numpy as np
import pytest

from memreg.errors import StateError
from memreg.optim import SGD, Adam, PolySchedule, poly_lr
from memreg.tensor import Tensor


def _param(value, grad):
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    p.grad = np.array([grad], dtype=np.float64)
    return p


def test_plain_sgd_step():
    p = _param(1.0, 1.0)
    opt = SGD([p], lr=0.1, momentum=0.0)
    opt.step()
    np.testing.assert_allclose(p.data, [0.9])
    assert opt.step_count == 1


def test_sgd_momentum_recurrence():
    p = _param(0.0, 1.0)
    opt = SGD([p], lr=0.5, momentum=0.9)
    opt.step()  # v = 1
    opt.step()  # v = 1.9
    np.testing.assert_allclose(p.data, [-(0.5 * 1.0 + 0.5 * 1.9)])


def test_adam_first_step_has_magnitude_lr():
    # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    for g in (3.0, -0.02, 1e3):
        p = _param(0.0, g)
        Adam([p], lr=0.01).step()
        np.testing.assert_allclose(abs(p.data[0]), 0.01, rtol=1e-5)
        assert np.sign(p.data[0]) == -np.sign(g)


@pytest.mark.parametrize("cls", [SGD, Adam])
def test_zero_lr_leaves_params(cls):
    p = _param(2.0, 5.0)
    opt = cls([p], lr=1.0)
    opt.step(lr=0.0)
    assert p.data[0] == 2.0


def test_step_count_increments():
    p = _param(1.0, 1.0)
    opt = Adam([p], lr=0.1)
    for k in range(1, 4):
        opt.step()
        assert opt.step_count == k


@pytest.mark.parametrize("cls", [SGD, Adam])
def test_missing_gradient(cls):
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(StateError, match="gradient"):
        cls([p], lr=0.1).step()


def test_state_dict_round_trip():
    p = _param(1.0, 0.3)
    opt = Adam([p], lr=0.1)
    opt.step()
    clone = Adam([_param(1.0, 0.3)], lr=0.1)
    clone.load_state_dict(opt.state_dict())
    assert clone.step_count == 1
    np.testing.assert_array_equal(clone.m[0], opt.m[0])


def test_poly_endpoints():
    sched = PolySchedule(0.0002, 1000)
    assert poly_lr(sched, 0) == 0.0002
    assert poly_lr(sched, 1000) == 0.0


def test_poly_midpoint():
    sched = PolySchedule(0.0002, 1000, power=0.9)
    np.testing.assert_allclose(poly_lr(sched, 500), 0.0002 * 0.5**0.9)
    np.testing.assert_allclose(poly_lr(sched, 500), 1.0717e-4, rtol=1e-4)


def test_poly_monotone():
    sched = PolySchedule(0.01, 50)
    lrs = [sched(i) for i in range(51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


@pytest.mark.parametrize("it", [-1, 1001])
def test_poly_out_of_range(it):
    with pytest.raises(ValueError, match="outside"):
        poly_lr(PolySchedule(0.1, 1000), it)
