import numpy as np
import pytest
from scipy.signal import correlate

from hdnet.autodiff import (NonFiniteError, ShapeError, TapeError, Tensor, backward, current_tape,
                            detect_anomaly, gradient_check, no_grad)
from hdnet.autodiff import functional as F
from hdnet.autodiff.nn import BatchNorm, Conv2d, Linear, Module
from hdnet.autodiff.optim import Adam, step_decay_lr
from hdnet.autodiff.tensor import record
from hdnet.gradsuite import composite_case, primitive_cases
from hdnet.autodiff import check_parameters

CASES = primitive_cases(np.random.default_rng(0))


@pytest.mark.parametrize("name,builder,point", CASES, ids=[c[0] for c in CASES])
def test_primitive_gradients(name, builder, point):
    rep = gradient_check(builder, point, step=1e-6)
    assert rep.passed, f"{name}: {rep.max_rel_error}"


def test_composite_objective_gradient():
    loss_fn, params = composite_case(3)
    rep = check_parameters(loss_fn, params, step=1e-6, max_coords_per_param=1,
                           rng=np.random.default_rng(3))
    assert rep.max_rel_error < 1e-4


def test_square_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    backward(F.sum_all(F.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_grad_accumulates_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(F.sum_all(x))
    backward(F.sum_all(F.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TapeError):
        backward(F.scale(x, 2.0))  # not scalar
    loss = F.sum_all(x)
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)
    with pytest.raises(TapeError):
        backward(Tensor(1.0))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = F.sum_all(F.exp(x))
    assert not y.requires_grad
    assert current_tape().nodes == []


def test_detach_blocks_gradient():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = F.add(F.mul(x.detach(), x), x)
    backward(F.sum_all(y))
    np.testing.assert_array_equal(x.grad, [3.0])


def test_anomaly_detection():
    with detect_anomaly(), pytest.raises(NonFiniteError):
        F.log(Tensor(np.array([0.0, 1.0])))
    # guarded log stays finite
    with detect_anomaly():
        assert np.isfinite(F.log(Tensor(np.array([0.0])), 1e-12).data).all()


def test_shape_errors():
    with pytest.raises(ShapeError):
        F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        F.softmax(Tensor(np.ones((2, 0))), -1)
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_softmax_is_stable_and_normalized():
    x = Tensor(np.array([[1000.0, 1001.0, 999.0]]))
    p = F.softmax(x, -1).data
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p.sum(), 1.0, rtol=0, atol=1e-15)


def test_conv2d_matches_scipy_correlate(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    out = F.conv2d(Tensor(x), Tensor(w), None, stride=1, padding=1).data
    for n in range(2):
        for o in range(4):
            ref = sum(correlate(np.pad(x[n, c], 1), w[o, c], mode="valid") for c in range(3))
            np.testing.assert_allclose(out[n, o], ref, atol=1e-12)
    strided = F.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).data
    np.testing.assert_allclose(strided, out[:, :, ::2, ::2], atol=1e-12)


def test_pooling_and_upsampling_values():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    np.testing.assert_array_equal(F.avg_pool2d(x, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    np.testing.assert_array_equal(F.global_avg_pool(x).data, [[7.5]])
    up = F.upsample_nearest(Tensor(np.array([[[[1.0, 2.0]]]])), 2).data
    np.testing.assert_array_equal(up[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])
    const = F.upsample_bilinear(Tensor(np.full((1, 2, 3, 3), 5.0)), (12, 12)).data
    np.testing.assert_allclose(const, 5.0, atol=1e-14)
    same = F.upsample_bilinear(x, (4, 4)).data
    np.testing.assert_allclose(same, x.data, atol=1e-14)


def test_batch_norm_training_and_eval(rng):
    bn = BatchNorm(3)
    x = Tensor(rng.normal(2.0, 3.0, size=(8, 3, 4, 4)))
    y = bn(x).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-4)
    m = x.data.mean(axis=(0, 2, 3))
    v = x.data.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(bn.running_mean, 0.1 * m, atol=1e-12)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * v, atol=1e-12)
    bn.eval()
    bn.running_mean[...] = 0.0
    bn.running_var[...] = 1.0 - bn.eps
    z = rng.normal(size=(5, 3))
    np.testing.assert_allclose(bn(Tensor(z)).data, z, atol=1e-12)


class _Net(Module):
    def __init__(self, rng):
        super().__init__()
        self.conv = Conv2d(rng, 2, 3, 3)
        self.fc = Linear(rng, 3, 2)
        self.bn = BatchNorm(3)


def test_module_state_roundtrip(rng):
    a, b = _Net(np.random.default_rng(0)), _Net(np.random.default_rng(1))
    assert not np.array_equal(a.conv.weight.data, b.conv.weight.data)
    a.bn.running_mean[...] = 3.0
    b.load_state_dict(a.state_dict())
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    np.testing.assert_array_equal(b.bn.running_mean, 3.0)
    bad = a.state_dict()
    bad.pop("fc.weight")
    with pytest.raises(KeyError):
        b.load_state_dict(bad)


def test_fan_in_init_bounds():
    conv = Conv2d(np.random.default_rng(0), 4, 8, 3)
    bound = np.sqrt(6.0 / (4 * 9))
    assert np.abs(conv.weight.data).max() <= bound


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    backward(F.sum_all(F.mul(p, Tensor(np.array([3.0, -1.0, 0.2])))))
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 0.4], atol=1e-7)
    state = opt.state_dict()
    opt2 = Adam([p], lr=0.1)
    opt2.load_state_dict(state)
    assert opt2.t == 1
    np.testing.assert_array_equal(opt2.m[0], opt.m[0])


def test_step_decay_schedule():
    assert step_decay_lr(1e-3, 0, 0.8, 500) == 1e-3
    assert step_decay_lr(1e-3, 499, 0.8, 500) == 1e-3
    assert step_decay_lr(1e-3, 500, 0.8, 500) == pytest.approx(8e-4, rel=1e-15)
    assert step_decay_lr(1e-3, 1000, 0.8, 500) == pytest.approx(6.4e-4, rel=1e-15)


def test_gradient_check_catches_corrupted_backward():
    def bad_square(x):
        return record("bad_square", x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,))

    rep = gradient_check(lambda t: F.sum_all(bad_square(t)), np.array([1.0, 2.0]))
    assert not rep.passed
    assert rep.max_rel_error > 0.1
