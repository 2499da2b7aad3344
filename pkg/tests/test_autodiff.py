import threading

import numpy as np
import pytest

from cbs import autodiff as ad
from cbs.autodiff import Parameter, Tape, grad_check, relative_error, zero_grads
from cbs.exceptions import ContractError
from cbs.models import build_simple_cnn3, init_params
from cbs.nn_ops import conv2d, linear, relu, softmax_cross_entropy
from cbs.smoothing import SmoothingConfig, build_kernel, depthwise_blur


def _grad(fn, x):
    p = Parameter(np.asarray(x, dtype=np.float64), "x")
    with Tape() as tape:
        loss = fn(p)
    tape.backward(loss)
    return p.grad


def test_relu_mask_gradient():
    x = np.array([-1.0, 0.0, 2.0, 3.0])
    g = _grad(lambda p: ad.sum_all(relu(p)), x)
    np.testing.assert_array_equal(g, [0, 0, 1, 1])


def test_product_rule():
    x = np.array([1.5, -2.0, 0.25])
    np.testing.assert_allclose(_grad(lambda p: ad.sum_all(ad.mul(p, p)), x), 2 * x)


def test_sum_and_half_square():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(_grad(ad.sum_all, x), np.ones_like(x))
    np.testing.assert_allclose(_grad(lambda p: ad.scale(ad.sum_all(ad.mul(p, p)), 0.5), x), x)


def test_three_op_chain_vs_central_differences():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=(4, 3))
    w = rng.normal(size=(3, 2))
    c = rng.normal(size=(4, 2))

    def f(p):
        return ad.sum_all(ad.mul(relu(linear(p, w)), c))

    analytic = _grad(f, x0)
    eps = 1e-3
    num = np.zeros_like(x0)
    for i in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += eps
        xm[i] -= eps
        num[i] = (f(ad.constant(xp)).value - f(ad.constant(xm)).value) / (2 * eps)
    assert relative_error(analytic, num, floor=1e-3).max() < 1e-3


def test_accumulation_doubles():
    x = np.random.default_rng(2).normal(size=(5,))
    p = Parameter(x.copy(), "x")
    zero_grads([p])
    for _ in range(2):
        with Tape() as tape:
            loss = ad.sum_all(ad.mul(p, p))
        tape.backward(loss)
    np.testing.assert_array_equal(p.grad, 2 * (2 * x))


def test_non_scalar_loss_rejected():
    p = Parameter(np.ones(3), "x")
    with Tape() as tape:
        out = ad.scale(p, 2.0)
    with pytest.raises(ContractError):
        tape.backward(out)


def test_no_recording_outside_tape():
    p = Parameter(np.ones(3), "x")
    node = ad.scale(p, 2.0)
    assert node.vjp is None and node.inputs == ()


def test_tapes_are_thread_local():
    results = {}

    def work(k):
        p = Parameter(np.full(4, float(k)), f"x{k}")
        with Tape() as tape:
            loss = ad.sum_all(ad.mul(p, p))
        tape.backward(loss)
        results[k] = (len(tape.nodes), p.grad.copy())

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k, (n, g) in results.items():
        assert n == 2
        np.testing.assert_array_equal(g, np.full(4, 2.0 * k))


def test_blur_backward_is_blur_of_upstream():
    rng = np.random.default_rng(3)
    x = Parameter(rng.normal(size=(2, 3, 9, 9)).astype(np.float32), "x")
    upstream = rng.normal(size=(2, 3, 9, 9)).astype(np.float32)
    k = build_kernel(1.0)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(depthwise_blur(x, k), upstream))
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, depthwise_blur(upstream, k), atol=1e-6)


def _params(rng, *shapes):
    return [Parameter(rng.normal(size=s), f"p{i}") for i, s in enumerate(shapes)]


@pytest.mark.parametrize("seed", range(5))
def test_grad_check_linear(seed):
    rng = np.random.default_rng(seed)
    w, b = _params(rng, (4, 3), (3,))
    x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, 5)
    rep = grad_check(lambda: softmax_cross_entropy(linear(x, w, b), y), params=[w, b], tol=1e-4)
    assert rep.passed, str(rep)


@pytest.mark.parametrize("seed", range(5))
def test_grad_check_conv(seed):
    rng = np.random.default_rng(seed)
    x = Parameter(rng.normal(size=(1, 1, 5, 5)), "x")
    w, b = _params(rng, (2, 1, 3, 3), (2,))
    c = rng.normal(size=(1, 2, 5, 5))
    rep = grad_check(lambda: ad.sum_all(ad.mul(conv2d(x, w, b, 1, 1), c)), params=[x, w, b], tol=1e-3)
    assert rep.passed, str(rep)


def test_grad_check_through_frozen_blur():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 1, 8, 8))
    w, b = _params(rng, (3, 1, 3, 3), (3,))
    c = rng.normal(size=(2, 3, 8, 8))
    k = build_kernel(1.0)
    rep = grad_check(lambda: ad.sum_all(ad.mul(depthwise_blur(conv2d(x, w, b, 1, 1), k), c)),
                     params=[w, b], tol=1e-3)
    assert rep.passed, str(rep)
    assert set(rep.errors) == {"p0", "p1"}  # the blur contributes no parameters


@pytest.mark.parametrize("placement", ["none", "after_every_conv"])
def test_full_simple_cnn3_grad_check(placement):
    model = build_simple_cnn3(1, 8, 3, SmoothingConfig(placement=placement), channels=(2, 3, 4))
    init_params(model, 0, zero_head=False)
    model.set_sigma(1.0)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, 1, 8, 8)), np.array([0, 2])
    rep = grad_check(model, (x, y), tol=1e-2)
    assert rep.passed, str(rep)
    assert rep.n_checked == model.n_params()


def test_grad_check_restores_parameters():
    model = build_simple_cnn3(1, 8, 2, channels=(2, 2, 2))
    init_params(model, 1, zero_head=False)
    before = model.state_dict()
    grad_check(model, (np.zeros((2, 1, 8, 8)), np.array([0, 1])), max_per_param=3)
    after = model.state_dict()
    for k in before:
        assert after[k].dtype == before[k].dtype
        np.testing.assert_array_equal(after[k], before[k])


def test_grad_check_detects_wrong_gradient():
    p = Parameter(np.array([1.0, 2.0]), "x")

    def broken():
        return ad.forward_record("bad", np.asarray((p.value**2).sum()), (p,), lambda g: (g * p.value,))

    rep = grad_check(broken, params=[p])
    assert not rep.passed and rep.worst[0] == "x"


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9)[()] == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0)[()] == pytest.approx(0.5)
