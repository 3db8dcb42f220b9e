import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypertta import autodiff as ad
from hypertta.autodiff import LN_AFFINE, Parameter, ShapeError, StaleTapeError, Tape, tag_filter


def numeric_grad(f, p: Parameter, h=1e-6):
    g = np.zeros_like(p.data)
    for i in np.ndindex(p.shape):
        old = p.data[i]
        p.data[i] = old + h
        up = float(f().data)
        p.data[i] = old - h
        down = float(f().data)
        p.data[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check_grads(f, params, rtol=1e-5, atol=1e-7):
    with Tape() as tape:
        loss = f()
    grads = tape.backward(loss)
    for p in params:
        np.testing.assert_allclose(grads[p.tag], numeric_grad(f, p), rtol=rtol, atol=atol, err_msg=p.tag)


def rand_param(tag, shape, seed):
    return Parameter(np.random.default_rng(seed).normal(size=shape), tag)


# --- forward values ------------------------------------------------------------------


def test_softmax_examples():
    out = ad.softmax_lastdim(np.array([[0.0, 0.0], [math.log(3.0), 0.0]])).data
    np.testing.assert_allclose(out, [[0.5, 0.5], [0.75, 0.25]])
    big = ad.softmax_lastdim(np.array([1000.0, 1000.0, 1000.0])).data
    np.testing.assert_allclose(big, [1 / 3] * 3)


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(ad.matmul(a, np.eye(3)).data, a)
    with pytest.raises(ShapeError):
        ad.matmul(a, np.eye(4))


def test_conv_1x1_equals_matmul():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 4, 5))
    k = rng.normal(size=(6, 3, 1, 1))
    expected = np.einsum("oc,bchw->bohw", k[:, :, 0, 0], x)
    np.testing.assert_allclose(ad.conv2d(x, k).data, expected, atol=1e-12)


def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(2).normal(size=(2, 5, 5))
    k = np.zeros((2, 2, 3, 3))
    k[0, 0, 1, 1] = k[1, 1, 1, 1] = 1.0
    np.testing.assert_allclose(ad.conv2d(x, k).data, x, atol=1e-12)


def brute_conv(x, k, b):
    n, c, h, w = x.shape
    o, _, kk, _ = k.shape
    r = kk // 2

    def refl(i, size):
        if size == 1:
            return 0
        while i < 0 or i >= size:
            i = -i if i < 0 else 2 * (size - 1) - i
        return i

    out = np.zeros((n, o, h, w))
    for bi in range(n):
        for oi in range(o):
            for y in range(h):
                for xx in range(w):
                    s = b[oi]
                    for ci in range(c):
                        for i in range(kk):
                            for j in range(kk):
                                s += k[oi, ci, i, j] * x[bi, ci, refl(y + i - r, h), refl(xx + j - r, w)]
                    out[bi, oi, y, xx] = s
    return out


@pytest.mark.parametrize("kk,h,w", [(3, 4, 5), (5, 5, 5), (7, 7, 7), (3, 1, 1), (7, 3, 3)])
def test_conv_matches_brute_force(kk, h, w):
    rng = np.random.default_rng(kk + h)
    x = rng.normal(size=(2, 3, h, w))
    k = rng.normal(size=(4, 3, kk, kk))
    b = rng.normal(size=4)
    np.testing.assert_allclose(ad.conv2d(x, k, b).data, brute_conv(x, k, b), atol=1e-10)


def test_conv_rejects_even_kernel():
    with pytest.raises(ShapeError):
        ad.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)))


def test_layernorm_examples():
    out = ad.layernorm(np.array([1.0, 2.0, 3.0]), np.ones(3), np.zeros(3), eps=0.0).data
    np.testing.assert_allclose(out, [-math.sqrt(1.5), 0.0, math.sqrt(1.5)])
    beta = np.array([0.3, -1.0, 2.0])
    out = ad.layernorm(np.array([4.0, 1.0, 9.0]), np.zeros(3), beta).data
    np.testing.assert_array_equal(out, beta)


def test_layernorm_moments():
    x = np.random.default_rng(3).normal(3.0, 5.0, size=(10, 16))
    out = ad.layernorm(x, np.ones(16), np.zeros(16)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-5)


# --- gradients against central differences --------------------------------------


def test_grad_elementwise_and_broadcast():
    a = rand_param("a", (3, 4), 0)
    b = rand_param("b", (4,), 1)
    c = rand_param("c", (3, 1), 2)

    def f():
        y = ad.mul(ad.sub(ad.add(a, b), c), ad.scale(a, 0.5))
        return ad.sum(ad.relu(y))

    check_grads(f, [a, b, c])


def test_grad_log_mean_reshape_transpose():
    a = Parameter(np.random.default_rng(4).uniform(0.5, 2.0, size=(2, 3, 4)), "a")

    def f():
        y = ad.transpose(ad.reshape(ad.log_clamped(a), (6, 4)), (1, 0))
        return ad.mean(ad.mul(y, y))

    check_grads(f, [a])


def test_grad_take_and_concat():
    a = rand_param("a", (3, 5), 5)
    b = rand_param("b", (3, 2), 6)

    def f():
        y = ad.concat([a, b], axis=1)
        z = ad.take(y, [0, 2, 2, 6], axis=1)
        return ad.sum(ad.mul(z, z))

    check_grads(f, [a, b])


def test_grad_matmul_batched_and_linear():
    x = rand_param("x", (2, 3, 4), 7)
    w = rand_param("w", (4, 5), 8)
    bias = rand_param("bias", (5,), 9)
    k = rand_param("k", (2, 5, 3), 10)

    def f():
        y = ad.linear(x, w, bias)
        return ad.sum(ad.matmul(y, k))

    check_grads(f, [x, w, bias, k])


def test_grad_softmax():
    a = rand_param("a", (3, 4), 11)
    t = np.random.default_rng(12).random((3, 4))

    def f():
        return ad.sum(ad.mul(ad.softmax_lastdim(a), t))

    check_grads(f, [a])


def test_grad_layernorm():
    x = rand_param("x", (2, 3, 6), 13)
    g = rand_param("g", (6,), 14)
    b = rand_param("b", (6,), 15)
    t = np.random.default_rng(16).normal(size=(2, 3, 6))

    def f():
        y = ad.layernorm(x, g, b)
        return ad.sum(ad.mul(ad.mul(y, y), t))

    check_grads(f, [x, g, b])


@pytest.mark.parametrize("kk", [1, 3, 5, 9])
def test_grad_conv2d(kk):
    x = rand_param("x", (2, 2, 4, 5), 17)
    k = rand_param("k", (3, 2, kk, kk), 18)
    b = rand_param("b", (3,), 19)
    t = np.random.default_rng(20).normal(size=(2, 3, 4, 5))

    def f():
        return ad.sum(ad.mul(ad.conv2d(x, k, b), t))

    check_grads(f, [x, k, b])


def test_grad_of_sum_gamma_x_is_x():
    x = np.array([1.0, -2.0, 3.0])
    gamma = Parameter(np.ones(3), "ln1.gamma")
    with Tape() as tape:
        loss = ad.sum(ad.mul(gamma, x))
    np.testing.assert_array_equal(tape.backward(loss)["ln1.gamma"], x)


@settings(max_examples=20, deadline=None)
@given(st.floats(-5, 5).filter(lambda v: abs(v) > 1e-3))
def test_gradient_is_linear_in_loss_scale(alpha):
    a = rand_param("a", (4,), 21)

    def grad(s):
        with Tape() as tape:
            loss = ad.scale(ad.sum(ad.mul(ad.softmax_lastdim(a), np.arange(4.0))), s)
        return tape.backward(loss)["a"]

    np.testing.assert_allclose(grad(alpha), alpha * grad(1.0), rtol=1e-12, atol=1e-15)


# --- tape semantics -----------------------------------------------------------------


def test_filter_restricts_updates_but_not_flow():
    w = Parameter(np.array([[2.0]]), "enc0.w")
    gamma = Parameter(np.array([3.0]), "ln1.gamma")
    with Tape() as tape:
        # gamma sits upstream of a frozen weight; its gradient must flow through w
        loss = ad.sum(ad.matmul(ad.reshape(ad.mul(gamma, np.array([5.0])), (1, 1)), w))
    grads = tape.backward(loss, LN_AFFINE)
    assert set(grads) == {"ln1.gamma"}
    assert grads["ln1.gamma"].tolist() == [10.0]
    assert np.all(w.grad == 0)


def test_untrainable_parameters_get_no_grad():
    p = Parameter(np.ones(2), "x", trainable=False)
    q = Parameter(np.ones(2), "y")
    with Tape() as tape:
        loss = ad.sum(ad.mul(p, q))
    assert set(tape.backward(loss)) == {"y"}
    assert np.all(p.grad == 0)


def test_tag_filter_globs():
    f = tag_filter("ln*.gamma")
    assert f(Parameter(0.0, "ln12.gamma")) and not f(Parameter(0.0, "ln1.beta"))


def test_stale_tape():
    a = Parameter(np.ones(2), "a")
    with Tape() as tape:
        loss = ad.sum(a)
    tape.backward(loss)
    with pytest.raises(StaleTapeError):
        tape.backward(loss)
    with pytest.raises(StaleTapeError):
        Tape().backward(loss)


def test_no_recording_outside_tape():
    a = Parameter(np.ones(2), "a")
    with Tape() as tape:
        pass
    ad.sum(a)
    assert len(tape) == 0


def test_non_scalar_loss_rejected():
    a = Parameter(np.ones(2), "a")
    with Tape() as tape:
        y = ad.scale(a, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(y)
