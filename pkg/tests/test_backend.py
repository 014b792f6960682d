import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from refinet import backend as B
from refinet.backend import AdamState, Tensor


def naive_conv3x3(x, w, b):
    """Seven nested loops, zero padding 1."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    out = np.zeros((n, o, h, wd), dtype=np.float64)
    for bi in range(n):
        for oi in range(o):
            for i in range(h):
                for j in range(wd):
                    acc = float(b[oi])
                    for ci in range(c):
                        for u in range(3):
                            for v in range(3):
                                ii, jj = i + u - 1, j + v - 1
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += float(x[bi, ci, ii, jj]) * float(w[oi, ci, u, v])
                    out[bi, oi, i, j] = acc
    return out


def naive_matmul(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        for j in range(w.shape[0]):
            out[i, j] = b[j] + sum(float(x[i, k]) * float(w[j, k]) for k in range(x.shape[1]))
    return out


def t(a, grad=False):
    return B.parameter(a) if grad else Tensor(a)


class TestConv:
    def test_all_ones(self):
        out = B.conv3x3(t(np.ones((1, 1, 3, 3))), t(np.ones((1, 1, 3, 3))), t(np.zeros(1))).data
        assert out[0, 0, 1, 1] == 9.0
        for i, j in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out[0, 0, i, j] == 4.0

    def test_zero_kernel_gives_bias(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
        out = B.conv3x3(t(x), t(np.zeros((2, 3, 3, 3))), t([0.5, -1.25])).data
        assert np.all(out[:, 0] == 0.5) and np.all(out[:, 1] == -1.25)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        got = B.conv3x3(t(x), t(w), t(b)).data
        np.testing.assert_allclose(got, naive_conv3x3(x.astype(np.float32), w.astype(np.float32), b), atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(B.ShapeError, match="channel"):
            B.conv3x3(t(np.zeros((1, 2, 4, 4))), t(np.zeros((3, 4, 3, 3))), t(np.zeros(3)))

    def test_superposition(self):
        rng = np.random.default_rng(2)
        w = t(rng.normal(size=(3, 2, 3, 3)))
        zero_b = t(np.zeros(3))
        for _ in range(10):
            a, c = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(2, 2, 5, 5))
            lhs = B.conv3x3(t(a + c), w, zero_b).data
            rhs = B.conv3x3(t(a), w, zero_b).data + B.conv3x3(t(c), w, zero_b).data
            np.testing.assert_allclose(lhs, rhs, atol=1e-5)

    def test_zero_everything(self):
        out = B.conv3x3(t(np.random.default_rng(3).normal(size=(1, 2, 3, 3))), t(np.zeros((4, 2, 3, 3))), t(np.zeros(4)))
        assert not out.data.any()


class TestElu:
    def test_values(self):
        out = B.elu(t([0.0, 2.0, -1.0])).data
        assert out[0] == 0.0 and out[1] == 2.0
        assert out[2] == pytest.approx(math.exp(-1) - 1, abs=1e-6)

    @given(st.floats(-20, 20, allow_nan=False), st.floats(-20, 20, allow_nan=False))
    def test_monotone(self, a, b):
        lo, hi = sorted([a, b])
        out = B.elu(t([lo, hi])).data
        assert out[0] <= out[1]


class TestResize:
    def test_up(self):
        out = B.resize_nearest(t([[[[1, 2], [3, 4]]]]), 2, "up").data[0, 0]
        assert out.tolist() == [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]

    def test_down_inverts_up(self):
        up = B.resize_nearest(t([[[[1, 2], [3, 4]]]]), 2, "up")
        assert B.resize_nearest(up, 2, "down").data[0, 0].tolist() == [[1, 2], [3, 4]]

    def test_factor_one(self):
        x = np.random.default_rng(0).normal(size=(1, 3, 4, 4)).astype(np.float32)
        for d in ("up", "down"):
            np.testing.assert_array_equal(B.resize_nearest(t(x), 1, d).data, x)

    def test_non_divisible(self):
        with pytest.raises(B.ShapeError):
            B.resize_nearest(t(np.zeros((1, 1, 5, 4))), 2, "down")

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float32, st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(-1e6, 1e6, width=32)),
           st.integers(1, 4))
    def test_up_then_down_identity(self, x, k):
        back = B.resize_nearest(B.resize_nearest(t(x), k, "up"), k, "down").data
        np.testing.assert_array_equal(back, x)


class TestFullyConnected:
    def test_identity(self):
        x = np.arange(6, dtype=np.float32).reshape(2, 3)
        np.testing.assert_array_equal(B.fully_connected(t(x), t(np.eye(3)), t(np.zeros(3))).data, x)

    def test_zero_weight(self):
        out = B.fully_connected(t(np.ones((2, 3))), t(np.zeros((4, 3))), t([1, 2, 3, 4])).data
        assert out.tolist() == [[1, 2, 3, 4]] * 2

    def test_matches_hand_matmul(self):
        rng = np.random.default_rng(4)
        x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)
        got = B.fully_connected(t(x), t(w), t(b)).data
        f32 = [a.astype(np.float32) for a in (x, w, b)]
        np.testing.assert_allclose(got, naive_matmul(*f32), atol=1e-6)

    def test_mismatch(self):
        with pytest.raises(B.ShapeError):
            B.fully_connected(t(np.zeros((2, 3))), t(np.zeros((4, 5))), t(np.zeros(4)))


class TestL1Mean:
    def test_equal_is_zero(self):
        a = np.random.default_rng(0).normal(size=(2, 3))
        assert B.l1_mean(t(a), t(a)).item() == 0.0

    def test_small(self):
        assert B.l1_mean(t([0.0, 1.0]), t([1.0, 1.0])).item() == 0.5

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(2, 3, 4, 4)).astype(np.float32), rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        ref = sum(abs(float(x) - float(y)) for x, y in zip(a.ravel(), b.ravel())) / a.size
        assert B.l1_mean(t(a), t(b)).item() == pytest.approx(ref, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(B.ShapeError):
            B.l1_mean(t(np.zeros(3)), t(np.zeros(4)))

    @given(arrays(np.float32, 6, elements=st.floats(-100, 100, width=32)),
           arrays(np.float32, 6, elements=st.floats(-100, 100, width=32)))
    def test_symmetric_nonnegative(self, a, b):
        ab, ba = B.l1_mean(t(a), t(b)).item(), B.l1_mean(t(b), t(a)).item()
        assert ab == ba >= 0
        assert (ab == 0) == np.array_equal(a, b)


class TestBackward:
    def test_l1_against_zero(self):
        p = B.parameter(np.random.default_rng(0).uniform(0.1, 1.0, size=(2, 3, 4, 4)))
        B.backward(B.l1_mean(p, t(np.zeros(p.shape))))
        np.testing.assert_allclose(p.grad, np.full(p.shape, 1 / p.size), rtol=1e-6)

    def test_independent_param_has_zero_grad(self):
        p, q = B.parameter(np.ones((1, 1, 2, 2))), B.parameter(np.ones((1, 1, 2, 2)))
        loss = B.l1_mean(B.add(q, 0.0), t(np.zeros((1, 1, 2, 2))))
        B.backward(loss)
        assert p.grad is None or not p.grad.any()

    def test_non_scalar_rejected(self):
        with pytest.raises(B.ShapeError):
            B.backward(B.elu(B.parameter(np.ones((1, 1, 2, 2)))))

    def test_shared_subgraph_accumulates(self):
        p = B.parameter([[1.0, -2.0]])
        loss = B.l1_mean(p, t([[0.0, 0.0]])) + B.l1_mean(p, t([[0.0, 0.0]]))
        B.backward(loss)
        np.testing.assert_allclose(p.grad, [[1.0, -1.0]])

    def test_detach_blocks_gradient(self):
        p = B.parameter(np.full((1, 1, 2, 2), 0.5))
        B.backward(B.l1_mean(B.elu(p).detach(), t(np.zeros((1, 1, 2, 2)))))
        assert p.grad is None


def adam_reference(p, grad_fn, steps, lr, b1, b2, eps):
    """Scalar recurrence written out independently of the vectorized optimizer."""
    m = v = 0.0
    for k in range(1, steps + 1):
        g = grad_fn(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**k)) / (math.sqrt(v / (1 - b2**k)) + eps)
    return p


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = B.parameter(np.array([1.0, -2.0]))
        p.grad = np.zeros(2, dtype=np.float32)
        state = AdamState()
        B.adam_step({"p": p}, state)
        assert p.data.tolist() == [1.0, -2.0]
        assert state.t == 1

    def test_first_step_moves_by_lr(self):
        p = B.parameter(np.array(1.0))
        p.grad = np.array(1.0, dtype=np.float32)
        B.adam_step({"p": p}, AdamState(lr=0.001, beta1=0.5, beta2=0.999))
        assert p.item() == pytest.approx(0.999, abs=1e-6)

    def test_three_steps_on_quadratic(self):
        with B.precision(np.float64):
            p = B.parameter(np.array(2.0))
            state = AdamState(lr=0.1, beta1=0.5, beta2=0.999)
            for _ in range(3):
                p.grad = 2 * (p.data - 0.5)
                B.adam_step({"p": p}, state)
            got = p.item()
        want = adam_reference(2.0, lambda x: 2 * (x - 0.5), 3, 0.1, 0.5, 0.999, 1e-8)
        assert got == pytest.approx(want, abs=1e-6)
        assert state.t == 3

    def test_missing_grad(self):
        with pytest.raises(ValueError, match="no gradient"):
            B.adam_step({"w": B.parameter(np.ones(2))}, AdamState())

    def test_moment_shapes(self):
        p = B.parameter(np.ones((2, 3)))
        p.grad = np.ones((2, 3), dtype=np.float32)
        state = B.adam_step({"w": p}, AdamState())
        assert state.m["w"].shape == state.s["w"].shape == (2, 3)


def test_precision_mode_switches_dtype():
    assert Tensor([1.0]).data.dtype == np.float32
    with B.precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


def test_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(9)
    x = t(rng.normal(size=(2, 3, 4, 4)) * 50)
    h = B.elu(B.conv3x3(x, t(rng.normal(size=(2, 3, 3, 3))), t(np.zeros(2))))
    assert np.isfinite(h.data).all()
