"""Gradient-substrate tests: op semantics plus the finite-difference oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from symseg.grad import GradError, NonFiniteError, ShapeError, Tape, Tensor, ops

from conftest import central_diff, max_rel_err


def run_grad_check(build, params, tol=1e-4, h=1e-5):
    """Backprop build() through a tape and compare every param grad with
    central differences of the same forward."""
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    for p in params:
        assert p.grad is not None, "parameter missed by backward"
        fd = central_diff(lambda: build().item(), p.data, h=h)
        assert max_rel_err(p.grad, fd) < tol


class TestTensor:
    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, np.nan])

    def test_scalar_shape_preserved(self):
        assert Tensor(3.0).shape == ()
        assert Tensor(3.0).item() == 3.0

    def test_grad_shape_matches(self):
        t = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            t.accumulate_grad(np.ones((3,)))


class TestTapeLifecycle:
    def test_backward_on_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
        with pytest.raises(GradError):
            tape.backward(y)

    def test_backward_twice(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = ops.sum_(ops.mul(x, x))
        tape.backward(y)
        with pytest.raises(GradError):
            tape.backward(y)

    def test_sum_grad_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(x)
        tape.backward(loss)
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_square_grad(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(ops.mul(x, x))
        tape.backward(loss)
        assert np.allclose(x.grad, [6.0])

    def test_no_recording_without_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = ops.mul(x, x)
        assert y.requires_grad  # flag propagates, but nothing was recorded
        with Tape() as tape:
            pass
        assert len(tape) == 0

    def test_fanout_accumulates(self):
        # loss = x*x + x  ->  grad = 2x + 1
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(ops.add(ops.mul(x, x), x))
        tape.backward(loss)
        assert np.allclose(x.grad, [5.0])

    def test_grad_additivity(self, rng):
        # grad of (f + g) equals grad f + grad g elementwise
        x0 = rng.normal(size=(3, 4))

        def grads(combine):
            x = Tensor(x0.copy(), requires_grad=True)
            with Tape() as tape:
                f = ops.sum_(ops.mul(x, x))
                g = ops.sum_(ops.exp(ops.mul(x, Tensor(0.3))))
                loss = combine(f, g)
            tape.backward(loss)
            return x.grad

        combined = grads(lambda f, g: ops.add(f, g))
        f_only = grads(lambda f, g: f)
        g_only = grads(lambda f, g: g)
        assert np.allclose(combined, f_only + g_only)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ops.sigmoid(Tensor(0.0)).item() == 0.5

    def test_softmax_uniform(self):
        out = ops.softmax(Tensor([0.0, 0.0, 0.0])).data
        assert np.allclose(out, [1 / 3] * 3)

    def test_softmax_bad_axis(self):
        with pytest.raises(ShapeError):
            ops.softmax(Tensor([1.0, 2.0]), axis=3)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_softmax_simplex(self, logits):
        out = ops.softmax(Tensor(logits)).data
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) < 1e-9

    def test_broadcast_add_bias(self):
        x = Tensor(np.zeros((2, 3)), requires_grad=True)
        b = Tensor(np.arange(3.0), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(ops.add(x, b))
        tape.backward(loss)
        assert np.array_equal(b.grad, [2.0, 2.0, 2.0])

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_non_finite_forward_aborts(self):
        with pytest.raises(NonFiniteError):
            ops.log(Tensor([0.0]))

    def test_batch_norm_two_point_batch(self):
        from symseg.layers import BatchNorm2d

        bn = BatchNorm2d(1)
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        out = bn(x, training=True).data.ravel()
        assert np.allclose(out, [-1.0, 1.0], atol=1e-4)

    def test_batch_norm_eval_uses_running_stats(self):
        from symseg.layers import BatchNorm2d

        bn = BatchNorm2d(1)
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
        out = bn(x, training=False).data.ravel()
        # fresh running stats are mean 0 / var 1
        assert np.allclose(out, [1.0, 3.0], atol=1e-4)


class TestConv2d:
    def test_scaling_identity(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.full((1, 1, 1, 1), 2.0))
        out = ops.conv2d(x, k, Tensor([0.0]))
        assert out.shape == (1, 1, 3, 3)
        assert np.allclose(out.data, 2.0)

    def test_hand_dot_product(self):
        x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        k = Tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        out = ops.conv2d(x, k)
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 5.0

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))),
                       Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))),
                       Tensor(np.zeros((1, 1, 5, 5))))

    def test_grad_matches_fd(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 5, 5)))
        k = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.3, requires_grad=True)
        b = Tensor(rng.normal(size=(4,)) * 0.1, requires_grad=True)

        def build():
            return ops.sum_(ops.conv2d(x, k, b, stride=2, padding=1))

        run_grad_check(build, [k, b], tol=1e-5)


class TestLstmStep:
    def test_zero_fixed_point(self):
        wx = Tensor(np.zeros((3, 8)))
        wh = Tensor(np.zeros((2, 8)))
        b = Tensor(np.zeros(8))
        h, c = ops.lstm_step(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 2))),
                             Tensor(np.zeros((1, 2))), wx, wh, b)
        assert np.all(h.data == 0) and np.all(c.data == 0)

    def test_zero_weights_carry_cell(self):
        wx = Tensor(np.zeros((1, 4)))
        wh = Tensor(np.zeros((1, 4)))
        b = Tensor(np.zeros(4))
        h, c = ops.lstm_step(Tensor([[0.0]]), Tensor([[0.0]]), Tensor([[1.0]]),
                             wx, wh, b)
        assert np.allclose(c.data, 0.5)
        assert np.allclose(h.data, 0.5 * np.tanh(0.5))

    def test_dimension_mismatch(self):
        wx = Tensor(np.zeros((3, 8)))
        wh = Tensor(np.zeros((2, 8)))
        b = Tensor(np.zeros(8))
        with pytest.raises(ShapeError):
            ops.lstm_step(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 2))),
                          Tensor(np.zeros((1, 2))), wx, wh, b)

    def test_bptt_three_steps_matches_fd(self, rng):
        wx = Tensor(rng.normal(size=(3, 8)) * 0.4, requires_grad=True)
        wh = Tensor(rng.normal(size=(2, 8)) * 0.4, requires_grad=True)
        b = Tensor(rng.normal(size=(8,)) * 0.1, requires_grad=True)
        xs = [rng.normal(size=(2, 3)) for _ in range(3)]

        def build():
            h = Tensor(np.zeros((2, 2)))
            c = Tensor(np.zeros((2, 2)))
            for x in xs:
                h, c = ops.lstm_step(Tensor(x), h, c, wx, wh, b)
            return ops.sum_(ops.mul(h, h))

        run_grad_check(build, [wx, wh, b], tol=1e-5)


class TestSpatialOps:
    def test_max_pool_routes_gradient(self):
        x = Tensor(np.array([[1.0, 2.0], [4.0, 3.0]]).reshape(1, 1, 2, 2),
                   requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(ops.max_pool2d(x, 2))
        tape.backward(loss)
        assert np.array_equal(x.grad.ravel(), [0, 0, 1, 0])

    def test_upsample_then_sum(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
        with Tape() as tape:
            up = ops.upsample2d(x, 2)
            loss = ops.sum_(up)
        tape.backward(loss)
        assert up.shape == (1, 1, 4, 4)
        assert np.array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))

    def test_global_avg_pool(self):
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
        out = ops.global_avg_pool(x)
        assert np.allclose(out.data, [[1.5, 5.5]])

    def test_broadcast_spatial_grad(self):
        v = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_(ops.broadcast_spatial(v, 3, 3))
        tape.backward(loss)
        assert np.array_equal(v.grad, [[9.0, 9.0]])


@pytest.mark.parametrize("seed", range(5))
def test_composite_graph_matches_fd(seed):
    """conv -> lstm -> softmax -> mean composite against the fd oracle."""
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 2, 4, 4)))
    k = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
    kb = Tensor(rng.normal(size=(3,)) * 0.1, requires_grad=True)
    wx = Tensor(rng.normal(size=(3, 16)) * 0.3, requires_grad=True)
    wh = Tensor(rng.normal(size=(4, 16)) * 0.3, requires_grad=True)
    b = Tensor(rng.normal(size=(16,)) * 0.1, requires_grad=True)
    params = [k, kb, wx, wh, b]

    def build():
        feat = ops.conv2d(x, k, kb, padding=1)
        pooled = ops.global_avg_pool(feat)          # [2, 3]
        h = Tensor(np.zeros((2, 4)))
        c = Tensor(np.zeros((2, 4)))
        for _ in range(2):
            h, c = ops.lstm_step(pooled, h, c, wx, wh, b)
        return ops.mean(ops.softmax(h, axis=-1))

    run_grad_check(build, params, tol=1e-4)
