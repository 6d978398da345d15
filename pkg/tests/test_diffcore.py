"""
Tests for the differentiable tensor core
"""

import numpy as np
import pytest

from app.relocalization.diffcore import Tape, Tensor, grad_check, ops
from app.relocalization.exceptions import DimensionError, GradCheckError

pytestmark = pytest.mark.unit

TOL = 1e-6


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestForward:
    def test_matmul_identity_and_values(self):
        A = Tensor(np.arange(9.0).reshape(3, 3))
        np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(3)), A).data, A.data)
        out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_softmax(self):
        np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
        big = ops.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(big))
        assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        y = ops.softmax(Tensor(rng.normal(size=(20, 7)) * 10), axis=-1).data
        assert np.max(np.abs(y.sum(axis=-1) - 1.0)) < 1e-12
        assert np.all((y > 0) & (y < 1))

    def test_layer_norm(self):
        gain, bias = Tensor(np.ones(4)), Tensor(np.zeros(4))
        np.testing.assert_array_equal(ops.layer_norm(Tensor(np.full((1, 4), 3.0)), gain, bias).data, 0.0)
        out = ops.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-5)

    def test_layer_norm_needs_two_columns(self):
        with pytest.raises(DimensionError):
            ops.layer_norm(Tensor([[1.0]]), Tensor(np.ones(1)), Tensor(np.zeros(1)))

    def test_concat(self):
        np.testing.assert_array_equal(ops.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data, [1.0, 2.0, 3.0])
        a = Tensor(np.ones((2, 3)))
        np.testing.assert_array_equal(ops.concat([a, Tensor(np.zeros((0, 3)))], axis=0).data, a.data)
        with pytest.raises(DimensionError):
            ops.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)

    def test_concat_gradient_is_ones(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((1, 3)), requires_grad=True)
        with Tape() as tape:
            out = ops.sum(ops.concat([a, b], axis=0))
        ga, gb = tape.gradient(out, [a, b])
        np.testing.assert_array_equal(ga, np.ones((2, 3)))
        np.testing.assert_array_equal(gb, np.ones((1, 3)))

    def test_mlp_identity_and_bias(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        identity = [(Tensor(np.eye(3)), Tensor(np.zeros(3)))]
        np.testing.assert_array_equal(ops.mlp_forward(x, identity).data, x.data)
        zero = [
            (Tensor(np.zeros((3, 4))), Tensor(np.ones(4))),
            (Tensor(np.zeros((4, 2))), Tensor([5.0, -2.0])),
        ]
        np.testing.assert_array_equal(ops.mlp_forward(x, zero).data, [[5.0, -2.0], [5.0, -2.0]])

    def test_mlp_chain_mismatch(self):
        with pytest.raises(DimensionError):
            ops.mlp_forward(Tensor(np.ones((1, 3))), [(Tensor(np.ones((4, 2))), Tensor(np.zeros(2)))])

    def test_elementwise(self):
        assert ops.tanh(Tensor(0.0)).item() == 0.0
        np.testing.assert_array_equal(ops.relu(Tensor([-3.0, 2.0])).data, [0.0, 2.0])
        np.testing.assert_array_equal(ops.abs(Tensor([-3.0, 2.0])).data, [3.0, 2.0])
        np.testing.assert_array_equal(ops.scale(Tensor([1.0, 2.0]), 3.0).data, [3.0, 6.0])
        np.testing.assert_array_equal(ops.add(Tensor([1.0]), 2.0).data, [3.0])

    def test_relu_derivative_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        with Tape() as tape:
            y = ops.sum(ops.relu(x))
        assert tape.gradient(y, [x])[0][0] == 0.0

    def test_float32_is_preserved(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32))
        assert ops.add(ops.scale(x, 0.5), 1.0).dtype == np.float32
        assert ops.softmax(x).dtype == np.float32

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(3)
        x, W = rng.normal(size=(5, 4)), rng.normal(size=(4, 4))

        def run():
            return ops.softmax(ops.matmul(Tensor(x), Tensor(W))).data

        assert np.array_equal(run(), run())

    def test_unreachable_source_gets_zero_gradient(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            out = ops.sum(a)
        assert np.array_equal(tape.gradient(out, [b])[0], np.zeros(2))

    def test_no_tape_records_nothing(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            pass
        ops.sum(a)
        assert len(tape) == 0


class TestGradients:
    """Tape gradients against central differences at float64."""

    def test_matmul(self):
        rng = np.random.default_rng(0)
        a, b = _param(rng, 4, 5), _param(rng, 5, 3)
        assert grad_check(lambda: ops.sum(ops.tanh(ops.matmul(a, b))), [a, b]).passed(TOL)

    def test_softmax(self):
        rng = np.random.default_rng(1)
        x = _param(rng, 8)
        w = rng.normal(size=8)
        assert grad_check(lambda: ops.sum(ops.mul(ops.softmax(x), w)), [x]).passed(TOL)

    def test_layer_norm(self):
        rng = np.random.default_rng(2)
        x, gain, bias = _param(rng, 1, 16), _param(rng, 16), _param(rng, 16)
        w = rng.normal(size=(1, 16))
        report = grad_check(lambda: ops.sum(ops.mul(ops.layer_norm(x, gain, bias), w)), [x, gain, bias])
        assert report.passed(TOL)

    def test_concat(self):
        rng = np.random.default_rng(3)
        a, b = _param(rng, 2, 3), _param(rng, 2, 2)
        w = rng.normal(size=(2, 5))
        assert grad_check(lambda: ops.sum(ops.mul(ops.concat([a, b], axis=1), w)), [a, b]).passed(TOL)

    def test_mlp(self):
        rng = np.random.default_rng(4)
        x = _param(rng, 3, 8)
        layers = [(_param(rng, 8, 16), _param(rng, 16)), (_param(rng, 16, 4), _param(rng, 4))]
        params = [x] + [t for layer in layers for t in layer]
        report = grad_check(lambda: ops.sum(ops.tanh(ops.mlp_forward(x, layers))), params)
        assert report.passed(TOL)

    @pytest.mark.parametrize("op", [ops.tanh, ops.relu, ops.abs, lambda x: ops.scale(x, -2.5), ops.huber])
    def test_elementwise(self, op):
        rng = np.random.default_rng(5)
        x = _param(rng, 10)
        w = rng.normal(size=10)
        assert grad_check(lambda: ops.sum(ops.mul(op(x), w)), [x]).passed(TOL)

    def test_binary_broadcast(self):
        rng = np.random.default_rng(6)
        a, b = _param(rng, 3, 4), _param(rng, 4)
        c = Tensor(rng.uniform(1.0, 2.0, size=(3, 4)), requires_grad=True)
        f = lambda: ops.sum(ops.div(ops.mul(ops.sub(ops.add(a, b), b), a), c))  # noqa: E731
        assert grad_check(f, [a, b, c]).passed(TOL)

    def test_norm_reshape_transpose_getitem(self):
        rng = np.random.default_rng(7)
        x = _param(rng, 2, 3, 4)

        def f():
            y = ops.transpose(ops.reshape(x, (6, 4)), (1, 0))
            return ops.sum(ops.norm(ops.getitem(y, (slice(None), np.array([0, 2, 2, 5]))), axis=0))

        assert grad_check(f, [x]).passed(TOL)

    def test_square_at_three(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)
        assert tape.gradient(y, [x])[0][0] == pytest.approx(6.0, abs=1e-8)
        report = grad_check(lambda: ops.mul(x, x), [x])
        assert report.max_rel_error < 1e-8

    def test_relu_kink_is_flagged(self):
        x = Tensor([0.0, 1.5, -2.0], requires_grad=True)
        report = grad_check(lambda: ops.sum(ops.relu(x)), [x])
        assert report.flagged == 1
        assert report.checked == 2
        assert report.passed(TOL)

    def test_non_finite_objective(self):
        x = Tensor([0.0], requires_grad=True)
        with pytest.raises(GradCheckError):
            grad_check(lambda: ops.div(1.0, x), [x])
