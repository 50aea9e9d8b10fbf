"""Forward values, gradient correctness, and determinism of the tensor engine."""

import math

import numpy as np
import pytest

from semidlab import tensor as T
from semidlab.checkpoint import CheckpointError, load_checkpoint, save_checkpoint

from fdcheck import assert_grads_close, fd_grad


class TestForwardValues:
    def test_matmul_identity(self):
        eye = T.constant(np.eye(2))
        np.testing.assert_array_equal(T.matmul(eye, eye).value, np.eye(2))

    def test_matmul_hand_case(self):
        a = T.constant([[1.0, 2.0], [3.0, 4.0]])
        b = T.constant([[1.0], [1.0]])
        np.testing.assert_array_equal(T.matmul(a, b).value, [[3.0], [7.0]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))

    def test_softmax_symmetry(self):
        out = T.softmax_rows(T.constant([[0.0, 0.0]]))
        np.testing.assert_array_equal(out.value, [[0.5, 0.5]])

    def test_softmax_forced_stabilization(self):
        out = T.softmax_rows(T.constant([[1000.0, 0.0]])).value
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_softmax_hand_case(self):
        out = T.softmax_rows(T.constant([[math.log(2.0), 0.0]])).value
        np.testing.assert_allclose(out, [[2.0 / 3.0, 1.0 / 3.0]], rtol=1e-15)

    def test_softmax_rows_sum_to_one_at_large_magnitude(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1e4, 1e4, size=(50, 7))
        s = T.softmax_rows(T.constant(x)).value
        np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all(s >= 0)

    def test_layernorm_constant_row_is_zero_before_affine(self):
        x = T.constant(np.full((1, 5), 3.7))
        out = T.layernorm(x, T.constant(np.ones(5)), T.constant(np.zeros(5)))
        np.testing.assert_array_equal(out.value, np.zeros((1, 5)))

    def test_layernorm_hand_case(self):
        # population variance of [1, -1] is 1, so the output is the input
        # shrunk by 1/sqrt(1 + eps)
        out = T.layernorm(
            T.constant([[1.0, -1.0]]), T.constant(np.ones(2)), T.constant(np.zeros(2))
        )
        expected = np.array([[1.0, -1.0]]) / math.sqrt(1.0 + T.LAYERNORM_EPS)
        np.testing.assert_allclose(out.value, expected, rtol=1e-15)

    def test_gather_sum_single_row(self):
        table = T.constant(np.arange(12.0).reshape(4, 3))
        np.testing.assert_array_equal(T.gather_sum(table, [2]).value, [6.0, 7.0, 8.0])

    def test_gather_sum_hand_case(self):
        table = T.constant([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(T.gather_sum(table, [0, 1]).value, [1.0, 1.0])

    def test_gather_sum_duplicate_rows_double(self):
        table = T.parameter(np.arange(6.0).reshape(3, 2))
        out = T.gather_sum(table, [1, 1])
        np.testing.assert_array_equal(out.value, 2.0 * table.value[1])
        loss = T.sum_all(out)
        T.backward(loss)
        expected = np.zeros((3, 2))
        expected[1] = 2.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_gather_sum_out_of_range(self):
        table = T.constant(np.ones((3, 2)))
        with pytest.raises(IndexError):
            T.gather_sum(table, [3])

    def test_gather_groups_empty_group_is_zero_row(self):
        table = T.constant(np.arange(6.0).reshape(3, 2))
        out = T.gather_groups(table, [[0, 2], []])
        np.testing.assert_array_equal(out.value, [[4.0, 6.0], [0.0, 0.0]])

    def test_sigmoid_zero(self):
        assert T.sigmoid(T.constant([0.0])).value[0] == 0.5

    def test_sigmoid_saturates_without_overflow(self):
        assert T.sigmoid(T.constant([1000.0])).value[0] == 1.0
        assert T.sigmoid(T.constant([-1000.0])).value[0] == 0.0

    def test_relu_negative_has_zero_gradient(self):
        x = T.parameter([-3.0])
        out = T.relu(x)
        assert out.value[0] == 0.0
        T.backward(T.sum_all(out))
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_concat_rows_and_transpose(self):
        a = T.constant([[1.0, 2.0]])
        b = T.constant([[3.0, 4.0], [5.0, 6.0]])
        out = T.concat_rows([a, b])
        np.testing.assert_array_equal(out.value, [[1, 2], [3, 4], [5, 6]])
        np.testing.assert_array_equal(T.transpose(out).value, out.value.T)

    def test_pairwise_dot_upper_order(self):
        x = T.constant(np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 1.0]]))
        out = T.pairwise_dot_upper(x).value
        np.testing.assert_array_equal(out, [0.0, 3.0, 2.0])


class TestBackward:
    def test_grad_of_sum_is_ones(self):
        w = T.parameter(np.arange(6.0).reshape(2, 3))
        T.backward(T.sum_all(w))
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_grad_of_sum_of_product_wrt_a_is_ones_bt(self):
        rng = np.random.default_rng(1)
        a = T.parameter(rng.normal(size=(3, 4)))
        bval = rng.normal(size=(4, 2))
        b = T.constant(bval)
        T.backward(T.sum_all(T.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ bval.T, rtol=1e-12)
        fd = fd_grad(lambda: T.matmul(a, b).value.sum(), a.value)
        assert_grads_close(a.grad, fd)

    def test_reconstruction_loss_matches_fd(self):
        # loss = ||x - Wx||^2 with the spec's step size h=1e-3
        rng = np.random.default_rng(2)
        w = T.parameter(rng.normal(size=(4, 4)) * 0.3)
        xval = rng.normal(size=(4, 1))

        def loss_tensor():
            x = T.constant(xval)
            return T.sum_sq(T.sub(x, T.matmul(w, x)))

        loss = loss_tensor()
        T.backward(loss)
        fd = fd_grad(lambda: loss_tensor().value.item(), w.value, h=1e-3)
        assert_grads_close(w.grad, fd, rtol=1e-4, floor=1e-7)

    def test_backward_requires_scalar(self):
        w = T.parameter(np.ones((2, 2)))
        with pytest.raises(T.GraphError):
            T.backward(T.matmul(w, w))

    def test_backward_deterministic_bit_identical(self):
        def run():
            rng = np.random.default_rng(3)
            w = T.parameter(rng.normal(size=(3, 3)))
            x = T.constant(rng.normal(size=(3, 2)))
            loss = T.mean(T.sigmoid(T.matmul(w, x)))
            T.backward(loss)
            return loss.value.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(g1, g2)


def _rand(rng, *shape):
    return rng.normal(size=shape)


# every registered operation, exercised on random 3x4-ish inputs
OP_CASES = {
    "matmul_a": lambda rng, p: T.matmul(p, T.constant(_rand(rng, 4, 2))),
    "matmul_b": lambda rng, p: T.matmul(T.constant(_rand(rng, 2, 3)), p),
    "softmax_rows": lambda rng, p: T.softmax_rows(p),
    "layernorm_x": lambda rng, p: T.layernorm(
        p, T.constant(_rand(rng, 4)), T.constant(_rand(rng, 4))
    ),
    "gather_sum": lambda rng, p: T.gather_sum(p, [0, 2, 2]),
    "gather_groups": lambda rng, p: T.gather_groups(p, [[0, 1], [], [2, 2]]),
    "add": lambda rng, p: T.add(p, T.constant(_rand(rng, 3, 4))),
    "sub": lambda rng, p: T.sub(T.constant(_rand(rng, 3, 4)), p),
    "mul": lambda rng, p: T.mul(p, T.constant(_rand(rng, 3, 4))),
    "relu": lambda rng, p: T.relu(p),
    "sigmoid": lambda rng, p: T.sigmoid(p),
    "scale": lambda rng, p: T.scale(p, -2.5),
    "transpose": lambda rng, p: T.transpose(p),
    "concat_rows": lambda rng, p: T.concat_rows([p, T.constant(_rand(rng, 2, 4))]),
    "mean": lambda rng, p: T.mean(p),
    "sum_all": lambda rng, p: T.sum_all(p),
    "sum_sq": lambda rng, p: T.sum_sq(p),
    "add_rowvec_m": lambda rng, p: T.add_rowvec(p, T.constant(_rand(rng, 4))),
    "reshape": lambda rng, p: T.reshape(p, (4, 3)),
    "concat_flat": lambda rng, p: T.concat_flat([p, T.constant(_rand(rng, 5))]),
    "pairwise_dot_upper": lambda rng, p: T.pairwise_dot_upper(p),
    "bce_with_logits": lambda rng, p: T.bce_with_logits(
        p, (rng.random(size=(3, 4)) > 0.5).astype(float)
    ),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    """Reverse-mode vs central differences, 1e-4 relative with 1e-7 floor."""
    build = OP_CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    pval = rng.normal(size=(3, 4))
    if name == "relu":
        pval += np.sign(pval)  # keep inputs away from the kink
    p = T.parameter(pval.copy())
    weights = np.random.default_rng(7).normal(size=build(np.random.default_rng(0), p).value.shape)

    def scalar():
        out = build(np.random.default_rng(0), p)
        return float((out.value * weights).sum())

    out = build(np.random.default_rng(0), p)
    loss = T.sum_all(T.mul(out, T.constant(weights)))
    T.backward(loss)
    fd = fd_grad(scalar, p.value)
    assert_grads_close(p.grad, fd, rtol=1e-4, floor=1e-7)


def test_layernorm_affine_params_match_fd():
    rng = np.random.default_rng(11)
    x = T.constant(rng.normal(size=(3, 4)))
    gain = T.parameter(rng.normal(size=4))
    bias = T.parameter(rng.normal(size=4))
    weights = rng.normal(size=(3, 4))

    def scalar():
        return float((T.layernorm(x, gain, bias).value * weights).sum())

    T.backward(T.sum_all(T.mul(T.layernorm(x, gain, bias), T.constant(weights))))
    assert_grads_close(gain.grad, fd_grad(scalar, gain.value))
    assert_grads_close(bias.grad, fd_grad(scalar, bias.value))


class TestOptimizers:
    def test_sgd_step(self):
        p = T.parameter(np.array([1.0, 2.0]))
        p.grad = np.array([0.5, -1.0])
        T.SGD([p], lr=0.1).step()
        np.testing.assert_allclose(p.value, [0.95, 2.1])

    def test_adam_first_step_moves_by_lr(self):
        # with bias correction the first Adam step is lr * sign(grad)
        p = T.parameter(np.array([1.0, -1.0]))
        p.grad = np.array([0.3, -0.2])
        T.Adam([p], lr=0.01).step()
        np.testing.assert_allclose(p.value, [1.0 - 0.01, -1.0 + 0.01], atol=1e-6)

    def test_zero_lr_leaves_params_unchanged(self):
        p = T.parameter(np.array([1.0]))
        p.grad = np.array([123.0])
        opt = T.Adam([p], lr=0.0)
        opt.step()
        np.testing.assert_array_equal(p.value, [1.0])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        params = {
            "enc.w": rng.normal(size=(7, 3)),
            "enc.b": rng.normal(size=3),
            "scalar": np.array(math.pi),
        }
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, meta={"seed": 5, "config_hash": "abc"})
        loaded, meta = load_checkpoint(path)
        assert meta == {"seed": 5, "config_hash": "abc"}
        assert list(loaded) == list(params)
        for name in params:
            assert loaded[name].shape == params[name].shape
            assert np.array_equal(loaded[name], params[name])
            assert loaded[name].tobytes() == params[name].tobytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_accepts_tensors(self, tmp_path):
        p = T.parameter(np.eye(2), name="w")
        path = tmp_path / "t.ckpt"
        save_checkpoint(path, {"w": p})
        loaded, _ = load_checkpoint(path)
        assert np.array_equal(loaded["w"], np.eye(2))
