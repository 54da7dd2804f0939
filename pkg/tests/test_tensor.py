import math

import numpy as np
import pytest

from helpers import check_grads, conv2d_oracle, matmul_oracle, rel_err
from studyformer import tensor as T
from studyformer.errors import ContractError, DimensionError, FormatError
from studyformer.tensor import Tensor


def rnd(rng, *shape):
    return rng.standard_normal(shape)


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rnd(rng, 3, 3)
        out = T.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_allclose(out.data, a, rtol=0, atol=0)

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rnd(rng, 7, 5), rnd(rng, 5, 3)
        out = T.matmul(Tensor(a), Tensor(b))
        assert np.abs(out.data - matmul_oracle(a, b)).max() < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_batched_and_shared_weight(self):
        rng = np.random.default_rng(2)
        a = rnd(rng, 4, 3, 5)
        b = rnd(rng, 4, 5, 2)
        w = rnd(rng, 5, 2)
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, a @ b, atol=1e-14)
        out2 = T.matmul(Tensor(a), Tensor(w))
        np.testing.assert_allclose(out2.data, a @ w, atol=1e-14)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        a, b = rnd(rng, 4, 3), rnd(rng, 3, 2)
        r = rnd(rng, 4, 2)

        def loss(ta, tb):
            return T.reduce_sum(T.mul(T.matmul(ta, tb), Tensor(r)))

        check_grads(loss, [a, b])


class TestConv2d:
    def test_one_by_one_identity(self):
        rng = np.random.default_rng(0)
        x = rnd(rng, 2, 1, 5, 5)
        w = np.ones((1, 1, 1, 1))
        out = T.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, x, atol=0)

    def test_all_ones_kernel_constant_input(self):
        c = 0.7
        x = np.full((1, 1, 6, 6), c)
        w = np.ones((1, 1, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, 9 * c, atol=1e-12)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rnd(rng, 2, 3, 5, 5)
        w = rnd(rng, 4, 3, 3, 3)
        b = rnd(rng, 4)
        for stride, padding in [(1, 0), (1, 1), (2, 1), (2, 0)]:
            out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
            want = conv2d_oracle(x, w, b, stride=stride, padding=padding)
            assert np.abs(out.data - want).max() < 1e-10

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_gradients(self):
        rng = np.random.default_rng(5)
        x = rnd(rng, 1, 2, 5, 5)
        w = rnd(rng, 2, 2, 3, 3)
        b = rnd(rng, 2)
        r = rnd(rng, 1, 2, 3, 3)

        def loss(tx, tw, tb):
            return T.reduce_sum(T.mul(T.conv2d(tx, tw, tb, stride=2, padding=1), Tensor(r)))

        check_grads(loss, [x, w, b])


class TestSoftmax:
    def test_uniform_row(self):
        out = T.softmax(Tensor(np.zeros((4, 7))))
        np.testing.assert_allclose(out.data, 1.0 / 7, atol=1e-15)

    def test_analytic_two_entry(self):
        out = T.softmax(Tensor([0.0, math.log(2.0)]))
        np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-12)

    def test_dominant_entry(self):
        x = np.zeros(5)
        x[2] = 50.0
        out = T.softmax(Tensor(x))
        assert out.data[2] > 1 - 1e-9

    def test_rows_sum_to_one_large_magnitude(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-1e3, 1e3, size=(50, 9))
        out = T.softmax(Tensor(x))
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-6
        assert (out.data >= 0).all()

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = rnd(rng, 3, 5)
        r = rnd(rng, 3, 5)

        def loss(tx):
            return T.reduce_sum(T.mul(T.softmax(tx), Tensor(r)))

        check_grads(loss, [x])


class TestLayerNorm:
    def test_constant_row_is_zero(self):
        x = np.full((3, 8), 2.5)
        out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-9)

    def test_two_point_row(self):
        out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-6)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(8)
        x = rnd(rng, 4, 6)
        g = rnd(rng, 6)
        b = rnd(rng, 6)
        eps = 1e-5
        out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b), eps=eps)
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        want = g * (x - mu) / np.sqrt(var + eps) + b
        assert np.abs(out.data - want).max() < 1e-9

    def test_gradients(self):
        rng = np.random.default_rng(9)
        x = rnd(rng, 3, 6)
        g = rnd(rng, 6)
        b = rnd(rng, 6)
        r = rnd(rng, 3, 6)

        def loss(tx, tg, tb):
            return T.reduce_sum(T.mul(T.layer_norm(tx, tg, tb), Tensor(r)))

        check_grads(loss, [x, g, b])


class TestBackward:
    def test_sum_of_squares(self):
        rng = np.random.default_rng(10)
        x = rnd(rng, 4, 3)
        tx = Tensor(x, requires_grad=True)
        loss = T.reduce_sum(T.mul(tx, tx))
        loss.backward()
        np.testing.assert_allclose(tx.grad, 2 * x, atol=0)

    def test_constant_subgraph_contributes_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = T.reduce_sum(T.mul(x, 0.0))
        loss.backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.mul(x, 2.0).backward()

    def test_accumulation_through_reuse(self):
        x = Tensor(np.ones(4), requires_grad=True)
        loss = T.reduce_sum(T.add(x, x))
        loss.backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones(4))

    def test_accumulation_across_backward_calls(self):
        x = Tensor(np.ones(2), requires_grad=True)
        T.reduce_sum(x).backward()
        T.reduce_sum(x).backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones(2))

    def test_chain_matmul_softmax_bce_finite_differences(self):
        rng = np.random.default_rng(11)
        x = rnd(rng, 4, 3)
        w = rnd(rng, 3, 3)
        y = (rng.random((4, 3)) < 0.5).astype(np.float64)

        def loss(tx, tw):
            p = T.softmax(T.matmul(tx, tw))
            pc = T.clip(p, 1e-7, 1 - 1e-7)
            ll = T.add(T.mul(Tensor(y), T.log(pc)), T.mul(Tensor(1.0 - y), T.log(T.add(T.neg(pc), 1.0))))
            return T.neg(T.reduce_mean(ll))

        worst = check_grads(loss, [x, w], step=1e-5, rtol=1e-4)
        assert worst < 1e-4


class TestElementwiseOps:
    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_scalar_broadcast_allowed(self):
        out = T.add(Tensor(np.ones(3)), 2.0)
        np.testing.assert_array_equal(out.data, 3 * np.ones(3))

    def test_add_bias_suffix(self):
        rng = np.random.default_rng(12)
        x = rnd(rng, 2, 3, 4)
        b = rnd(rng, 4)
        p = rnd(rng, 3, 4)
        np.testing.assert_allclose(T.add_bias(Tensor(x), Tensor(b)).data, x + b)
        np.testing.assert_allclose(T.add_bias(Tensor(x), Tensor(p)).data, x + p)
        with pytest.raises(DimensionError):
            T.add_bias(Tensor(x), Tensor(np.zeros(5)))

    def test_maximum_ties_and_grad(self):
        a = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        b = Tensor(np.array([1.0, 5.0, 0.0]), requires_grad=True)
        out = T.maximum(a, b)
        np.testing.assert_array_equal(out.data, [1.0, 5.0, 3.0])
        T.reduce_sum(out).backward()
        np.testing.assert_array_equal(a.grad, [1.0, 0.0, 1.0])
        np.testing.assert_array_equal(b.grad, [0.0, 1.0, 0.0])

    def test_misc_gradients(self):
        rng = np.random.default_rng(13)
        x = rng.uniform(0.1, 2.0, size=(3, 4))
        r = rnd(rng, 3, 4)

        for fn in [
            lambda t: T.reduce_sum(T.mul(T.gelu(t), Tensor(r))),
            lambda t: T.reduce_sum(T.mul(T.sigmoid(t), Tensor(r))),
            lambda t: T.reduce_sum(T.mul(T.log(t), Tensor(r))),
            lambda t: T.reduce_sum(T.mul(T.powc(t, 1.7), Tensor(r))),
            lambda t: T.reduce_mean(T.mul(t, Tensor(r)), axis=1).sum(),
        ]:
            check_grads(fn, [x])

    def test_shape_op_gradients(self):
        rng = np.random.default_rng(14)
        x = rnd(rng, 2, 3, 4)
        r = rnd(rng, 3, 2, 4)

        def loss(t):
            y = T.transpose(t, (1, 0, 2))
            return T.reduce_sum(T.mul(y, Tensor(r)))

        check_grads(loss, [x])

        r2 = rnd(rng, 2, 2, 4)

        def loss2(t):
            y = T.narrow(t, 1, 1, 2)
            return T.reduce_sum(T.mul(y, Tensor(r2)))

        check_grads(loss2, [x])

        def loss3(t):
            y = T.concat([t, t], axis=2)
            return T.reduce_sum(T.mul(y, Tensor(np.concatenate([r2smear, r2smear], axis=2))))

        r2smear = rnd(rng, 2, 3, 4)
        check_grads(loss3, [x])

        def loss4(t):
            return T.reduce_sum(T.mul(T.tile_leading(t, 3), Tensor(rnd(np.random.default_rng(1), 3, 2, 3, 4))))

        check_grads(loss4, [x])

    def test_avg_pool(self):
        rng = np.random.default_rng(15)
        x = rnd(rng, 2, 3, 4, 4)
        out = T.avg_pool2d(Tensor(x), 2)
        want = x.reshape(2, 3, 2, 2, 2, 2).mean(axis=(3, 5))
        np.testing.assert_allclose(out.data, want)
        r = rnd(rng, 2, 3, 2, 2)
        check_grads(lambda t: T.reduce_sum(T.mul(T.avg_pool2d(t, 2), Tensor(r))), [x])

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(16)
        x = rng.uniform(-1e3, 1e3, size=(5, 6))
        for out in [
            T.softmax(Tensor(x)),
            T.sigmoid(Tensor(x)),
            T.gelu(Tensor(x)),
            T.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))),
        ]:
            assert np.isfinite(out.data).all()


class TestNoGrad:
    def test_no_tape_recorded(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert y._op == "leaf" and not y.requires_grad


class TestTensorFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(17)
        for dtype in (np.float64, np.float32):
            t = Tensor(rng.standard_normal((2, 3, 4)).astype(dtype))
            p = tmp_path / f"t_{np.dtype(dtype).name}.tnsr"
            T.write_tensor(p, t)
            back = T.read_tensor(p)
            assert back.dtype == np.dtype(dtype)
            np.testing.assert_array_equal(back.data, t.data)

    def test_header_format(self, tmp_path):
        p = tmp_path / "t.tnsr"
        T.write_tensor(p, Tensor(np.zeros((2, 3))))
        header = p.read_bytes().split(b"\n", 1)[0]
        assert header == b"TNSR v1 2 2 3 f64"

    def test_truncated_and_bad_magic(self, tmp_path):
        p = tmp_path / "t.tnsr"
        T.write_tensor(p, Tensor(np.zeros(4)))
        blob = p.read_bytes()
        with pytest.raises(FormatError):
            T.tensor_from_bytes(blob[:-3])
        with pytest.raises(FormatError):
            T.tensor_from_bytes(b"XXXX" + blob[4:])


def test_gradcheck_every_op_small_extents():
    """Analytic vs central finite differences for each differentiable op."""
    rng = np.random.default_rng(18)
    x = rng.uniform(0.2, 1.5, size=(4, 6))
    g = rng.standard_normal(6)
    b = rng.standard_normal(6)
    w = rng.standard_normal((6, 5))
    r45 = rng.standard_normal((4, 5))
    r46 = rng.standard_normal((4, 6))

    cases = [
        (lambda tx: T.reduce_sum(T.mul(T.matmul(tx, Tensor(w)), Tensor(r45))), [x]),
        (lambda tx: T.reduce_sum(T.mul(T.softmax(tx), Tensor(r46))), [x]),
        (lambda tx, tg, tb: T.reduce_sum(T.mul(T.layer_norm(tx, tg, tb), Tensor(r46))), [x, g, b]),
        (lambda tx: T.reduce_sum(T.mul(T.gelu(tx), Tensor(r46))), [x]),
        (lambda tx: T.reduce_sum(T.mul(T.sigmoid(tx), Tensor(r46))), [x]),
        (lambda tx: T.reduce_sum(T.mul(T.add_bias(tx, Tensor(b)), Tensor(r46))), [x]),
        (lambda tx: T.reduce_mean(T.mul(tx, tx)), [x]),
    ]
    for fn, arrays in cases:
        check_grads(fn, arrays)
