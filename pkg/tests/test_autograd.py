"""Primitive ops: forward values against oracles, gradients against
central finite differences."""

from __future__ import annotations

import math

import numpy as np
import pytest

from edje import autograd as ag
from edje.errors import NumericError, ShapeError

from oracles import naive_gelu, naive_layer_norm, naive_mha, naive_softmax_rows


def tensor_of(rng, *shape):
    return ag.Tensor(rng.uniform(-1.0, 1.0, size=shape))


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = tensor_of(rng, 3, 3)
        eye = ag.Tensor(np.eye(3))
        np.testing.assert_array_equal(ag.matmul(a, eye).data, a.data)

    def test_hand_case(self):
        a = ag.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = ag.Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(ag.matmul(a, b).data, [[3.0], [7.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(ag.zeros((2, 3)), ag.zeros((2, 3)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        a = tensor_of(rng, 4, 5)
        b = tensor_of(rng, 5, 3)
        err = ag.grad_check(lambda: ag.tsum(ag.matmul(a, b)), [a, b])
        assert err <= 1e-6

    def test_backward_formula(self):
        # dA = dC @ B^T and dB = A^T @ dC for loss sum(C)
        rng = np.random.default_rng(2)
        a = tensor_of(rng, 3, 4)
        b = tensor_of(rng, 4, 2)
        tape = ag.Tape()
        with ag.record(tape):
            loss = ag.tsum(ag.matmul(a, b))
        tape.backward(loss)
        ones = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, ones @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ ones, atol=1e-12)


class TestRowSoftmax:
    def test_uniform_on_constant_row(self):
        out = ag.row_softmax(ag.Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)

    def test_large_inputs_do_not_overflow(self):
        out = ag.row_softmax(ag.Tensor([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            x = rng.normal(0, 3, size=(3, 4))
            out = ag.row_softmax(ag.Tensor(x))
            np.testing.assert_allclose(out.data.sum(axis=1), np.ones(3), atol=1e-12)
            np.testing.assert_allclose(out.data, naive_softmax_rows(x), atol=1e-12)

    def test_nan_input_raises(self):
        with pytest.raises(NumericError):
            ag.row_softmax(ag.Tensor([[np.nan, 0.0]]))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = tensor_of(rng, 3, 4)
        w = ag.Tensor(rng.uniform(-1, 1, size=(3, 4)))
        err = ag.grad_check(lambda: ag.tsum(ag.mul(ag.row_softmax(x), w)), [x])
        assert err <= 1e-6


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = ag.Tensor([[5.0, 5.0, 5.0, 5.0]])
        out = ag.layer_norm(x, ag.ones((4,)), ag.zeros((4,)))
        np.testing.assert_allclose(out.data, np.zeros((1, 4)), atol=1e-12)

    def test_zero_gain_yields_bias(self):
        rng = np.random.default_rng(5)
        x = tensor_of(rng, 2, 4)
        bias = tensor_of(rng, 4)
        out = ag.layer_norm(x, ag.zeros((4,)), bias)
        np.testing.assert_allclose(out.data, np.broadcast_to(bias.data, (2, 4)), atol=1e-15)

    def test_matches_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 5))
        gain = rng.normal(size=5)
        bias = rng.normal(size=5)
        out = ag.layer_norm(ag.Tensor(x), ag.Tensor(gain), ag.Tensor(bias))
        np.testing.assert_allclose(out.data, naive_layer_norm(x, gain, bias), atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(7)
        x = tensor_of(rng, 3, 4)
        gain = tensor_of(rng, 4)
        bias = tensor_of(rng, 4)
        w = ag.Tensor(rng.uniform(-1, 1, size=(3, 4)))
        err = ag.grad_check(
            lambda: ag.tsum(ag.mul(ag.layer_norm(x, gain, bias), w)), [x, gain, bias]
        )
        assert err <= 1e-5


class TestGelu:
    def test_zero(self):
        assert ag.gelu(ag.Tensor(0.0)).item() == 0.0

    def test_reflection_identity(self):
        # gelu(x) - gelu(-x) = x; holds exactly for the tanh form too
        xs = np.linspace(-3.0, 3.0, 61)
        plus = ag.gelu(ag.Tensor(xs)).data
        minus = ag.gelu(ag.Tensor(-xs)).data
        np.testing.assert_allclose(plus - minus, xs, atol=1e-6)

    def test_matches_oracle(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(4, 3))
        np.testing.assert_allclose(ag.gelu(ag.Tensor(x)).data, naive_gelu(x), atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(9)
        x = tensor_of(rng, 3, 4)
        err = ag.grad_check(lambda: ag.tsum(ag.gelu(x)), [x])
        assert err <= 1e-6


class TestMultiHeadAttention:
    def test_single_key_gets_full_weight(self):
        rng = np.random.default_rng(10)
        q = tensor_of(rng, 5, 8)
        k = tensor_of(rng, 1, 8)
        v = tensor_of(rng, 1, 8)
        weights: list[np.ndarray] = []
        out = ag.multi_head_attention(q, k, v, heads=2, collect_weights=weights)
        for w in weights:
            np.testing.assert_allclose(w, np.ones((5, 1)), atol=1e-15)
        # every output row equals the single value row
        np.testing.assert_allclose(out.data, np.broadcast_to(v.data, (5, 8)), atol=1e-12)

    def test_orthonormal_self_attention_rows_normalized(self):
        q = ag.Tensor(np.eye(4))
        weights: list[np.ndarray] = []
        ag.multi_head_attention(q, q, q, heads=1, collect_weights=weights)
        np.testing.assert_allclose(weights[0].sum(axis=1), np.ones(4), atol=1e-12)

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(11)
        q = rng.uniform(-1, 1, size=(3, 8))
        k = rng.uniform(-1, 1, size=(5, 8))
        v = rng.uniform(-1, 1, size=(5, 8))
        w_out = rng.uniform(-1, 1, size=(8, 8))
        got = ag.multi_head_attention(
            ag.Tensor(q), ag.Tensor(k), ag.Tensor(v), heads=4, w_out=ag.Tensor(w_out)
        )
        want = naive_mha(q, k, v, heads=4, w_out=w_out)
        np.testing.assert_allclose(got.data, want, atol=1e-10)

    def test_single_head_identity_projection_equals_naive(self):
        rng = np.random.default_rng(12)
        q = rng.uniform(-1, 1, size=(4, 6))
        k = rng.uniform(-1, 1, size=(7, 6))
        v = rng.uniform(-1, 1, size=(7, 6))
        got = ag.multi_head_attention(ag.Tensor(q), ag.Tensor(k), ag.Tensor(v), heads=1)
        np.testing.assert_allclose(got.data, naive_mha(q, k, v, heads=1), atol=1e-10)

    def test_indivisible_heads_rejected(self):
        q = ag.zeros((2, 6))
        with pytest.raises(ShapeError):
            ag.multi_head_attention(q, q, q, heads=4)

    def test_key_bias_masks_out_keys(self):
        rng = np.random.default_rng(13)
        q = tensor_of(rng, 2, 4)
        k = tensor_of(rng, 3, 4)
        v = tensor_of(rng, 3, 4)
        bias = np.array([0.0, 0.0, -np.inf])
        out_masked = ag.multi_head_attention(q, k, v, heads=2, key_bias=bias)
        k2 = ag.Tensor(k.data[:2])
        v2 = ag.Tensor(v.data[:2])
        out_direct = ag.multi_head_attention(q, k2, v2, heads=2)
        np.testing.assert_allclose(out_masked.data, out_direct.data, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(14)
        q = tensor_of(rng, 3, 4)
        k = tensor_of(rng, 5, 4)
        v = tensor_of(rng, 5, 4)
        w_out = tensor_of(rng, 4, 4)
        err = ag.grad_check(
            lambda: ag.tsum(ag.multi_head_attention(q, k, v, heads=2, w_out=w_out)),
            [q, k, v, w_out],
        )
        assert err <= 1e-4


class TestElementwiseGradients:
    @pytest.mark.parametrize(
        "name",
        ["add", "sub", "mul", "div", "softplus", "tsum", "tmean", "sqrt", "pick", "take"],
    )
    def test_gradient(self, name):
        rng = np.random.default_rng(hash(name) % 2**32)
        a = tensor_of(rng, 3, 4)
        b = ag.Tensor(rng.uniform(0.5, 1.5, size=(3, 4)))
        if name == "add":
            fn = lambda: ag.tsum(ag.add(a, b))
        elif name == "sub":
            fn = lambda: ag.tsum(ag.sub(a, b))
        elif name == "mul":
            fn = lambda: ag.tsum(ag.mul(a, b))
        elif name == "div":
            fn = lambda: ag.tsum(ag.div(a, b))
        elif name == "softplus":
            fn = lambda: ag.tsum(ag.softplus(a))
        elif name == "tsum":
            fn = lambda: ag.tsum(a)
        elif name == "tmean":
            fn = lambda: ag.tmean(a)
        elif name == "sqrt":
            fn = lambda: ag.tsum(ag.sqrt(b))
        elif name == "pick":
            fn = lambda: ag.tsum(ag.pick(a, [0, 1, 2], [3, 0, 2]))
        else:
            fn = lambda: ag.tsum(ag.take_rows(a, [2, 0, 2]))
        err = ag.grad_check(fn, [a, b])
        assert err <= 1e-6, name

    def test_bias_broadcast_gradient(self):
        rng = np.random.default_rng(15)
        a = tensor_of(rng, 3, 4)
        bias = tensor_of(rng, 4)
        err = ag.grad_check(lambda: ag.tsum(ag.add(a, bias)), [a, bias])
        assert err <= 1e-6

    def test_log_softmax_gradient(self):
        rng = np.random.default_rng(16)
        x = tensor_of(rng, 3, 5)
        fn = lambda: ag.neg(ag.tmean(ag.pick(ag.row_log_softmax(x), [0, 1, 2], [1, 4, 0])))
        err = ag.grad_check(fn, [x])
        assert err <= 1e-6

    def test_concat_gradients(self):
        rng = np.random.default_rng(17)
        a = tensor_of(rng, 2, 3)
        b = tensor_of(rng, 4, 3)
        c = tensor_of(rng, 2, 5)
        err_rows = ag.grad_check(lambda: ag.tsum(ag.concat_rows([a, b])), [a, b])
        err_cols = ag.grad_check(
            lambda: ag.tmean(ag.gelu(ag.concat_cols([a, c]))), [a, c]
        )
        assert err_rows <= 1e-6 and err_cols <= 1e-6


class TestTape:
    def test_sum_gradient_is_all_ones(self):
        x = ag.Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        tape = ag.Tape()
        with ag.record(tape):
            loss = ag.tsum(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
        # finite differences agree up to float noise
        assert ag.grad_check(lambda: ag.tsum(x), [x]) <= 1e-9

    def test_every_participant_gets_a_buffer(self):
        a = ag.Tensor([[1.0, 2.0]])
        unused = ag.Tensor([[3.0, 4.0]])
        tape = ag.Tape()
        with ag.record(tape):
            loss = ag.tsum(a)
            ag.tsum(unused)  # participates in the pass, not in the loss
        tape.backward(loss)
        assert unused.grad is not None
        np.testing.assert_array_equal(unused.grad, np.zeros((1, 2)))

    def test_reuse_accumulates(self):
        a = ag.Tensor([[2.0]])
        tape = ag.Tape()
        with ag.record(tape):
            loss = ag.tsum(ag.add(a, a))
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [[2.0]])

    def test_non_finite_loss_rejected(self):
        with pytest.raises(NumericError):
            ag.Tape().backward(ag.Tensor(np.inf))

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(18)
        x = rng.normal(size=(6, 6))
        w = rng.normal(size=(6, 6))
        first = ag.multi_head_attention(
            ag.Tensor(x), ag.Tensor(x), ag.Tensor(x), heads=3, w_out=ag.Tensor(w)
        )
        second = ag.multi_head_attention(
            ag.Tensor(x), ag.Tensor(x), ag.Tensor(x), heads=3, w_out=ag.Tensor(w)
        )
        assert np.array_equal(first.data, second.data)
