"""Adapter contracts: shape behavior, permutation invariance, oracle
agreement, parameter counting, gradients."""

from __future__ import annotations

import numpy as np
import pytest

from edje import autograd as ag
from edje.adapter import (
    CompressionAdapterParams,
    LocalAdapterParams,
    adapter_param_count,
    compress,
    local_project,
)
from edje.errors import ShapeError

from oracles import naive_compress, naive_local_project


def small_params(rng, tokens=4, d_vision=8, d_language=6, hidden=16, heads=2, **kw):
    return CompressionAdapterParams.init(
        rng, tokens=tokens, d_vision=d_vision, d_language=d_language,
        hidden=hidden, heads=heads, **kw,
    )


class TestCompress:
    def test_single_input_token_gives_identical_rows(self):
        rng = np.random.default_rng(20)
        params = small_params(rng)
        out = compress(ag.Tensor(rng.normal(size=(1, 8))), params)
        for row in out.data[1:]:
            np.testing.assert_allclose(row, out.data[0], atol=1e-12)

    @pytest.mark.parametrize("n", [1, 7, 50, 576])
    def test_output_shape_independent_of_input_count(self, n):
        rng = np.random.default_rng(21)
        params = small_params(rng)
        out = compress(ag.Tensor(rng.normal(size=(n, 8))), params)
        assert out.data.shape == (4, 6)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(22)
        params = small_params(rng)
        weights: list[np.ndarray] = []
        compress(ag.Tensor(rng.normal(size=(9, 8))), params, collect_weights=weights)
        assert len(weights) == params.heads
        for w in weights:
            np.testing.assert_allclose(w.sum(axis=1), np.ones(4), atol=1e-12)

    def test_permuting_input_rows_leaves_output_unchanged(self):
        rng = np.random.default_rng(23)
        params = small_params(rng)
        x = rng.normal(size=(11, 8))
        base = compress(ag.Tensor(x), params).data
        perm = rng.permutation(11)
        shuffled = compress(ag.Tensor(x[perm]), params).data
        np.testing.assert_allclose(shuffled, base, atol=1e-10)

    def test_matches_naive_oracle_at_full_size(self):
        rng = np.random.default_rng(24)
        params = CompressionAdapterParams.init(
            rng, tokens=64, d_vision=1024, d_language=384, hidden=256, heads=8
        )
        x = rng.normal(size=(576, 1024))
        got = compress(ag.Tensor(x), params).data
        want = naive_compress(x, params)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_width_mismatch_rejected(self):
        rng = np.random.default_rng(25)
        params = small_params(rng)
        with pytest.raises(ShapeError):
            compress(ag.Tensor(rng.normal(size=(3, 5))), params)

    def test_gradient_through_full_adapter(self):
        rng = np.random.default_rng(26)
        params = small_params(rng, tokens=2, d_vision=4, d_language=3, hidden=6, heads=2)
        x = ag.Tensor(rng.uniform(-1, 1, size=(3, 4)))
        tensors = list(params.named_tensors().values())
        err = ag.grad_check(lambda: ag.tsum(compress(x, params)), tensors + [x])
        assert err <= 1e-4


class TestLocalProject:
    def test_permutation_equivariance(self):
        rng = np.random.default_rng(27)
        params = LocalAdapterParams.init(rng, d_vision=8, d_language=5, hidden=12)
        x = rng.normal(size=(6, 8))
        perm = rng.permutation(6)
        base = local_project(ag.Tensor(x), params).data
        shuffled = local_project(ag.Tensor(x[perm]), params).data
        np.testing.assert_allclose(shuffled, base[perm], atol=1e-12)

    def test_zero_input_zero_bias_gives_zero(self):
        rng = np.random.default_rng(28)
        params = LocalAdapterParams.init(rng, d_vision=8, d_language=5, hidden=12, biases=False)
        out = local_project(ag.zeros((3, 8)), params)
        np.testing.assert_array_equal(out.data, np.zeros((3, 5)))

    def test_one_output_token_per_input_token(self):
        rng = np.random.default_rng(29)
        params = LocalAdapterParams.init(rng, d_vision=8, d_language=5, hidden=12)
        for n in (1, 4, 30):
            out = local_project(ag.Tensor(rng.normal(size=(n, 8))), params)
            assert out.data.shape == (n, 5)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(30)
        params = LocalAdapterParams.init(rng, d_vision=8, d_language=5, hidden=12)
        x = rng.normal(size=(3, 8))
        np.testing.assert_allclose(
            local_project(ag.Tensor(x), params).data,
            naive_local_project(x, params),
            atol=1e-10,
        )


class TestParamCount:
    def test_local_hand_arithmetic(self):
        rng = np.random.default_rng(31)
        params = LocalAdapterParams.init(rng, d_vision=4, d_language=2, hidden=8, biases=False)
        # norm gain+bias (4+4) plus the two weight matrices
        assert adapter_param_count(params) == 4 + 4 + 4 * 8 + 8 * 2

    def test_local_with_biases(self):
        rng = np.random.default_rng(32)
        params = LocalAdapterParams.init(rng, d_vision=4, d_language=2, hidden=8, biases=True)
        assert adapter_param_count(params) == 4 + 4 + 4 * 8 + 8 + 8 * 2 + 2

    def test_compression_includes_query_parameters(self):
        rng = np.random.default_rng(33)
        params = CompressionAdapterParams.init(
            rng, tokens=64, d_vision=1024, d_language=384, hidden=128, heads=8
        )
        count = adapter_param_count(params)
        assert count >= 64 * 1024
        expected = (
            64 * 1024            # queries
            + 1024 * 1024 * 2    # key/value projections
            + 1024 * 1024 + 1024 # attention output projection + bias
            + 1024 * 2           # norm gain/bias
            + 1024 * 128 + 128   # mlp in
            + 128 * 1024 + 1024  # mlp out
            + 1024 * 384         # final projection
        )
        assert count == expected

    def test_count_is_stable_across_runs(self):
        counts = set()
        for _ in range(3):
            rng = np.random.default_rng(34)
            counts.add(adapter_param_count(small_params(rng)))
        assert len(counts) == 1
