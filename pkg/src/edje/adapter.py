"""Vision-to-language adapters.

Two variants bridge cached vision tokens into the language embedding
space: a per-token MLP ("local", one output token per input token) and a
token-compression adapter that cross-attends a fixed set of learnable
query tokens over the input and always emits that many tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError


@dataclass
class CompressionAdapterParams:
    """Learnable queries, K/V projections, attention output projection,
    residual MLP block, and the final language-space projection.

    The attention output projection and the MLP biases are toggles
    (fields set to None when disabled); defaults keep both on.
    """

    queries: Tensor          # m x d_vision
    w_key: Tensor            # d_vision x d_vision
    w_value: Tensor          # d_vision x d_vision
    w_attn_out: Tensor | None
    b_attn_out: Tensor | None
    norm_gain: Tensor        # d_vision
    norm_bias: Tensor
    w_mlp_in: Tensor         # d_vision x hidden
    b_mlp_in: Tensor | None
    w_mlp_out: Tensor        # hidden x d_vision
    b_mlp_out: Tensor | None
    w_project: Tensor        # d_vision x d_language, no bias
    heads: int

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        tokens: int,
        d_vision: int,
        d_language: int,
        hidden: int = 8192,
        heads: int = 8,
        output_projection: bool = True,
        biases: bool = True,
    ) -> "CompressionAdapterParams":
        if tokens < 1:
            raise ShapeError(f"need at least one query token, got {tokens}")
        if d_vision % heads != 0:
            raise ShapeError(f"vision width {d_vision} not divisible by {heads} heads")
        return cls(
            queries=ag.gaussian(rng, (tokens, d_vision)),
            w_key=ag.fan_in_gaussian(rng, (d_vision, d_vision)),
            w_value=ag.fan_in_gaussian(rng, (d_vision, d_vision)),
            w_attn_out=ag.fan_in_gaussian(rng, (d_vision, d_vision)) if output_projection else None,
            b_attn_out=ag.zeros((d_vision,)) if output_projection and biases else None,
            norm_gain=ag.ones((d_vision,)),
            norm_bias=ag.zeros((d_vision,)),
            w_mlp_in=ag.fan_in_gaussian(rng, (d_vision, hidden)),
            b_mlp_in=ag.zeros((hidden,)) if biases else None,
            w_mlp_out=ag.fan_in_gaussian(rng, (hidden, d_vision)),
            b_mlp_out=ag.zeros((d_vision,)) if biases else None,
            w_project=ag.fan_in_gaussian(rng, (d_vision, d_language)),
            heads=heads,
        )

    @property
    def tokens(self) -> int:
        return self.queries.data.shape[0]

    @property
    def d_vision(self) -> int:
        return self.queries.data.shape[1]

    @property
    def d_language(self) -> int:
        return self.w_project.data.shape[1]

    def named_tensors(self) -> dict[str, Tensor]:
        named = {
            "adapter.queries": self.queries,
            "adapter.w_key": self.w_key,
            "adapter.w_value": self.w_value,
            "adapter.norm_gain": self.norm_gain,
            "adapter.norm_bias": self.norm_bias,
            "adapter.w_mlp_in": self.w_mlp_in,
            "adapter.w_mlp_out": self.w_mlp_out,
            "adapter.w_project": self.w_project,
        }
        for name, t in (
            ("adapter.w_attn_out", self.w_attn_out),
            ("adapter.b_attn_out", self.b_attn_out),
            ("adapter.b_mlp_in", self.b_mlp_in),
            ("adapter.b_mlp_out", self.b_mlp_out),
        ):
            if t is not None:
                named[name] = t
        return named


@dataclass
class LocalAdapterParams:
    """Per-token MLP projection; every vision token maps to one language
    token independently."""

    norm_gain: Tensor        # d_vision
    norm_bias: Tensor
    w_mlp_in: Tensor         # d_vision x hidden
    b_mlp_in: Tensor | None
    w_mlp_out: Tensor        # hidden x d_language
    b_mlp_out: Tensor | None

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        d_vision: int,
        d_language: int,
        hidden: int = 8192,
        biases: bool = True,
    ) -> "LocalAdapterParams":
        return cls(
            norm_gain=ag.ones((d_vision,)),
            norm_bias=ag.zeros((d_vision,)),
            w_mlp_in=ag.fan_in_gaussian(rng, (d_vision, hidden)),
            b_mlp_in=ag.zeros((hidden,)) if biases else None,
            w_mlp_out=ag.fan_in_gaussian(rng, (hidden, d_language)),
            b_mlp_out=ag.zeros((d_language,)) if biases else None,
        )

    @property
    def d_vision(self) -> int:
        return self.w_mlp_in.data.shape[0]

    @property
    def d_language(self) -> int:
        return self.w_mlp_out.data.shape[1]

    def named_tensors(self) -> dict[str, Tensor]:
        named = {
            "adapter.norm_gain": self.norm_gain,
            "adapter.norm_bias": self.norm_bias,
            "adapter.w_mlp_in": self.w_mlp_in,
            "adapter.w_mlp_out": self.w_mlp_out,
        }
        if self.b_mlp_in is not None:
            named["adapter.b_mlp_in"] = self.b_mlp_in
        if self.b_mlp_out is not None:
            named["adapter.b_mlp_out"] = self.b_mlp_out
        return named


AdapterParams = CompressionAdapterParams | LocalAdapterParams


def _mlp(x: Tensor, w_in: Tensor, b_in: Tensor | None, w_out: Tensor, b_out: Tensor | None) -> Tensor:
    h = ag.matmul(x, w_in)
    if b_in is not None:
        h = ag.add(h, b_in)
    h = ag.gelu(h)
    out = ag.matmul(h, w_out)
    if b_out is not None:
        out = ag.add(out, b_out)
    return out


def compress(
    x: Tensor,
    params: CompressionAdapterParams,
    collect_weights: list[np.ndarray] | None = None,
) -> Tensor:
    """Compress n vision tokens to the adapter's fixed token count.

    Follows the displayed computation order: K = X W_K, V = X W_V,
    H = MultiHeadAttention(Q, K, V), O = H + MLP(LayerNorm(H)),
    Y = O W_proj. The output row count equals the query count no matter
    how many input tokens arrive, and no positional information is added,
    so permuting input rows leaves the output unchanged.
    """
    if x.data.ndim != 2 or x.data.shape[1] != params.d_vision:
        raise ShapeError(
            f"adapter expects tokens of width {params.d_vision}, got shape {x.data.shape}"
        )
    if x.data.shape[0] < 1:
        raise ShapeError("adapter needs at least one input token")
    k = ag.matmul(x, params.w_key)
    v = ag.matmul(x, params.w_value)
    h = ag.multi_head_attention(
        params.queries,
        k,
        v,
        heads=params.heads,
        w_out=params.w_attn_out,
        b_out=params.b_attn_out,
        collect_weights=collect_weights,
    )
    normed = ag.layer_norm(h, params.norm_gain, params.norm_bias)
    o = ag.add(h, _mlp(normed, params.w_mlp_in, params.b_mlp_in, params.w_mlp_out, params.b_mlp_out))
    return ag.matmul(o, params.w_project)


def local_project(x: Tensor, params: LocalAdapterParams) -> Tensor:
    """Map each vision token to one language token, independently per row."""
    if x.data.ndim != 2 or x.data.shape[1] != params.d_vision:
        raise ShapeError(
            f"adapter expects tokens of width {params.d_vision}, got shape {x.data.shape}"
        )
    if x.data.shape[0] < 1:
        raise ShapeError("adapter needs at least one input token")
    normed = ag.layer_norm(x, params.norm_gain, params.norm_bias)
    return _mlp(normed, params.w_mlp_in, params.b_mlp_in, params.w_mlp_out, params.b_mlp_out)


def apply_adapter(x: Tensor, params: AdapterParams) -> Tensor:
    if isinstance(params, CompressionAdapterParams):
        return compress(x, params)
    return local_project(x, params)


def adapter_param_count(params: AdapterParams) -> int:
    """Exact number of scalar parameters in the adapter."""
    return sum(t.data.size for t in params.named_tensors().values())
