"""Compact bidirectional joint encoder over vision + text tokens.

The sequence layout is [CLS], vision tokens, [SEP], text tokens, [SEP],
padding. Text and special positions receive learned position embeddings;
vision positions receive none (the compression queries already confer
identity). A 2-way modality-type embedding distinguishes the segments.
The stack is pre-norm self-attention with a final layer norm; padded
keys are masked out of attention with an additive -inf, so growing the
padding never changes unpadded outputs.

Three heads read the encoded sequence: image-text matching and
text-embedding recovery from the [CLS] row, masked-token prediction from
the masked rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError
from .text import CLS_ID, PAD_ID, SEP_ID, TokenizedText, Vocabulary

TAG_VISION, TAG_TEXT, TAG_SPECIAL = 0, 1, 2
TYPE_VISION, TYPE_TEXT = 0, 1


@dataclass
class LayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_query: Tensor
    b_query: Tensor
    w_key: Tensor
    b_key: Tensor
    w_value: Tensor
    b_value: Tensor
    w_attn_out: Tensor
    b_attn_out: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_mlp_in: Tensor
    b_mlp_in: Tensor
    w_mlp_out: Tensor
    b_mlp_out: Tensor


@dataclass
class EncoderParams:
    """Embedding tables, transformer layers, and the three heads."""

    token_embedding: Tensor      # vocab x d
    position_embedding: Tensor   # max text-side positions x d
    type_embedding: Tensor       # 2 x d (vision / text+special)
    layers: list[LayerParams]
    heads: int
    final_gain: Tensor
    final_bias: Tensor
    w_itm: Tensor                # d x 1
    b_itm: Tensor
    w_mlm: Tensor | None         # d x vocab; None ties to token_embedding
    b_mlm: Tensor
    w_recover: Tensor            # d x d_embedding
    b_recover: Tensor

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        vocab_size: int,
        d_language: int = 384,
        layers: int = 12,
        heads: int = 12,
        d_embedding: int = 384,
        max_positions: int = 80,
        mlp_ratio: int = 4,
        tie_mlm_head: bool = True,
    ) -> "EncoderParams":
        if d_language % heads != 0:
            raise ShapeError(f"hidden size {d_language} not divisible by {heads} heads")
        hidden = mlp_ratio * d_language

        def layer() -> LayerParams:
            return LayerParams(
                ln1_gain=ag.ones((d_language,)),
                ln1_bias=ag.zeros((d_language,)),
                w_query=ag.fan_in_gaussian(rng, (d_language, d_language)),
                b_query=ag.zeros((d_language,)),
                w_key=ag.fan_in_gaussian(rng, (d_language, d_language)),
                b_key=ag.zeros((d_language,)),
                w_value=ag.fan_in_gaussian(rng, (d_language, d_language)),
                b_value=ag.zeros((d_language,)),
                w_attn_out=ag.fan_in_gaussian(rng, (d_language, d_language)),
                b_attn_out=ag.zeros((d_language,)),
                ln2_gain=ag.ones((d_language,)),
                ln2_bias=ag.zeros((d_language,)),
                w_mlp_in=ag.fan_in_gaussian(rng, (d_language, hidden)),
                b_mlp_in=ag.zeros((hidden,)),
                w_mlp_out=ag.fan_in_gaussian(rng, (hidden, d_language)),
                b_mlp_out=ag.zeros((d_language,)),
            )

        return cls(
            token_embedding=ag.gaussian(rng, (vocab_size, d_language)),
            position_embedding=ag.gaussian(rng, (max_positions, d_language)),
            type_embedding=ag.gaussian(rng, (2, d_language)),
            layers=[layer() for _ in range(layers)],
            heads=heads,
            final_gain=ag.ones((d_language,)),
            final_bias=ag.zeros((d_language,)),
            w_itm=ag.fan_in_gaussian(rng, (d_language, 1)),
            b_itm=ag.zeros((1,)),
            w_mlm=None if tie_mlm_head else ag.fan_in_gaussian(rng, (d_language, vocab_size)),
            b_mlm=ag.zeros((vocab_size,)),
            w_recover=ag.fan_in_gaussian(rng, (d_language, d_embedding)),
            b_recover=ag.zeros((d_embedding,)),
        )

    @property
    def d_language(self) -> int:
        return self.token_embedding.data.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.token_embedding.data.shape[0]

    def named_tensors(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {
            "encoder.token_embedding": self.token_embedding,
            "encoder.position_embedding": self.position_embedding,
            "encoder.type_embedding": self.type_embedding,
            "encoder.final_gain": self.final_gain,
            "encoder.final_bias": self.final_bias,
            "encoder.w_itm": self.w_itm,
            "encoder.b_itm": self.b_itm,
            "encoder.b_mlm": self.b_mlm,
            "encoder.w_recover": self.w_recover,
            "encoder.b_recover": self.b_recover,
        }
        if self.w_mlm is not None:
            named["encoder.w_mlm"] = self.w_mlm
        for i, layer in enumerate(self.layers):
            for field_name, tensor in vars(layer).items():
                named[f"encoder.layers.{i}.{field_name}"] = tensor
        return named


@dataclass
class JointSequence:
    """Embedded input matrix plus the masks and tags the encoder needs."""

    embedded: Tensor                  # L x d
    attention_mask: np.ndarray        # (L,) bool, False on padding
    tags: np.ndarray                  # (L,) int8: vision/text/special
    text_positions: np.ndarray        # sequence indices of caption tokens
    masked_positions: np.ndarray      # sequence indices under [MASK]
    masked_targets: np.ndarray        # original ids at masked positions

    @property
    def length(self) -> int:
        return len(self.attention_mask)

    @property
    def maskable_positions(self) -> np.ndarray:
        """Caption-token positions; vision and specials are never maskable."""
        return self.text_positions


def build_joint_sequence(
    vision: Tensor | None,
    text: TokenizedText,
    params: EncoderParams,
    pad_to: int | None = None,
) -> JointSequence:
    """Assemble [CLS], vision, [SEP], text, [SEP], padding.

    ``vision`` rows must already be in language space (adapter output);
    pass None (or zero rows) for a text-only pass. Position embeddings
    index the non-vision subsequence only, so the same caption embeds
    identically no matter how many vision tokens precede it.
    """
    d = params.d_language
    if vision is not None and (vision.data.ndim != 2 or vision.data.shape[1] != d):
        raise ShapeError(
            f"vision tokens must be {d} wide, got shape {vision.data.shape}"
        )
    m = 0 if vision is None else vision.data.shape[0]
    content = text.content_ids
    t = len(content)

    length = 1 + m + 1 + t + 1
    total = length if pad_to is None else pad_to
    if total < length:
        raise ShapeError(f"pad_to {pad_to} shorter than sequence length {length}")
    n_pad = total - length

    # text-side token ids and their position indices (vision gets neither)
    text_side_ids = np.array(
        [SEP_ID, *content, SEP_ID] + [PAD_ID] * n_pad, dtype=np.intp
    )
    text_side_pos = np.arange(1, 1 + len(text_side_ids), dtype=np.intp)
    if params.position_embedding.data.shape[0] < 1 + len(text_side_ids):
        raise ShapeError(
            f"position table holds {params.position_embedding.data.shape[0]} slots, "
            f"sequence needs {1 + len(text_side_ids)}"
        )

    cls_part = ag.add(
        ag.add(
            ag.take_rows(params.token_embedding, [CLS_ID]),
            ag.take_rows(params.position_embedding, [0]),
        ),
        ag.take_rows(params.type_embedding, [TYPE_TEXT]),
    )
    text_part = ag.add(
        ag.add(
            ag.take_rows(params.token_embedding, text_side_ids),
            ag.take_rows(params.position_embedding, text_side_pos),
        ),
        ag.take_rows(params.type_embedding, np.full(len(text_side_ids), TYPE_TEXT)),
    )
    if m > 0:
        vision_part = ag.add(vision, ag.take_rows(params.type_embedding, [TYPE_VISION]))
        embedded = ag.concat_rows([cls_part, vision_part, text_part])
    else:
        embedded = ag.concat_rows([cls_part, text_part])

    attention_mask = np.ones(total, dtype=bool)
    if n_pad:
        attention_mask[length:] = False

    tags = np.empty(total, dtype=np.int8)
    tags[0] = TAG_SPECIAL
    tags[1 : 1 + m] = TAG_VISION
    tags[1 + m] = TAG_SPECIAL
    tags[2 + m : 2 + m + t] = TAG_TEXT
    tags[2 + m + t] = TAG_SPECIAL
    tags[length:] = TAG_SPECIAL

    text_positions = np.arange(2 + m, 2 + m + t, dtype=np.intp)
    masked_positions = text_positions[text.mask_positions] if len(text.mask_positions) else np.zeros(0, dtype=np.intp)
    return JointSequence(
        embedded=embedded,
        attention_mask=attention_mask,
        tags=tags,
        text_positions=text_positions,
        masked_positions=masked_positions,
        masked_targets=text.mask_targets.copy(),
    )


def encode(seq: JointSequence, params: EncoderParams) -> Tensor:
    """Run the pre-norm transformer stack; returns the L x d output."""
    key_bias = np.where(seq.attention_mask, 0.0, -np.inf)
    x = seq.embedded
    for layer in params.layers:
        h = ag.layer_norm(x, layer.ln1_gain, layer.ln1_bias)
        q = ag.add(ag.matmul(h, layer.w_query), layer.b_query)
        k = ag.add(ag.matmul(h, layer.w_key), layer.b_key)
        v = ag.add(ag.matmul(h, layer.w_value), layer.b_value)
        attn = ag.multi_head_attention(
            q, k, v,
            heads=params.heads,
            w_out=layer.w_attn_out,
            b_out=layer.b_attn_out,
            key_bias=key_bias,
        )
        x = ag.add(x, attn)
        h2 = ag.layer_norm(x, layer.ln2_gain, layer.ln2_bias)
        hidden = ag.gelu(ag.add(ag.matmul(h2, layer.w_mlp_in), layer.b_mlp_in))
        x = ag.add(x, ag.add(ag.matmul(hidden, layer.w_mlp_out), layer.b_mlp_out))
    return ag.layer_norm(x, params.final_gain, params.final_bias)


def itm_logit(seq: JointSequence, params: EncoderParams, encoded: Tensor | None = None) -> Tensor:
    """Match score of the pair, a 1x1 tensor read off the [CLS] row."""
    out = encode(seq, params) if encoded is None else encoded
    cls_row = ag.take_rows(out, [0])
    return ag.add(ag.matmul(cls_row, params.w_itm), params.b_itm)


def mlm_logits(seq: JointSequence, params: EncoderParams, encoded: Tensor | None = None) -> Tensor:
    """Vocabulary logits at the masked positions (num_masked x vocab);
    empty when nothing is masked. With no separate head matrix the
    logits tie to the token-embedding table."""
    if len(seq.masked_positions) == 0:
        return ag.zeros((0, params.vocab_size))
    out = encode(seq, params) if encoded is None else encoded
    rows = ag.take_rows(out, seq.masked_positions)
    head = params.w_mlm if params.w_mlm is not None else ag.transpose(params.token_embedding)
    return ag.add(ag.matmul(rows, head), params.b_mlm)


def recover_text_embedding(
    text: TokenizedText, params: EncoderParams, pad_to: int | None = None
) -> Tensor:
    """Text-only pass: project the [CLS] output into the embedding
    model's space (1 x d_embedding)."""
    seq = build_joint_sequence(None, text, params, pad_to=pad_to)
    out = encode(seq, params)
    cls_row = ag.take_rows(out, [0])
    return ag.add(ag.matmul(cls_row, params.w_recover), params.b_recover)
