"""The trainable unit: an adapter plus the joint encoder and its heads."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .adapter import (
    AdapterParams,
    CompressionAdapterParams,
    LocalAdapterParams,
    apply_adapter,
)
from .autograd import Tensor
from .checkpoint import load_tensors, save_tensors
from .encoder import EncoderParams, build_joint_sequence, itm_logit
from .errors import ConfigError
from .text import TokenizedText, Vocabulary


@dataclass
class ModelConfig:
    """Shape of the full model; everything a checkpoint needs to rebuild."""

    layers: int = 12
    hidden: int = 384
    heads: int = 12
    text_max_len: int = 64
    embedding_dim: int = 384
    adapter_variant: str = "compressed"   # compressed | local
    adapter_tokens: int = 64
    vision_dim: int = 1024
    adapter_hidden: int = 8192
    adapter_heads: int = 8
    adapter_output_projection: bool = True
    adapter_biases: bool = True
    tie_mlm_head: bool = True

    def validate(self) -> None:
        if self.adapter_variant not in ("compressed", "local"):
            raise ConfigError(f"unknown adapter variant {self.adapter_variant!r}")
        if self.hidden % self.heads != 0:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    @property
    def max_positions(self) -> int:
        # [CLS] + worst-case text side (SEP, content, SEP) + padding slack
        return self.text_max_len + 8


class JointModel:
    """Adapter + encoder with a shared vocabulary."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, adapter: AdapterParams, encoder: EncoderParams):
        config.validate()
        self.config = config
        self.vocab = vocab
        self.adapter = adapter
        self.encoder = encoder

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocabulary, rng: np.random.Generator) -> "JointModel":
        config.validate()
        if config.adapter_variant == "compressed":
            adapter: AdapterParams = CompressionAdapterParams.init(
                rng,
                tokens=config.adapter_tokens,
                d_vision=config.vision_dim,
                d_language=config.hidden,
                hidden=config.adapter_hidden,
                heads=config.adapter_heads,
                output_projection=config.adapter_output_projection,
                biases=config.adapter_biases,
            )
        else:
            adapter = LocalAdapterParams.init(
                rng,
                d_vision=config.vision_dim,
                d_language=config.hidden,
                hidden=config.adapter_hidden,
                biases=config.adapter_biases,
            )
        encoder = EncoderParams.init(
            rng,
            vocab_size=len(vocab),
            d_language=config.hidden,
            layers=config.layers,
            heads=config.heads,
            d_embedding=config.embedding_dim,
            max_positions=config.max_positions,
            tie_mlm_head=config.tie_mlm_head,
        )
        return cls(config, vocab, adapter, encoder)

    def adapt(self, raw_tokens: np.ndarray) -> Tensor:
        """Project raw vision tokens into language space."""
        return apply_adapter(Tensor(raw_tokens), self.adapter)

    def pair_logit(self, vision: Tensor, text: TokenizedText) -> Tensor:
        """ITM logit (1x1) for already-adapted vision tokens and a caption."""
        seq = build_joint_sequence(vision, text, self.encoder)
        return itm_logit(seq, self.encoder)

    def named_tensors(self) -> dict[str, Tensor]:
        named = dict(self.adapter.named_tensors())
        named.update(self.encoder.named_tensors())
        return named

    def save(self, path: Path | str) -> None:
        save_tensors(path, self.named_tensors())

    def load_weights(self, path: Path | str) -> None:
        """Fill parameters in place from a checkpoint; shapes must agree."""
        stored = load_tensors(path)
        own = self.named_tensors()
        missing = sorted(set(own) - set(stored))
        extra = sorted(set(stored) - set(own))
        if missing or extra:
            raise ConfigError(
                f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}"
            )
        for name, tensor in own.items():
            if stored[name].shape != tensor.data.shape:
                raise ConfigError(
                    f"checkpoint tensor {name} has shape {stored[name].shape}, "
                    f"model expects {tensor.data.shape}"
                )
            tensor.data = stored[name]
            tensor.grad = None

    @classmethod
    def load(cls, path: Path | str, config: ModelConfig, vocab: Vocabulary) -> "JointModel":
        model = cls.init(config, vocab, np.random.default_rng(0))
        model.load_weights(path)
        return model

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named_tensors().values())
