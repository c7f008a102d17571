"""Throughput microbenchmark for the online reranking path.

Times three stages per batch (adapter, encoder, ITM head) plus the
end-to-end pass, with warmup iterations excluded. Absolute numbers are
hardware-specific and labeled as such; the interesting quantity is the
scaling with the number of vision tokens the encoder must read. Captions
are max-length, and tokenization and disk reads stay outside the timed
region to mirror the cached-vision serving regime.
"""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .encoder import build_joint_sequence, encode, itm_logit
from .model import JointModel
from .text import Vocabulary, tokenize


@dataclass
class BenchReport:
    variant: str
    batch_size: int
    ms_per_batch: float
    pairs_per_second: float
    stage_ms: dict[str, float] = field(default_factory=dict)
    sequence_length: int = 0
    hardware_note: str = ""

    def lines(self) -> list[str]:
        breakdown = "  ".join(f"{k}={v:.2f}ms" for k, v in self.stage_ms.items())
        return [
            f"variant={self.variant} batch={self.batch_size} seq_len={self.sequence_length}",
            f"end-to-end: {self.ms_per_batch:.2f} ms/batch  {self.pairs_per_second:.0f} pairs/s",
            f"stages: {breakdown}",
            f"note: {self.hardware_note}",
        ]


def _max_length_caption(vocab: Vocabulary, max_len: int) -> str:
    words = [w for w in vocab.itos[5:]] or ["thing"]
    need = max_len - 2
    return " ".join(words[i % len(words)] for i in range(need))


def run_bench(
    model: JointModel,
    batch_size: int = 64,
    iterations: int = 3,
    warmup: int = 1,
    raw_tokens: int | None = None,
    seed: int = 0,
) -> BenchReport:
    """Measure one model configuration at the given batch size."""
    rng = np.random.default_rng(seed)
    config = model.config
    n = raw_tokens or 576
    raws = [rng.normal(size=(n, config.vision_dim)) for _ in range(batch_size)]
    caption = _max_length_caption(model.vocab, config.text_max_len)
    text = tokenize(caption, model.vocab, config.text_max_len)

    def one_batch_staged(times: dict[str, float]) -> None:
        for raw in raws:
            t0 = time.perf_counter()
            vision = model.adapt(raw)
            t1 = time.perf_counter()
            seq = build_joint_sequence(vision, text, model.encoder)
            encoded = encode(seq, model.encoder)
            t2 = time.perf_counter()
            itm_logit(seq, model.encoder, encoded=encoded)
            t3 = time.perf_counter()
            times["adapter"] += t1 - t0
            times["encoder"] += t2 - t1
            times["heads"] += t3 - t2

    def one_batch_end_to_end() -> float:
        start = time.perf_counter()
        for raw in raws:
            vision = model.adapt(raw)
            seq = build_joint_sequence(vision, text, model.encoder)
            encoded = encode(seq, model.encoder)
            itm_logit(seq, model.encoder, encoded=encoded)
        return time.perf_counter() - start

    for _ in range(warmup):
        one_batch_end_to_end()

    stage_totals = {"adapter": 0.0, "encoder": 0.0, "heads": 0.0}
    end_to_end = 0.0
    for _ in range(iterations):
        end_to_end += one_batch_end_to_end()
        one_batch_staged(stage_totals)

    ms_per_batch = end_to_end / iterations * 1000.0
    vision = model.adapt(raws[0])
    seq_len = build_joint_sequence(vision, text, model.encoder).length
    return BenchReport(
        variant=config.adapter_variant,
        batch_size=batch_size,
        ms_per_batch=ms_per_batch,
        pairs_per_second=batch_size * 1000.0 / ms_per_batch,
        stage_ms={k: v / iterations * 1000.0 for k, v in stage_totals.items()},
        sequence_length=seq_len,
        hardware_note=(
            f"{platform.machine()} {platform.system()}, python {platform.python_version()}; "
            "absolute timings are machine-specific; captions at max length"
        ),
    )
