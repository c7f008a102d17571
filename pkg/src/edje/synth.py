"""Planted-structure synthetic data: images, captions, and a weak
embedding model that agree on a shared latent.

Every image carries a tuple of factor values: one word per factor in the
caption, and a group of "visual word" tokens per factor in the image
(each token is that value's fixed random direction plus noise), so
matching a caption to an image amounts to compositional word-to-token
alignment rather than memorizing whole images. The weak embeddings
project the factor one-hots and add noise. With zero embedding noise the
first stage is already perfect; with the default noise it is imperfect
but the ground truth almost always reaches a pool of ten, leaving
headroom for a reranker that sees the far cleaner captions and tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datafiles import (
    EvalRow,
    TrainRow,
    write_embeddings,
    write_eval_manifest,
    write_train_manifest,
)
from .errors import ConfigError
from .store import write_raw_dump

FACTOR_NAMES = ["color", "shape", "scene", "style", "mood", "light"]
FILLER_WORDS = ["a", "the", "of", "with", "in", "very", "some", "one"]


@dataclass
class SynthConfig:
    images_train: int = 32
    images_heldout: int = 200
    captions_per_image: int = 1
    factors: int = 3
    values_per_factor: int = 8
    raw_tokens: int = 24          # vision tokens per image
    vision_dim: int = 32
    embedding_dim: int = 16
    token_noise: float = 0.1
    embedding_noise: float = 0.45
    filler_words: int = 2

    def validate(self) -> None:
        if self.factors > len(FACTOR_NAMES):
            raise ConfigError(f"at most {len(FACTOR_NAMES)} factors supported")
        combos = self.values_per_factor**self.factors
        total = self.images_train + self.images_heldout
        if combos < total:
            raise ConfigError(
                f"{combos} factor combinations cannot label {total} distinct images"
            )


@dataclass
class SynthOutput:
    raw_dump: Path
    train_manifest: Path
    eval_manifest: Path
    image_embeddings: Path
    text_embeddings: Path


def _caption_for(values: tuple[int, ...], rng: np.random.Generator, cfg: SynthConfig) -> str:
    # factor words keep their slot order so position identifies the factor;
    # filler words vary at the tail
    words = [f"{FACTOR_NAMES[f]}{v}" for f, v in enumerate(values)]
    fillers = [FILLER_WORDS[int(i)] for i in rng.integers(len(FILLER_WORDS), size=cfg.filler_words)]
    return " ".join(words + fillers)


def _latent(values: tuple[int, ...], cfg: SynthConfig) -> np.ndarray:
    z = np.zeros(cfg.factors * cfg.values_per_factor)
    for f, v in enumerate(values):
        z[f * cfg.values_per_factor + v] = 1.0
    return z


def generate(out_dir: Path | str, cfg: SynthConfig, seed: int) -> SynthOutput:
    """Write the raw token dump, both manifests, and the two embedding
    files. Byte-identical for identical seeds and configs."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    d_latent = cfg.factors * cfg.values_per_factor
    # one unit direction per (factor, value): the image-side vocabulary
    visual_words = rng.normal(size=(cfg.factors, cfg.values_per_factor, cfg.vision_dim))
    visual_words /= np.linalg.norm(visual_words, axis=2, keepdims=True)
    embed_proj = rng.normal(size=(d_latent, cfg.embedding_dim)) / np.sqrt(cfg.factors)

    # distinct factor combinations, shuffled, so captions identify images
    grids = np.indices([cfg.values_per_factor] * cfg.factors).reshape(cfg.factors, -1).T
    order = rng.permutation(len(grids))
    total = cfg.images_train + cfg.images_heldout
    combos = [tuple(int(v) for v in grids[i]) for i in order[:total]]

    raw_records: list[tuple[str, np.ndarray]] = []
    train_rows: list[TrainRow] = []
    eval_rows: list[EvalRow] = []
    image_embeddings: dict[str, np.ndarray] = {}
    text_embeddings: dict[str, np.ndarray] = {}

    for idx, values in enumerate(combos):
        split = "train" if idx < cfg.images_train else "heldout"
        image_id = f"img{idx:05d}"
        z = _latent(values, cfg)

        # token t carries factor (t mod F)'s visual word plus noise
        tokens = np.stack(
            [visual_words[t % cfg.factors, values[t % cfg.factors]] for t in range(cfg.raw_tokens)]
        )
        tokens = tokens + cfg.token_noise * rng.normal(size=tokens.shape)
        raw_records.append((image_id, tokens.astype(np.float32)))

        base = embed_proj.T @ z
        base = base / np.linalg.norm(base)
        img_emb = base + cfg.embedding_noise * rng.normal(size=cfg.embedding_dim) / np.sqrt(
            cfg.embedding_dim
        )
        image_embeddings[image_id] = img_emb / np.linalg.norm(img_emb)

        for c in range(cfg.captions_per_image):
            caption_id = f"cap{idx:05d}_{c}"
            caption = _caption_for(values, rng, cfg)
            txt_emb = base + cfg.embedding_noise * rng.normal(
                size=cfg.embedding_dim
            ) / np.sqrt(cfg.embedding_dim)
            text_embeddings[caption_id] = txt_emb / np.linalg.norm(txt_emb)
            train_rows.append(TrainRow(image_id, caption, split))
            eval_rows.append(EvalRow(caption_id, image_id, caption, split))

    out = SynthOutput(
        raw_dump=out_dir / "raw_tokens.edjr",
        train_manifest=out_dir / "train_manifest.tsv",
        eval_manifest=out_dir / "eval_manifest.tsv",
        image_embeddings=out_dir / "image_embeddings.edjt",
        text_embeddings=out_dir / "text_embeddings.edjt",
    )
    write_raw_dump(out.raw_dump, raw_records)
    write_train_manifest(out.train_manifest, train_rows)
    write_eval_manifest(out.eval_manifest, eval_rows)
    write_embeddings(out.image_embeddings, image_embeddings)
    write_embeddings(out.text_embeddings, text_embeddings)
    return out
