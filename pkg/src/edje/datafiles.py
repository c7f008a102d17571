"""Text manifests and embedding files shared by training and evaluation.

Manifests are tab-delimited text. The training manifest carries
(image_id, caption, split); the evaluation manifest carries
(caption_id, image_id, caption, split). Embedding files are named-tensor
containers keyed by image or caption id.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .errors import DataError, FormatError


@dataclass
class TrainRow:
    image_id: str
    caption: str
    split: str


@dataclass
class EvalRow:
    caption_id: str
    image_id: str
    caption: str
    split: str


def write_train_manifest(path: Path | str, rows: list[TrainRow]) -> None:
    lines = [f"{r.image_id}\t{r.caption}\t{r.split}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_train_manifest(path: Path | str) -> list[TrainRow]:
    rows = []
    for lineno, line in enumerate(_lines(path), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        rows.append(TrainRow(*parts))
    return rows


def write_eval_manifest(path: Path | str, rows: list[EvalRow]) -> None:
    lines = [f"{r.caption_id}\t{r.image_id}\t{r.caption}\t{r.split}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_eval_manifest(path: Path | str) -> list[EvalRow]:
    rows = []
    for lineno, line in enumerate(_lines(path), 1):
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
        rows.append(EvalRow(*parts))
    return rows


def _lines(path: Path | str) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    return [line for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def write_embeddings(path: Path | str, embeddings: dict[str, np.ndarray]) -> None:
    save_tensors(path, embeddings)


def read_embeddings(path: Path | str) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    return load_tensors(path)
