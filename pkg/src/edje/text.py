"""Deterministic word-level tokenizer and vocabulary."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, FormatError

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIAL_TOKENS = [PAD, CLS, SEP, MASK, UNK]
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = range(5)

_WORD_RE = re.compile(r"[a-z0-9]+")


def split_words(caption: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD_RE.findall(caption.lower())


class Vocabulary:
    """Dense token-to-id map with fixed reserved ids 0..4 for
    [PAD], [CLS], [SEP], [MASK], [UNK]."""

    def __init__(self, words: Iterable[str]) -> None:
        self.itos: list[str] = list(SPECIAL_TOKENS)
        seen = set(self.itos)
        for w in words:
            if w in seen:
                raise ConfigError(f"duplicate vocabulary entry: {w!r}")
            seen.add(w)
            self.itos.append(w)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def id_of(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    @classmethod
    def build(cls, captions: Iterable[str], max_words: int | None = None) -> "Vocabulary":
        """Top-N corpus words by frequency; ties broken alphabetically."""
        counts = Counter()
        for caption in captions:
            counts.update(split_words(caption))
        words = sorted(counts, key=lambda w: (-counts[w], w))
        if max_words is not None:
            words = words[:max_words]
        return cls(words)

    def save(self, path: Path | str) -> None:
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self.itos)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Path | str) -> "Vocabulary":
        entries: list[tuple[int, str]] = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                token, ident = line.split("\t")
                entries.append((int(ident), token))
            except ValueError as exc:
                raise FormatError(f"bad vocabulary line {lineno}: {line!r}") from exc
        entries.sort()
        tokens = [tok for _, tok in entries]
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise FormatError("vocabulary file missing reserved special tokens")
        if [i for i, _ in entries] != list(range(len(entries))):
            raise FormatError("vocabulary ids are not dense")
        return cls(tokens[len(SPECIAL_TOKENS) :])


@dataclass
class TokenizedText:
    """A caption as ids: [CLS], content tokens, [SEP], at most max_len ids.

    ``mask_positions``/``mask_targets`` are set only on the output of MLM
    masking and index into ``content_ids``.
    """

    caption: str
    ids: np.ndarray
    mask_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    mask_targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    @property
    def content_ids(self) -> np.ndarray:
        return self.ids[1:-1]

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(caption: str, vocab: Vocabulary, max_len: int) -> TokenizedText:
    """Deterministic tokenization with truncation to ``max_len`` ids
    including the [CLS]/[SEP] pair; only trailing caption words drop.
    An empty caption becomes a single [UNK]."""
    if max_len < 2:
        raise ConfigError(f"max_len must fit [CLS] and [SEP], got {max_len}")
    words = split_words(caption)
    content = [vocab.id_of(w) for w in words] if words else [UNK_ID]
    content = content[: max_len - 2]
    ids = np.array([CLS_ID, *content, SEP_ID], dtype=np.intp)
    return TokenizedText(caption=caption, ids=ids)
