"""Two-stage retrieval: exact embedding search, then reranking.

First stage ranks the whole corpus by normalized dot product (exact, no
approximate index at this scale). The reranker rescores only the top-k
pool; items beyond the pool keep their first-stage order, so recall at
any depth >= pool size is unchanged by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, DataError, NotFoundError

T2I, I2T = "t2i", "i2t"
Scorer = Callable[[str, str, str], float]   # (direction, query_id, candidate_id)


@dataclass
class EmbeddingIndex:
    """Normalized embeddings for both sides plus caption-to-image truth."""

    image_ids: list[str]
    image_embeddings: np.ndarray            # N x d, l2-normalized on load
    caption_ids: list[str]
    caption_embeddings: np.ndarray          # M x d
    caption_to_image: dict[str, str]        # many-to-one ground truth

    def __post_init__(self) -> None:
        self.image_embeddings = _normalize(self.image_embeddings)
        self.caption_embeddings = _normalize(self.caption_embeddings)
        self._image_pos = {i: n for n, i in enumerate(self.image_ids)}
        self._caption_pos = {c: n for n, c in enumerate(self.caption_ids)}
        for caption_id, image_id in self.caption_to_image.items():
            if caption_id not in self._caption_pos:
                raise DataError(f"truth entry for unknown caption {caption_id!r}")
            if image_id not in self._image_pos:
                raise DataError(f"caption {caption_id!r} maps to unknown image {image_id!r}")
        self.image_to_captions: dict[str, set[str]] = {}
        for caption_id, image_id in self.caption_to_image.items():
            self.image_to_captions.setdefault(image_id, set()).add(caption_id)

    def query_vector(self, direction: str, query_id: str) -> np.ndarray:
        if direction == T2I:
            pos = self._caption_pos.get(query_id)
            if pos is None:
                raise NotFoundError(f"unknown caption id {query_id!r}")
            return self.caption_embeddings[pos]
        if direction == I2T:
            pos = self._image_pos.get(query_id)
            if pos is None:
                raise NotFoundError(f"unknown image id {query_id!r}")
            return self.image_embeddings[pos]
        raise ConfigError(f"unknown direction {direction!r}")

    def corpus(self, direction: str) -> tuple[list[str], np.ndarray]:
        if direction == T2I:
            return self.image_ids, self.image_embeddings
        if direction == I2T:
            return self.caption_ids, self.caption_embeddings
        raise ConfigError(f"unknown direction {direction!r}")


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise DataError("zero embedding vector cannot be normalized")
    return x / norms


@dataclass
class CandidatePool:
    """Top-k first-stage candidates, descending score, ties by lower id."""

    query_id: str
    candidate_ids: list[str]
    scores: list[float]
    k: int


@dataclass
class RankedList:
    """Full candidate ordering: the reranked pool followed by the
    remainder in first-stage order."""

    query_id: str
    ordering: list[str]
    pool_size: int


@dataclass
class RecallReport:
    direction: str
    recall: dict[int, float]
    query_count: int

    def line(self, label: str) -> str:
        cells = "  ".join(f"R@{k}={self.recall[k]:.4f}" for k in sorted(self.recall))
        return f"{self.direction.upper():>3} {label:<12} {cells}  (n={self.query_count})"


def full_first_stage(index: EmbeddingIndex, query_id: str, direction: str) -> tuple[list[str], dict[str, float]]:
    """Exact ranking of the entire corpus for one query."""
    ids, corpus = index.corpus(direction)
    q = index.query_vector(direction, query_id)
    scores = corpus @ q
    order = sorted(range(len(ids)), key=lambda n: (-scores[n], ids[n]))
    return [ids[n] for n in order], {ids[n]: float(scores[n]) for n in order}


def first_stage_topk(index: EmbeddingIndex, query_id: str, direction: str, k: int) -> CandidatePool:
    """Exact top-k by normalized dot product; deterministic tie-break."""
    ids, _ = index.corpus(direction)
    if k < 1 or k > len(ids):
        raise ConfigError(f"pool size {k} outside corpus of {len(ids)}")
    ranked, scores = full_first_stage(index, query_id, direction)
    top = ranked[:k]
    return CandidatePool(query_id, top, [scores[c] for c in top], k)


def rerank(
    pool: CandidatePool,
    scorer: Callable[[str, str], float],
    remainder: list[str] | None = None,
) -> RankedList:
    """Reorder the pool by descending scorer logit, first-stage order on
    ties; anything past the pool is appended untouched."""
    logits: dict[str, float] = {}
    for candidate in pool.candidate_ids:
        try:
            value = float(scorer(pool.query_id, candidate))
        except Exception as exc:
            raise DataError(
                f"scorer failed on query {pool.query_id!r} candidate {candidate!r}: {exc}"
            ) from exc
        if not np.isfinite(value):
            raise DataError(
                f"scorer returned non-finite logit for query {pool.query_id!r} "
                f"candidate {candidate!r}"
            )
        logits[candidate] = value
    first_stage_rank = {c: n for n, c in enumerate(pool.candidate_ids)}
    reordered = sorted(pool.candidate_ids, key=lambda c: (-logits[c], first_stage_rank[c]))
    tail = [c for c in (remainder or []) if c not in set(pool.candidate_ids)]
    return RankedList(pool.query_id, reordered + tail, pool.k)


def recall_at_k(
    rankings: dict[str, list[str]],
    truth: dict[str, set[str]],
    ks: Iterable[int] = (1, 5, 10),
    direction: str = T2I,
) -> RecallReport:
    """Fraction of queries whose ground truth appears in the top k.

    For image-to-text a query hits when any of its ground-truth captions
    shows up; the truth map already carries one set per query either way.
    """
    if not rankings:
        raise DataError("no ranked lists to evaluate")
    ks = sorted(set(int(k) for k in ks))
    hits = {k: 0 for k in ks}
    for query_id, ranked in rankings.items():
        relevant = truth.get(query_id)
        if not relevant:
            raise DataError(f"no ground-truth entry for query {query_id!r}")
        for k in ks:
            if set(ranked[:k]) & relevant:
                hits[k] += 1
    n = len(rankings)
    return RecallReport(direction, {k: hits[k] / n for k in ks}, n)


@dataclass
class EvaluationResult:
    baseline: dict[str, RecallReport] = field(default_factory=dict)
    reranked: dict[str, RecallReport] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = []
        for direction in sorted(self.baseline):
            out.append(self.baseline[direction].line("first-stage"))
            out.append(self.reranked[direction].line("reranked"))
        return out


def truth_sets(index: EmbeddingIndex, direction: str) -> dict[str, set[str]]:
    if direction == T2I:
        return {c: {img} for c, img in index.caption_to_image.items()}
    return {img: set(caps) for img, caps in index.image_to_captions.items()}


def evaluate(
    index: EmbeddingIndex,
    scorer: Scorer,
    pool_size: int = 10,
    ks: Iterable[int] = (1, 5, 10),
    directions: Iterable[str] = (T2I, I2T),
) -> EvaluationResult:
    """Run both directions end to end; reports baseline and reranked
    recall. Failures carry a stage label (first-stage | rerank | metric).
    """
    result = EvaluationResult()
    for direction in directions:
        queries = (
            list(index.caption_to_image) if direction == T2I else sorted(index.image_to_captions)
        )
        baseline_rankings: dict[str, list[str]] = {}
        reranked_rankings: dict[str, list[str]] = {}
        for query_id in queries:
            try:
                ranked, scores = full_first_stage(index, query_id, direction)
                pool = CandidatePool(
                    query_id, ranked[:pool_size], [scores[c] for c in ranked[:pool_size]], pool_size
                )
            except Exception as exc:
                raise DataError(f"[first-stage] query {query_id!r}: {exc}") from exc
            baseline_rankings[query_id] = ranked
            try:
                reranked_rankings[query_id] = rerank(
                    pool, lambda q, c: scorer(direction, q, c), remainder=ranked
                ).ordering
            except Exception as exc:
                raise DataError(f"[rerank] query {query_id!r}: {exc}") from exc
        truth = truth_sets(index, direction)
        try:
            result.baseline[direction] = recall_at_k(baseline_rankings, truth, ks, direction)
            result.reranked[direction] = recall_at_k(reranked_rankings, truth, ks, direction)
        except Exception as exc:
            raise DataError(f"[metric] direction {direction}: {exc}") from exc
    return result


def oracle_scorer(index: EmbeddingIndex) -> Scorer:
    """+1 on ground-truth pairs, 0 otherwise; an upper bound on what
    reranking inside the pool can achieve."""

    def score(direction: str, query_id: str, candidate_id: str) -> float:
        if direction == T2I:
            return 1.0 if index.caption_to_image.get(query_id) == candidate_id else 0.0
        return 1.0 if candidate_id in index.image_to_captions.get(query_id, set()) else 0.0

    return score


def first_stage_scorer(index: EmbeddingIndex) -> Scorer:
    """Rescore with the first-stage similarity itself; reranking with it
    must reproduce the first-stage order."""

    def score(direction: str, query_id: str, candidate_id: str) -> float:
        ids, corpus = index.corpus(direction)
        pos = {i: n for n, i in enumerate(ids)}[candidate_id]
        return float(corpus[pos] @ index.query_vector(direction, query_id))

    return score
