"""Independent reference implementations used to check the library.

Everything here is written as plainly as possible (explicit loops, no
shared code with src/edje) so a disagreement points at the library, not
at the oracle.
"""

from __future__ import annotations

import math

import numpy as np


def naive_softmax_rows(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        row = x[i] - max(x[i])
        e = [math.exp(val) for val in row]
        z = sum(e)
        out[i] = [val / z for val in e]
    return out


def naive_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(x, dtype=np.float64)
    for i in range(x.shape[0]):
        mu = float(np.mean(x[i]))
        var = float(np.mean((x[i] - mu) ** 2))
        out[i] = (x[i] - mu) / math.sqrt(var + eps) * gain + bias
    return out


def naive_gelu(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    flat = x.reshape(-1)
    vals = [0.5 * v * (1.0 + math.tanh(c * (v + 0.044715 * v**3))) for v in flat]
    return np.array(vals).reshape(x.shape)


def naive_mha(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    heads: int,
    w_out: np.ndarray | None = None,
    b_out: np.ndarray | None = None,
    key_bias: np.ndarray | None = None,
) -> np.ndarray:
    """Loop-per-head, loop-per-query scaled dot-product attention."""
    m, d = q.shape
    head_dim = d // heads
    merged = np.zeros((m, d), dtype=np.float64)
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        for i in range(m):
            scores = np.zeros(k.shape[0])
            for j in range(k.shape[0]):
                scores[j] = float(np.dot(q[i, lo:hi], k[j, lo:hi])) / math.sqrt(head_dim)
                if key_bias is not None:
                    scores[j] += key_bias[j]
            weights = naive_softmax_rows(scores.reshape(1, -1))[0]
            for j in range(k.shape[0]):
                merged[i, lo:hi] += weights[j] * v[j, lo:hi]
    if w_out is not None:
        merged = merged @ w_out
        if b_out is not None:
            merged = merged + b_out
    return merged


def naive_compress(x: np.ndarray, p) -> np.ndarray:
    """Token compression: cross-attention from learnable queries, residual
    MLP block, then the output projection. numpy only, per-head loops."""
    k = x @ p.w_key.data
    v = x @ p.w_value.data
    w_out = p.w_attn_out.data if p.w_attn_out is not None else None
    b_out = p.b_attn_out.data if p.b_attn_out is not None else None
    h = naive_mha_matrixwise(p.queries.data, k, v, p.heads, w_out, b_out)
    normed = naive_layer_norm(h, p.norm_gain.data, p.norm_bias.data)
    hidden = normed @ p.w_mlp_in.data
    if p.b_mlp_in is not None:
        hidden = hidden + p.b_mlp_in.data
    hidden = naive_gelu_fast(hidden)
    mlp = hidden @ p.w_mlp_out.data
    if p.b_mlp_out is not None:
        mlp = mlp + p.b_mlp_out.data
    out = h + mlp
    return out @ p.w_project.data


def naive_mha_matrixwise(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    heads: int,
    w_out: np.ndarray | None = None,
    b_out: np.ndarray | None = None,
    key_bias: np.ndarray | None = None,
) -> np.ndarray:
    """Per-head loop with numpy matrix products; for sizes where the
    per-query loop of naive_mha would crawl."""
    m, d = q.shape
    head_dim = d // heads
    merged = np.zeros((m, d), dtype=np.float64)
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        scores = q[:, lo:hi] @ k[:, lo:hi].T / math.sqrt(head_dim)
        if key_bias is not None:
            scores = scores + key_bias
        weights = naive_softmax_rows(scores)
        merged[:, lo:hi] = weights @ v[:, lo:hi]
    if w_out is not None:
        merged = merged @ w_out
        if b_out is not None:
            merged = merged + b_out
    return merged


def naive_gelu_fast(x: np.ndarray) -> np.ndarray:
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def naive_local_project(x: np.ndarray, p) -> np.ndarray:
    normed = naive_layer_norm(x, p.norm_gain.data, p.norm_bias.data)
    hidden = normed @ p.w_mlp_in.data
    if p.b_mlp_in is not None:
        hidden = hidden + p.b_mlp_in.data
    hidden = naive_gelu_fast(hidden)
    out = hidden @ p.w_mlp_out.data
    if p.b_mlp_out is not None:
        out = out + p.b_mlp_out.data
    return out


def naive_encode(seq, params) -> np.ndarray:
    """Pre-norm transformer stack re-implemented directly on the embedded
    matrix of a JointSequence."""
    x = seq.embedded.data.copy()
    key_bias = np.where(seq.attention_mask, 0.0, -np.inf)
    for layer in params.layers:
        h = naive_layer_norm(x, layer.ln1_gain.data, layer.ln1_bias.data)
        q = h @ layer.w_query.data + layer.b_query.data
        k = h @ layer.w_key.data + layer.b_key.data
        v = h @ layer.w_value.data + layer.b_value.data
        attn = naive_mha_matrixwise(
            q, k, v, params.heads, layer.w_attn_out.data, layer.b_attn_out.data, key_bias
        )
        x = x + attn
        h2 = naive_layer_norm(x, layer.ln2_gain.data, layer.ln2_bias.data)
        hidden = naive_gelu_fast(h2 @ layer.w_mlp_in.data + layer.b_mlp_in.data)
        x = x + hidden @ layer.w_mlp_out.data + layer.b_mlp_out.data
    return naive_layer_norm(x, params.final_gain.data, params.final_bias.data)


def naive_bce_with_logits(logits: list[float], labels: list[float]) -> float:
    """Plain sigmoid + log BCE; only valid away from saturation."""
    total = 0.0
    for x, y in zip(logits, labels):
        p = 1.0 / (1.0 + math.exp(-x))
        total += -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))
    return total / len(logits)


def soft_target_bce(teacher_logit: float, student_logit: float) -> float:
    """High-precision soft-label BCE via math module, the checked path
    never touches this."""
    y = 1.0 / (1.0 + math.exp(-teacher_logit))
    p = 1.0 / (1.0 + math.exp(-student_logit))
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))


def brute_force_topk(scores: dict[str, float], k: int) -> list[str]:
    """Full sort, descending score, ties by lower id."""
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [key for key, _ in ordered[:k]]


def brute_force_negatives(sim: np.ndarray, anchor: int, count: int, axis: str) -> list[int]:
    """Top-`count` non-anchor indices of a row (axis='row') or column."""
    b = sim.shape[0]
    if axis == "row":
        pairs = [(sim[anchor, j], j) for j in range(b) if j != anchor]
    else:
        pairs = [(sim[j, anchor], j) for j in range(b) if j != anchor]
    pairs.sort(key=lambda p: (-p[0], p[1]))
    return [j for _, j in pairs[:count]]


def brute_force_recall(rankings: dict[str, list[str]], truth: dict[str, set[str]], k: int) -> float:
    hits = 0
    for query, ranked in rankings.items():
        if set(ranked[:k]) & truth[query]:
            hits += 1
    return hits / len(rankings)
