"""Dense float64 tensors with tape-based reverse-mode gradients.

Every primitive computes its forward value eagerly with numpy and, when a
Tape is active, appends a backward closure to it. Replaying the tape in
reverse accumulates adjoints into each participating tensor's ``grad``
buffer. All math runs in 64-bit; narrower precision exists only at the
storage boundary (see edje.store).

Shapes are 2-D matrices, 1-D vectors, or 0-d scalars; nothing here
broadcasts beyond the row-vector/bias cases the models need.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A dense row-major float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data) -> None:
        self.data: np.ndarray = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


_Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of primitives applied during a forward pass.

    Walking the log in reverse visits every recorded operation exactly
    once; afterwards every tensor that participated in the forward pass
    has a populated gradient buffer (zeros if it did not influence the
    loss).
    """

    def __init__(self) -> None:
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], _Backward]] = []

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NumericError("backward called on a non-finite loss")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self.entries):
            g = out.grad
            if g is None:
                continue
            for tensor, piece in zip(inputs, backward_fn(g)):
                if piece is None:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.array(piece, dtype=np.float64, copy=True)
                else:
                    tensor.grad = tensor.grad + piece
        for _, inputs, _ in self.entries:
            for tensor in inputs:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)


_active_tapes: list[Tape] = []


@contextmanager
def record(tape: Tape) -> Iterator[Tape]:
    """Route every primitive executed in this context onto ``tape``."""
    _active_tapes.append(tape)
    try:
        yield tape
    finally:
        _active_tapes.pop()


def _emit(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: _Backward) -> Tensor:
    if _active_tapes:
        _active_tapes[-1].entries.append((out, inputs, backward_fn))
    return out


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo row-vector / scalar broadcasting by summing the extra axes."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    if len(shape) == 1:
        return grad.sum(axis=0) if grad.ndim == 2 else grad.reshape(shape)
    if len(shape) == 2 and shape[0] == 1:
        return grad.sum(axis=0, keepdims=True)
    raise ShapeError(f"cannot reduce gradient {grad.shape} to {shape}")


# ---------------------------------------------------------------------------
# elementwise and affine primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def backward(g: np.ndarray):
        return _sum_to(g, a.data.shape), _sum_to(g, b.data.shape)

    return _emit(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def backward(g: np.ndarray):
        return _sum_to(g, a.data.shape), _sum_to(-g, b.data.shape)

    return _emit(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _emit(out, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a_val, b_val = a.data, b.data
    out = Tensor(a_val * b_val)

    def backward(g: np.ndarray):
        return _sum_to(g * b_val, a_val.shape), _sum_to(g * a_val, b_val.shape)

    return _emit(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    a_val, b_val = a.data, b.data
    out = Tensor(a_val / b_val)

    def backward(g: np.ndarray):
        return (
            _sum_to(g / b_val, a_val.shape),
            _sum_to(-g * a_val / (b_val * b_val), b_val.shape),
        )

    return _emit(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _emit(out, (a,), lambda g: (g * c,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _emit(out, (a,), lambda g: (g / (2.0 * y),))


def tsum(a: Tensor) -> Tensor:
    shape = a.data.shape
    out = Tensor(a.data.sum())
    return _emit(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    shape = a.data.shape
    n = a.data.size
    out = Tensor(a.data.mean())
    return _emit(out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation:

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
    """
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def backward(g: np.ndarray):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner),)

    return _emit(out, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|))."""
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))

    def backward(g: np.ndarray):
        return (g / (1.0 + np.exp(-x)),)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------------------
# matrix primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a_val, b_val = a.data, b.data
    if a_val.ndim != 2 or b_val.ndim != 2 or a_val.shape[1] != b_val.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a_val.shape} by {b_val.shape}")
    out = Tensor(a_val @ b_val)

    def backward(g: np.ndarray):
        return g @ b_val.T, a_val.T @ g

    return _emit(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T)
    return _emit(out, (a,), lambda g: (g.T,))


def row_softmax(a: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction.

    Entries may be finite or -inf (masked keys); NaN raises. Each row
    needs at least one finite entry.
    """
    x = a.data
    if x.ndim != 2:
        raise ShapeError(f"row_softmax needs a matrix, got shape {x.shape}")
    if np.isnan(x).any():
        raise NumericError("row_softmax received NaN input")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit(out, (a,), backward)


def row_log_softmax(a: Tensor) -> Tensor:
    x = a.data
    if x.ndim != 2:
        raise ShapeError(f"row_log_softmax needs a matrix, got shape {x.shape}")
    if np.isnan(x).any():
        raise NumericError("row_log_softmax received NaN input")
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - log_z
    out = Tensor(y)

    def backward(g: np.ndarray):
        return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)

    return _emit(out, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row zero-mean unit-variance normalization followed by an affine."""
    v = x.data
    if v.ndim != 2:
        raise ShapeError(f"layer_norm needs a matrix, got shape {v.shape}")
    d = v.shape[1]
    mu = v.mean(axis=1, keepdims=True)
    centered = v - mu
    var = (centered**2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = Tensor(x_hat * gain.data + bias.data)

    def backward(g: np.ndarray):
        d_gain = (g * x_hat).sum(axis=0)
        d_bias = g.sum(axis=0)
        d_hat = g * gain.data
        d_var = (d_hat * centered).sum(axis=1, keepdims=True) * (-0.5) * inv_std**3
        d_mu = (-d_hat * inv_std).sum(axis=1, keepdims=True) + d_var * (
            -2.0 * centered.mean(axis=1, keepdims=True)
        )
        dx = d_hat * inv_std + d_var * 2.0 * centered / d + d_mu / d
        return dx, d_gain, d_bias

    return _emit(out, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# indexing and stitching primitives


def take_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx])
    shape = a.data.shape

    def backward(g: np.ndarray):
        da = np.zeros(shape, dtype=np.float64)
        np.add.at(da, idx, g)
        return (da,)

    return _emit(out, (a,), backward)


def pick(a: Tensor, rows, cols) -> Tensor:
    """Entries a[rows[i], cols[i]] as a 1-D tensor."""
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    out = Tensor(a.data[r, c])
    shape = a.data.shape

    def backward(g: np.ndarray):
        da = np.zeros(shape, dtype=np.float64)
        np.add.at(da, (r, c), g)
        return (da,)

    return _emit(out, (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.data[:, start:stop])
    shape = a.data.shape

    def backward(g: np.ndarray):
        da = np.zeros(shape, dtype=np.float64)
        da[:, start:stop] = g
        return (da,)

    return _emit(out, (a,), backward)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    counts = [p.data.shape[0] for p in parts]

    def backward(g: np.ndarray):
        pieces = []
        at = 0
        for n in counts:
            pieces.append(g[at : at + n])
            at += n
        return tuple(pieces)

    return _emit(out, tuple(parts), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    counts = [p.data.shape[1] for p in parts]

    def backward(g: np.ndarray):
        pieces = []
        at = 0
        for n in counts:
            pieces.append(g[:, at : at + n])
            at += n
        return tuple(pieces)

    return _emit(out, tuple(parts), backward)


# ---------------------------------------------------------------------------
# attention


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    w_out: Tensor | None = None,
    b_out: Tensor | None = None,
    key_bias: np.ndarray | None = None,
    collect_weights: list[np.ndarray] | None = None,
) -> Tensor:
    """Scaled dot-product attention over ``heads`` column slices.

    q, k, v are already projected; each head attends with pre-scale
    1/sqrt(d/heads), the head outputs are concatenated, and the optional
    output projection is applied last. ``key_bias`` is an additive score
    adjustment per key (0 or -inf for masking). ``collect_weights``, when
    given, receives each head's forward attention matrix.
    """
    d = q.data.shape[1]
    if d % heads != 0:
        raise ShapeError(f"model width {d} not divisible by head count {heads}")
    if k.data.shape != v.data.shape or k.data.shape[1] != d:
        raise ShapeError(
            f"attention shapes disagree: q {q.data.shape}, k {k.data.shape}, v {v.data.shape}"
        )
    head_dim = d // heads
    inv = 1.0 / math.sqrt(head_dim)
    bias_t = Tensor(key_bias) if key_bias is not None else None

    outs = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        q_h = slice_cols(q, lo, hi)
        k_h = slice_cols(k, lo, hi)
        v_h = slice_cols(v, lo, hi)
        scores = scale(matmul(q_h, transpose(k_h)), inv)
        if bias_t is not None:
            scores = add(scores, bias_t)
        weights = row_softmax(scores)
        if collect_weights is not None:
            collect_weights.append(weights.data.copy())
        outs.append(matmul(weights, v_h))
    merged = concat_cols(outs) if heads > 1 else outs[0]
    if w_out is not None:
        merged = matmul(merged, w_out)
        if b_out is not None:
            merged = add(merged, b_out)
    return merged


# ---------------------------------------------------------------------------
# parameter helpers and the finite-difference checker


def gaussian(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape))


def fan_in_gaussian(rng: np.random.Generator, shape: tuple[int, int]) -> Tensor:
    """Weight-matrix init with std 1/sqrt(fan_in), which keeps forward
    magnitudes stable at small widths where a fixed std would not."""
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape))


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def ones(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float64))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Worst relative error between reverse-mode and central differences.

    ``f`` must be a deterministic scalar function of ``params``. The
    relative error divides by max(|analytic|, |numeric|, 1) so that
    near-zero gradient coordinates are compared absolutely.
    """
    tape = Tape()
    with record(tape):
        loss = f()
    if loss.data.size != 1 or not np.isfinite(loss.data).all():
        raise NumericError("grad_check needs a finite scalar function value")
    for p in params:
        p.zero_grad()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, got in zip(params, analytic):
        flat = p.data.reshape(-1)
        got_flat = got.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            f_plus = f().item()
            flat[i] = keep - step
            f_minus = f().item()
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(got_flat[i]), abs(numeric), 1.0)
            worst = max(worst, abs(got_flat[i] - numeric) / denom)
    return worst
