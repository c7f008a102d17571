"""Training objectives and the optimizer schedule.

Four losses: image-text matching against in-batch mined hard negatives,
masked-language modeling with heavy caption masking, text-embedding
recovery by cosine, and soft-label BCE distillation from a teacher's
matching logits. Negatives come from the batch's weak similarity matrix
(the external embedding model's text-by-image scores).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import build_joint_sequence, itm_logit, mlm_logits, recover_text_embedding
from .errors import ConfigError, NumericError
from .model import JointModel
from .text import MASK_ID, TokenizedText


# ---------------------------------------------------------------------------
# weak similarity and negative mining


def weak_similarity(text_embeddings: np.ndarray, image_embeddings: np.ndarray) -> np.ndarray:
    """S[i, j]: normalized dot product of text i against image j."""
    t = text_embeddings / np.linalg.norm(text_embeddings, axis=1, keepdims=True)
    v = image_embeddings / np.linalg.norm(image_embeddings, axis=1, keepdims=True)
    return t @ v.T


@dataclass
class MiningConfig:
    negatives: int = 3
    mode: str = "softmax"          # softmax | topk
    temperature: float = 1.0

    def validate(self, batch_size: int) -> None:
        if self.mode not in ("softmax", "topk"):
            raise ConfigError(f"unknown mining mode {self.mode!r}")
        if self.negatives >= batch_size:
            raise ConfigError(
                f"{self.negatives} negatives need a batch larger than {self.negatives}, got {batch_size}"
            )
        if self.negatives < 1:
            raise ConfigError("negatives per sample must be at least 1")


@dataclass
class MinedNegatives:
    image_negatives: list[list[int]]   # per anchor: indices of negative images
    text_negatives: list[list[int]]    # per anchor: indices of negative texts


def _top_k(scores: np.ndarray, skip: int, k: int) -> list[int]:
    order = sorted((j for j in range(len(scores)) if j != skip), key=lambda j: (-scores[j], j))
    return order[:k]


def _sample_k(scores: np.ndarray, skip: int, k: int, temperature: float, rng: np.random.Generator) -> list[int]:
    candidates = np.array([j for j in range(len(scores)) if j != skip])
    logits = scores[candidates] / temperature
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    picked = rng.choice(candidates, size=k, replace=False, p=probs)
    return [int(j) for j in picked]


def mine_negatives(
    similarity: np.ndarray, cfg: MiningConfig, rng: np.random.Generator | None = None
) -> MinedNegatives:
    """Hardest (or similarity-sampled) non-anchor indices per anchor.

    Image negatives for anchor i come from row i (text i against other
    images); text negatives come from column i (other texts against
    image i). Deterministic mode takes the top scores with ties broken
    by lower index; sampling mode draws without replacement with
    probability proportional to softmax(score / temperature).
    """
    b = similarity.shape[0]
    if similarity.shape != (b, b):
        raise ConfigError(f"similarity matrix must be square, got {similarity.shape}")
    cfg.validate(b)
    if cfg.mode == "softmax" and rng is None:
        raise ConfigError("softmax mining needs a seeded generator")
    image_negatives, text_negatives = [], []
    for i in range(b):
        row = similarity[i, :]
        col = similarity[:, i]
        if cfg.mode == "topk":
            image_negatives.append(_top_k(row, i, cfg.negatives))
            text_negatives.append(_top_k(col, i, cfg.negatives))
        else:
            image_negatives.append(_sample_k(row, i, cfg.negatives, cfg.temperature, rng))
            text_negatives.append(_sample_k(col, i, cfg.negatives, cfg.temperature, rng))
    return MinedNegatives(image_negatives, text_negatives)


# ---------------------------------------------------------------------------
# masking


def apply_mlm_mask(text: TokenizedText, p: float, rng: np.random.Generator) -> TokenizedText:
    """Mask each caption token independently with probability p.

    Specials never mask (only content positions are touched) and at
    least one token is forced masked when the draw selects none.
    Original ids land in ``mask_targets``.
    """
    content = text.content_ids
    if len(content) == 0:
        raise ConfigError("cannot mask an empty caption")
    chosen = rng.random(len(content)) < p
    if not chosen.any():
        chosen[rng.integers(len(content))] = True
    positions = np.flatnonzero(chosen).astype(np.intp)
    targets = content[positions].copy()
    ids = text.ids.copy()
    ids[1 + positions] = MASK_ID
    return TokenizedText(
        caption=text.caption, ids=ids, mask_positions=positions, mask_targets=targets
    )


# ---------------------------------------------------------------------------
# losses


def _as_column(logits: list[Tensor] | Tensor) -> Tensor:
    if isinstance(logits, Tensor):
        return logits
    return ag.concat_rows(logits)


def itm_loss(pos_logits: list[Tensor] | Tensor, neg_logits: list[Tensor] | Tensor | None) -> Tensor:
    """Mean binary cross-entropy, labels 1 for positives and 0 for
    negatives, in the log-sum-exp-stable softplus form."""
    pos = _as_column(pos_logits)
    if pos.data.size == 0:
        raise ConfigError("itm loss needs at least one positive pair")
    terms = [ag.tsum(ag.softplus(ag.neg(pos)))]
    count = pos.data.size
    if neg_logits is not None:
        neg = _as_column(neg_logits)
        if neg.data.size:
            terms.append(ag.tsum(ag.softplus(neg)))
            count += neg.data.size
    total = terms[0] if len(terms) == 1 else ag.add(terms[0], terms[1])
    return ag.scale(total, 1.0 / count)


def mlm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy over the masked positions."""
    n = logits.data.shape[0]
    if n == 0 or n != len(targets):
        raise ConfigError(f"{n} mask logit rows against {len(targets)} targets")
    log_probs = ag.row_log_softmax(logits)
    return ag.neg(ag.tmean(ag.pick(log_probs, np.arange(n), targets)))


def recovery_loss(pred: Tensor, target: np.ndarray, eps: float = 1e-8) -> Tensor:
    """1 - cosine(pred, target); the denominator keeps an epsilon so a
    zero prediction stays finite."""
    target = np.asarray(target, dtype=np.float64).reshape(1, -1)
    if not np.any(target):
        raise ConfigError("recovery target must be nonzero")
    if pred.data.shape != target.shape:
        raise ConfigError(f"recovery shapes disagree: {pred.data.shape} vs {target.shape}")
    t = Tensor(target)
    dot = ag.tsum(ag.mul(pred, t))
    norm_p = ag.sqrt(ag.tsum(ag.mul(pred, pred)))
    norm_t = ag.sqrt(ag.tsum(ag.mul(t, t)))
    denom = ag.add(ag.mul(norm_p, norm_t), Tensor(eps))
    return ag.sub(Tensor(1.0), ag.div(dot, denom))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def distillation_loss(teacher_logit: float, student_logit: Tensor) -> Tensor:
    """Soft-label BCE: the teacher's sigmoid is the target for the
    student's sigmoid, in the stable softplus form."""
    if not np.isfinite(teacher_logit):
        raise NumericError(f"teacher logit is not finite: {teacher_logit}")
    y = _sigmoid(float(teacher_logit))
    # y*softplus(-s) + (1-y)*softplus(s)
    a = ag.scale(ag.tsum(ag.softplus(ag.neg(student_logit))), y)
    b = ag.scale(ag.tsum(ag.softplus(student_logit)), 1.0 - y)
    return ag.add(a, b)


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class OptimizerConfig:
    base_lr: float = 3e-4
    weight_decay: float = 0.05
    warmup_steps: int = 100
    warmup_lr: float = 1e-6
    min_lr: float = 1e-6
    decay_rate: float = 0.9
    steps_per_epoch: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup to the base rate, then per-epoch multiplicative
    decay with a floor. Epochs count from the end of warmup, so the
    warmup endpoint hits the base rate exactly."""
    if step < 0:
        raise ConfigError(f"negative step {step}")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        frac = step / cfg.warmup_steps
        return cfg.warmup_lr + frac * (cfg.base_lr - cfg.warmup_lr)
    epochs = (step - cfg.warmup_steps) // cfg.steps_per_epoch
    return max(cfg.min_lr, cfg.base_lr * cfg.decay_rate**epochs)


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Updates allocate fresh arrays instead of mutating in place, so tensor
    values stay immutable once created.
    """

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c = self.cfg
        bias1 = 1.0 - c.beta1**self.t
        bias2 = 1.0 - c.beta2**self.t
        for key, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self._m[key] = c.beta1 * self._m[key] + (1.0 - c.beta1) * g
            self._v[key] = c.beta2 * self._v[key] + (1.0 - c.beta2) * g * g
            m_hat = self._m[key] / bias1
            v_hat = self._v[key] / bias2
            p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + c.eps) + c.weight_decay * p.data)


# ---------------------------------------------------------------------------
# batches and steps


@dataclass
class TrainingBatch:
    """Index i pairs caption i with image i."""

    image_ids: list[str]
    captions: list[TokenizedText]
    vision_tokens: list[np.ndarray]         # raw (n, d_vision) matrices
    image_embeddings: np.ndarray            # (B, d_emb)
    text_embeddings: np.ndarray             # (B, d_emb)

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass
class LossWeights:
    itm: float = 1.0
    mlm: float = 1.0
    recovery: float = 1.0
    distillation: float = 0.0

    def active(self) -> bool:
        return any(w > 0 for w in (self.itm, self.mlm, self.recovery, self.distillation))


@dataclass
class TrainStepConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    mining: MiningConfig = field(default_factory=MiningConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mask_prob: float = 0.5


def _pair_logit(model: JointModel, vision: Tensor, text: TokenizedText) -> Tensor:
    seq = build_joint_sequence(vision, text, model.encoder)
    return itm_logit(seq, model.encoder)


def train_step(
    batch: TrainingBatch,
    model: JointModel,
    cfg: TrainStepConfig,
    optimizer: AdamW,
    step: int,
    rng: np.random.Generator,
    teacher: JointModel | None = None,
) -> dict[str, float]:
    """One optimizer step over the weighted sum of active losses.

    Returns the per-loss scalars. With every weight at zero the
    parameters are left untouched. A non-finite component aborts with an
    error naming the loss. Teacher forwards run untaped, so the teacher
    never accumulates gradients.
    """
    w = cfg.weights
    if not w.active():
        return {"total": 0.0}
    if w.distillation > 0 and teacher is None:
        raise ConfigError("distillation weight set but no teacher given")

    b = len(batch)
    similarity = weak_similarity(batch.text_embeddings, batch.image_embeddings)
    mined = mine_negatives(similarity, cfg.mining, rng)
    # pair list shared by ITM and distillation: positives then mined negatives
    neg_pairs: list[tuple[int, int]] = []    # (caption index, image index)
    for i in range(b):
        for j in mined.image_negatives[i]:
            neg_pairs.append((i, j))
        for j in mined.text_negatives[i]:
            neg_pairs.append((j, i))

    teacher_pos: list[float] = []
    teacher_neg: list[float] = []
    if w.distillation > 0:
        assert teacher is not None
        cache = {i: teacher.adapt(batch.vision_tokens[i]) for i in range(b)}
        teacher_pos = [
            _pair_logit(teacher, cache[i], batch.captions[i]).item() for i in range(b)
        ]
        teacher_neg = [
            _pair_logit(teacher, cache[j], batch.captions[i]).item() for (i, j) in neg_pairs
        ]

    tape = ag.Tape()
    breakdown: dict[str, float] = {}
    with ag.record(tape):
        adapted = [model.adapt(raw) for raw in batch.vision_tokens]
        weighted: list[Tensor] = []

        if w.itm > 0 or w.distillation > 0:
            pos_logits = [
                _pair_logit(model, adapted[i], batch.captions[i]) for i in range(b)
            ]
            neg_logits = [
                _pair_logit(model, adapted[j], batch.captions[i]) for (i, j) in neg_pairs
            ]
            if w.itm > 0:
                loss_itm = itm_loss(pos_logits, neg_logits)
                breakdown["itm"] = loss_itm.item()
                weighted.append(ag.scale(loss_itm, w.itm))
            if w.distillation > 0:
                terms = [
                    distillation_loss(t, s)
                    for t, s in zip(teacher_pos + teacher_neg, pos_logits + neg_logits)
                ]
                total = terms[0]
                for term in terms[1:]:
                    total = ag.add(total, term)
                loss_distill = ag.scale(total, 1.0 / len(terms))
                breakdown["distillation"] = loss_distill.item()
                weighted.append(ag.scale(loss_distill, w.distillation))

        if w.mlm > 0:
            terms = []
            for i in range(b):
                masked = apply_mlm_mask(batch.captions[i], cfg.mask_prob, rng)
                seq = build_joint_sequence(adapted[i], masked, model.encoder)
                logits = mlm_logits(seq, model.encoder)
                terms.append(mlm_loss(logits, seq.masked_targets))
            total = terms[0]
            for term in terms[1:]:
                total = ag.add(total, term)
            loss_mlm = ag.scale(total, 1.0 / b)
            breakdown["mlm"] = loss_mlm.item()
            weighted.append(ag.scale(loss_mlm, w.mlm))

        if w.recovery > 0:
            terms = []
            for i in range(b):
                pred = recover_text_embedding(batch.captions[i], model.encoder)
                terms.append(recovery_loss(pred, batch.text_embeddings[i]))
            total = terms[0]
            for term in terms[1:]:
                total = ag.add(total, term)
            loss_rec = ag.scale(total, 1.0 / b)
            breakdown["recovery"] = loss_rec.item()
            weighted.append(ag.scale(loss_rec, w.recovery))

        loss = weighted[0]
        for term in weighted[1:]:
            loss = ag.add(loss, term)

    for name, value in breakdown.items():
        if not np.isfinite(value):
            raise NumericError(f"{name} loss is not finite: {value}")
    breakdown["total"] = loss.item()
    if not np.isfinite(breakdown["total"]):
        raise NumericError(f"total loss is not finite: {breakdown['total']}")

    optimizer.zero_grad()
    tape.backward(loss)
    optimizer.step(lr_at(step, cfg.optimizer))
    return breakdown


def run_steps(
    model: JointModel,
    batches: Sequence[TrainingBatch],
    cfg: TrainStepConfig,
    steps: int,
    rng: np.random.Generator,
    teacher: JointModel | None = None,
    start_step: int = 0,
    on_step=None,
) -> list[dict[str, float]]:
    """Cycle through the batches for the given number of steps."""
    if steps > 0 and not batches:
        raise ConfigError("no training batches")
    optimizer = AdamW(model.named_tensors(), cfg.optimizer)
    history = []
    for k in range(steps):
        batch = batches[k % len(batches)]
        losses = train_step(batch, model, cfg, optimizer, start_step + k, rng, teacher)
        history.append(losses)
        if on_step is not None:
            on_step(start_step + k, losses)
    return history


def distill_local_to_compressed(
    teacher: JointModel,
    student: JointModel,
    batches: Sequence[TrainingBatch],
    cfg: TrainStepConfig,
    steps: int,
    rng: np.random.Generator,
) -> list[dict[str, float]]:
    """Train the student against the frozen teacher's matching logits.

    The teacher is verified bit-identical before and after. Both models
    must accept the same raw vision input.
    """
    if teacher.config.vision_dim != student.config.vision_dim:
        raise ConfigError(
            f"teacher takes {teacher.config.vision_dim}-wide vision tokens, "
            f"student takes {student.config.vision_dim}"
        )
    if cfg.weights.distillation <= 0:
        raise ConfigError("distillation weight must be positive")
    before = {k: t.data.copy() for k, t in teacher.named_tensors().items()}
    history = run_steps(student, batches, cfg, steps, rng, teacher=teacher)
    after = teacher.named_tensors()
    for key, old in before.items():
        if not np.array_equal(old, after[key].data):
            raise NumericError(f"teacher parameter {key} changed during distillation")
    return history
