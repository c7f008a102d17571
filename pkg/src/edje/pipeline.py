"""End-to-end orchestration: data loading, training runs, feature
precomputation, and evaluation against a feature store.

A run directory accumulates: resolved.cfg (the exact configuration),
run_meta.txt (config hash and package version), vocab.txt, the model
checkpoint, and a per-step loss log. Everything is deterministic given
the seed, so re-running a command reproduces its outputs byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .autograd import Tensor
from .config import Config, load_config
from .datafiles import read_embeddings, read_eval_manifest, read_train_manifest
from .encoder import build_joint_sequence, itm_logit
from .errors import ConfigError, DataError, NumericError
from .model import JointModel, ModelConfig
from .retrieval import EmbeddingIndex, EvaluationResult, Scorer, evaluate, oracle_scorer
from .store import FeatureRecord, FeatureStore, FeatureStoreWriter, RawDump, ingest_raw_dump
from .text import TokenizedText, Vocabulary, tokenize
from .training import TrainingBatch, TrainStepConfig, run_steps


@dataclass
class Dataset:
    """Synth outputs loaded into memory (desk scale keeps this cheap)."""

    dump: RawDump
    train_rows: list
    eval_rows: list
    image_embeddings: dict[str, np.ndarray]
    text_embeddings: dict[str, np.ndarray]

    @classmethod
    def load(cls, config: Config) -> "Dataset":
        paths = config.paths
        dump = ingest_raw_dump(paths.resolve("raw_tokens.edjr"), config.model.vision_dim)
        return cls(
            dump=dump,
            train_rows=read_train_manifest(paths.resolve("train_manifest.tsv")),
            eval_rows=read_eval_manifest(paths.resolve("eval_manifest.tsv")),
            image_embeddings=read_embeddings(paths.resolve("image_embeddings.edjt")),
            text_embeddings=read_embeddings(paths.resolve("text_embeddings.edjt")),
        )

    def build_vocabulary(self) -> Vocabulary:
        return Vocabulary.build(row.caption for row in self.train_rows)

    def training_batches(
        self, config: Config, vocab: Vocabulary, steps: int, rng: np.random.Generator
    ) -> list[TrainingBatch]:
        """One batch per step, reshuffling the train split every epoch."""
        rows = [r for r in self.train_rows if r.split == "train"]
        if not rows:
            raise DataError("train manifest has no rows with split=train")
        batch_size = config.training.batch_size
        if batch_size > len(rows):
            raise ConfigError(f"batch size {batch_size} exceeds {len(rows)} training rows")
        eval_by_pair = {
            (r.image_id, r.caption): r.caption_id for r in self.eval_rows
        }
        tokenized = {}
        raw_cache = {}
        for row in rows:
            key = (row.image_id, row.caption)
            if key not in eval_by_pair:
                raise DataError(f"train row not present in eval manifest: {key}")
            tokenized[key] = tokenize(row.caption, vocab, config.model.text_max_len)
            if row.image_id not in raw_cache:
                raw_cache[row.image_id] = self.dump.read(row.image_id)

        batches: list[TrainingBatch] = []
        per_epoch = max(1, len(rows) // batch_size)
        while len(batches) < steps:
            order = rng.permutation(len(rows))
            for b in range(per_epoch):
                picked = [rows[i] for i in order[b * batch_size : (b + 1) * batch_size]]
                if len(picked) < batch_size:
                    continue
                keys = [(r.image_id, r.caption) for r in picked]
                batches.append(
                    TrainingBatch(
                        image_ids=[r.image_id for r in picked],
                        captions=[tokenized[k] for k in keys],
                        vision_tokens=[raw_cache[r.image_id] for r in picked],
                        image_embeddings=np.stack(
                            [self.image_embeddings[r.image_id] for r in picked]
                        ),
                        text_embeddings=np.stack(
                            [self.text_embeddings[eval_by_pair[k]] for k in keys]
                        ),
                    )
                )
                if len(batches) >= steps:
                    break
        return batches

    def steps_per_epoch(self, batch_size: int) -> int:
        # tiny datasets would decay the rate every few steps; floor the
        # epoch length so the multiplicative decay stays an annealing
        # schedule rather than a cliff
        rows = sum(1 for r in self.train_rows if r.split == "train")
        return max(50, math.ceil(rows / batch_size))


# ---------------------------------------------------------------------------
# run directory bookkeeping


def prepare_run_dir(config: Config, command: str) -> Path:
    run_dir = Path(config.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved.cfg").write_text(config.resolved_text(), encoding="utf-8")
    (run_dir / "run_meta.txt").write_text(
        f"command = {command}\nconfig_hash = {config.hash()}\nedje_version = {__version__}\n",
        encoding="utf-8",
    )
    return run_dir


def load_run_model(run_dir: Path | str, model_config: ModelConfig) -> JointModel:
    run_dir = Path(run_dir)
    vocab_path = run_dir / "vocab.txt"
    checkpoint = run_dir / "checkpoint.edjt"
    for path in (vocab_path, checkpoint):
        if not path.exists():
            raise DataError(f"missing run artifact: {path} (train first)")
    vocab = Vocabulary.load(vocab_path)
    return JointModel.load(checkpoint, model_config, vocab)


def load_teacher(teacher_run_dir: Path | str) -> JointModel:
    """A teacher is a completed run directory: its resolved.cfg supplies
    the model shape, vocab.txt and checkpoint.edjt supply the weights."""
    teacher_dir = Path(teacher_run_dir)
    resolved = teacher_dir / "resolved.cfg"
    if not resolved.exists():
        raise DataError(f"teacher run dir {teacher_dir} has no resolved.cfg")
    teacher_config = load_config(resolved)
    return load_run_model(teacher_dir, teacher_config.model)


# ---------------------------------------------------------------------------
# training


def run_training(config: Config, teacher_run_dir: Path | str | None = None) -> Path:
    """Pre-train (plus optional fine-tune phase) and write the checkpoint.

    With a teacher the distillation loss joins the objective at
    training.weight_distill. A non-finite loss aborts, keeping the
    parameters of the last finite step in the checkpoint.
    """
    run_dir = prepare_run_dir(config, "train")
    data = Dataset.load(config)
    vocab = data.build_vocabulary()
    vocab.save(run_dir / "vocab.txt")

    rng = np.random.default_rng(config.seed)
    model = JointModel.init(config.model, vocab, rng)

    teacher = None
    if teacher_run_dir:
        teacher = load_teacher(teacher_run_dir)
        if len(teacher.vocab) != len(vocab):
            raise ConfigError(
                "teacher vocabulary differs from this dataset's; train the teacher "
                "on the same data directory"
            )

    if config.training.steps_per_epoch <= 0:
        config.training.steps_per_epoch = data.steps_per_epoch(config.training.batch_size)

    log_lines: list[str] = []
    checkpoint_path = run_dir / "checkpoint.edjt"

    def on_step(step: int, losses: dict[str, float]) -> None:
        parts = "\t".join(f"{k}={v:.6f}" for k, v in sorted(losses.items()))
        log_lines.append(f"{step}\t{parts}")
        if (step + 1) % config.training.checkpoint_every == 0:
            model.save(checkpoint_path)

    def phase(step_cfg: TrainStepConfig, steps: int, start: int) -> None:
        if teacher is not None:
            step_cfg.weights.distillation = config.training.weight_distill
        batches = data.training_batches(config, vocab, steps, rng)
        run_steps(
            model, batches, step_cfg, steps, rng,
            teacher=teacher, start_step=start, on_step=on_step,
        )

    try:
        phase(config.train_step_config("pretrain"), config.training.steps, 0)
        if config.training.finetune_steps > 0:
            phase(
                config.train_step_config("finetune"),
                config.training.finetune_steps,
                config.training.steps,
            )
    except NumericError:
        model.save(checkpoint_path)  # parameters of the last finite step
        (run_dir / "loss_log.tsv").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
        raise

    model.save(checkpoint_path)
    (run_dir / "loss_log.tsv").write_text(
        ("\n".join(log_lines) + "\n") if log_lines else "", encoding="utf-8"
    )
    return checkpoint_path


# ---------------------------------------------------------------------------
# precompute


def run_precompute(config: Config) -> tuple[Path, str]:
    """Run the adapter over every raw record and cache fp16 features."""
    run_dir = Path(config.paths.run_dir)
    model = load_run_model(run_dir, config.model)
    dump = ingest_raw_dump(config.paths.resolve("raw_tokens.edjr"), config.model.vision_dim)
    store_path = config.paths.resolve("features.edjf")
    if store_path.exists():
        store_path.unlink()
    with FeatureStoreWriter(store_path) as writer:
        for image_id in dump.ids():
            tokens = model.adapt(dump.read(image_id))
            writer.write_record(FeatureRecord.from_tokens(image_id, tokens.data, 16))
    stats = FeatureStore(store_path).stats()
    return store_path, stats.summary()


# ---------------------------------------------------------------------------
# evaluation


def build_index(config: Config, split: str) -> EmbeddingIndex:
    rows = read_eval_manifest(config.paths.resolve("eval_manifest.tsv"))
    if split != "all":
        rows = [r for r in rows if r.split == split]
    if not rows:
        raise DataError(f"eval manifest has no rows for split {split!r}")
    image_embeddings = read_embeddings(config.paths.resolve("image_embeddings.edjt"))
    text_embeddings = read_embeddings(config.paths.resolve("text_embeddings.edjt"))
    image_ids = sorted({r.image_id for r in rows})
    caption_ids = [r.caption_id for r in rows]
    missing = [i for i in image_ids if i not in image_embeddings][:10]
    missing += [c for c in caption_ids if c not in text_embeddings][:10]
    if missing:
        raise DataError(f"ids without embeddings (first 10): {missing[:10]}")
    return EmbeddingIndex(
        image_ids=image_ids,
        image_embeddings=np.stack([image_embeddings[i] for i in image_ids]),
        caption_ids=caption_ids,
        caption_embeddings=np.stack([text_embeddings[c] for c in caption_ids]),
        caption_to_image={r.caption_id: r.image_id for r in rows},
    )


class StoreScorer:
    """ITM logits over cached features; the adapter never runs here."""

    def __init__(self, model: JointModel, store: FeatureStore, captions: dict[str, str]):
        self.model = model
        self.captions = captions
        self._features: dict[str, Tensor] = {}
        for record in store:
            self._features[record.image_id] = Tensor(record.tokens())
        self._tokenized: dict[str, TokenizedText] = {}

    def _text(self, caption_id: str) -> TokenizedText:
        if caption_id not in self._tokenized:
            caption = self.captions.get(caption_id)
            if caption is None:
                raise DataError(f"no caption text for id {caption_id!r}")
            self._tokenized[caption_id] = tokenize(
                caption, self.model.vocab, self.model.config.text_max_len
            )
        return self._tokenized[caption_id]

    def pair_logit(self, image_id: str, caption_id: str) -> float:
        vision = self._features.get(image_id)
        if vision is None:
            raise DataError(f"image id {image_id!r} missing from feature store")
        seq = build_joint_sequence(vision, self._text(caption_id), self.model.encoder)
        return itm_logit(seq, self.model.encoder).item()

    def __call__(self, direction: str, query_id: str, candidate_id: str) -> float:
        if direction == "t2i":
            return self.pair_logit(candidate_id, query_id)
        return self.pair_logit(query_id, candidate_id)


def run_evaluation(config: Config, split: str | None = None, pool_size: int | None = None) -> EvaluationResult:
    eval_cfg: EvalConfig = config.eval
    split = split or eval_cfg.split
    pool = pool_size or eval_cfg.pool_size
    index = build_index(config, split)
    if eval_cfg.oracle_scorer:
        scorer: Scorer = oracle_scorer(index)
    else:
        run_dir = Path(config.paths.run_dir)
        model = load_run_model(run_dir, config.model)
        store = FeatureStore(config.paths.resolve("features.edjf"))
        captions = {
            r.caption_id: r.caption
            for r in read_eval_manifest(config.paths.resolve("eval_manifest.tsv"))
        }
        scorer = StoreScorer(model, store, captions)
    return evaluate(index, scorer, pool_size=pool)
