"""Line-oriented run configuration: ``section.key = value`` per line.

Blank lines and ``#`` comments are ignored. Every key must belong to the
schema below; unknown keys are rejected so typos fail loudly. The
resolved configuration (defaults filled in) serializes back to the same
format, and its hash identifies a run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .synth import SynthConfig
from .training import LossWeights, MiningConfig, OptimizerConfig, TrainStepConfig


@dataclass
class PathsConfig:
    data_dir: str = "data"
    run_dir: str = "runs/default"
    teacher_checkpoint: str = ""

    def resolve(self, name: str) -> Path:
        return Path(self.data_dir) / name


@dataclass
class TrainingConfig:
    steps: int = 500
    finetune_steps: int = 0
    batch_size: int = 8
    base_lr: float = 3e-4
    finetune_lr: float = 2e-5
    weight_decay: float = 0.05
    warmup_steps: int = 100
    warmup_lr: float = 1e-6
    min_lr: float = 1e-6
    decay_rate: float = 0.9
    steps_per_epoch: int = 0     # 0: derive from data size / batch size
    mask_prob: float = 0.5
    weight_itm: float = 1.0
    weight_mlm: float = 1.0
    weight_recovery: float = 1.0
    weight_distill: float = 1.0
    checkpoint_every: int = 100


@dataclass
class EvalConfig:
    pool_size: int = 10
    split: str = "heldout"
    oracle_scorer: bool = False


@dataclass
class BenchConfig:
    batch_size: int = 64
    iterations: int = 3
    warmup: int = 1


@dataclass
class Config:
    seed: int = 42
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    mining: MiningConfig = field(default_factory=MiningConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self) -> None:
        self.model.validate()
        self.synth.validate()
        if self.synth.vision_dim != self.model.vision_dim:
            raise ConfigError(
                f"synth.vision_dim {self.synth.vision_dim} disagrees with "
                f"model.vision_dim {self.model.vision_dim}"
            )
        if self.synth.embedding_dim != self.model.embedding_dim:
            raise ConfigError(
                f"synth.embedding_dim {self.synth.embedding_dim} disagrees with "
                f"model.embedding_dim {self.model.embedding_dim}"
            )

    def train_step_config(self, phase: str = "pretrain") -> TrainStepConfig:
        t = self.training
        steps_per_epoch = t.steps_per_epoch if t.steps_per_epoch > 0 else 1000
        base_lr = t.base_lr if phase == "pretrain" else t.finetune_lr
        return TrainStepConfig(
            weights=LossWeights(
                itm=t.weight_itm,
                mlm=t.weight_mlm,
                recovery=t.weight_recovery,
                distillation=0.0,
            ),
            mining=self.mining,
            optimizer=OptimizerConfig(
                base_lr=base_lr,
                weight_decay=t.weight_decay,
                warmup_steps=t.warmup_steps,
                warmup_lr=t.warmup_lr,
                min_lr=t.min_lr,
                decay_rate=t.decay_rate,
                steps_per_epoch=steps_per_epoch,
            ),
            mask_prob=t.mask_prob,
        )

    def resolved_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for section_name in ("paths", "model", "synth", "training", "mining", "eval", "bench"):
            section = getattr(self, section_name)
            for f in fields(section):
                value = getattr(section, f.name)
                if isinstance(value, bool):
                    value = "true" if value else "false"
                lines.append(f"{section_name}.{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode("utf-8")).hexdigest()[:16]


_SECTIONS = {
    "paths": PathsConfig,
    "model": ModelConfig,
    "synth": SynthConfig,
    "training": TrainingConfig,
    "mining": MiningConfig,
    "eval": EvalConfig,
    "bench": BenchConfig,
}


def _coerce(raw: str, target_type: type, key: str):
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {target_type.__name__}, got {raw!r}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> Config:
    config = Config()
    seen: set[str] = set()
    for lineno, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        if key == "seed":
            config.seed = _coerce(raw_value, int, key)
            continue
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section_name, field_name = key.split(".", 1)
        section_type = _SECTIONS.get(section_name)
        if section_type is None:
            raise ConfigError(f"{source}:{lineno}: unknown section {section_name!r}")
        section = getattr(config, section_name)
        matching = {f.name: f for f in fields(section_type)}
        if field_name not in matching:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        target_type = type(getattr(section, field_name))
        setattr(section, field_name, _coerce(raw_value, target_type, key))
    config.validate()
    return config


def load_config(path: Path | str) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
