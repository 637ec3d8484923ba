"""Run configuration: one YAML file with a section per concern.

Unknown keys are rejected at every level; every field has a default, and the
fully resolved configuration is written next to each run's outputs.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .synthdata import CipherTaskSpec, ConfigError

SEED_ENV = "QBTLAB_SEED"


@dataclass
class ModelSection:
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 128
    dropout: float = 0.1
    tie_encoder_head: bool = True
    tie_decoder_head: bool = True
    share_enc_dec_embeddings: bool = False
    encoder_target_lang_embedding: bool = False


@dataclass
class InitSection:
    method: str = "crosslingual"  # or "random"
    dim: int = 64
    window: int = 2
    refine_iters: int = 20
    row_norm: float = 1.0


@dataclass
class OptimizerSection:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    grad_clip: float | None = None


@dataclass
class PenaltySection:
    enabled: bool = True
    weight: float = 0.05
    eps: float = 0.1


@dataclass
class NoiseSection:
    drop_prob: float = 0.1
    shuffle_window: int = 3


@dataclass
class TrainingSection:
    batch_size: int = 32
    schedule: str = "qbt-staged"
    # qbt-staged: optional DAE, warmup, then EBT : EBTD : BT split of the budget
    dae_steps: int = 0
    warmup_steps: int = 5000
    total_steps: int | None = 20000
    total_seconds: float | None = None
    split: list[float] = field(default_factory=lambda: [4.0, 16.0, 12.0])
    # bt baseline: DAE for dae_steps, then BT for the remaining budget
    # qbt-synced / ablations: iteration or time budget
    synced_iterations: int | None = 500
    synced_seconds: float | None = None
    log_every: int = 100
    checkpoint_every: int = 1000


@dataclass
class EvaluationSection:
    eval_every: int = 500
    eval_sentences: int = 200
    generator: str = "auto"  # auto: NAR while only the encoder trains, AR otherwise
    patience: int | None = None


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    data_dir: str | None = None
    seed: int = 0
    task: CipherTaskSpec = field(default_factory=lambda: CipherTaskSpec(latent_process="markov"))
    model: ModelSection = field(default_factory=ModelSection)
    init: InitSection = field(default_factory=InitSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    penalty: PenaltySection = field(default_factory=PenaltySection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    @property
    def resolved_data_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.output_dir) / "data"

    def validate(self) -> None:
        self.task.validate()
        if self.init.method not in ("crosslingual", "random"):
            raise ConfigError(f"init.method must be 'crosslingual' or 'random', got {self.init.method!r}")
        if self.evaluation.generator not in ("auto", "ar", "nar"):
            raise ConfigError("evaluation.generator must be auto, ar or nar")
        if self.training.batch_size < 1:
            raise ConfigError("training.batch_size must be positive")
        if len(self.training.split) != 3 or min(self.training.split) < 0 or sum(self.training.split) <= 0:
            raise ConfigError("training.split needs three nonnegative weights (EBT, EBTD, BT)")
        if self.task.max_len > self.model.max_positions:
            raise ConfigError("task.max_len exceeds model.max_positions")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or 'root'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'root'}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default) and value is not None:
            kwargs[name] = _build(type(default), value, f"{where}.{name}".strip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict | None, apply_env: bool = True) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "")
    if apply_env and os.environ.get(SEED_ENV):
        cfg.seed = int(os.environ[SEED_ENV])
    cfg.validate()
    return cfg


def load_config(path, apply_env: bool = True) -> RunConfig:
    with open(path) as f:
        data = yaml.safe_load(f)
    return config_from_dict(data, apply_env)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    data = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section in override {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data, apply_env=False)
