from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from dotenv import load_dotenv

from app.core.encoder_model import ModelConfig
from app.core.finetuning import FinetuneConfig
from app.core.pretraining import TrainConfig
from app.errors import ConfigError


load_dotenv()


@dataclass
class Settings:
    db_url: str
    log_level: str
    deterministic: bool
    default_jobs: int


def _parse_int(raw: str | None, default: int) -> int:
    if not raw:
        return default
    try:
        return int(raw.strip())
    except ValueError:
        return default


def _parse_flag(raw: str | None, default: bool) -> bool:
    if raw is None or not raw.strip():
        return default
    # normalize: accept 1/0, true/false, yes/no
    return raw.strip().lower() in {"1", "true", "yes", "on"}


def get_settings() -> Settings:
    db_url = os.getenv("DB_URL", "sqlite+aiosqlite:///./ctpt.db")
    log_level = os.getenv("LOG_LEVEL", "INFO").upper()
    deterministic = _parse_flag(os.getenv("CTPT_DETERMINISTIC"), True)
    default_jobs = max(1, _parse_int(os.getenv("CTPT_JOBS"), 1))

    return Settings(
        db_url=db_url,
        log_level=log_level,
        deterministic=deterministic,
        default_jobs=default_jobs,
    )


# ── Run configuration (flag > config file > default) ────────────────────────


@dataclass
class PathsConfig:
    corpus: str | None = None
    docs: str | None = None
    rejects: str | None = None
    emoji_table: str | None = None
    vocab: str | None = None
    shards: str | None = None
    checkpoints: str | None = None
    resume: str | None = None
    checkpoint: str | None = None
    datasets: str | None = None
    reports: str | None = None


@dataclass
class PrepConfig:
    dedup_threshold: float = 0.8
    normalize_datasets: bool = False


@dataclass
class VocabConfig:
    size: int = 30000


@dataclass
class ExamplesConfig:
    dupe_factor: int = 10
    num_shards: int = 4
    validation_fraction: float = 0.01


@dataclass
class EvalConfig:
    repeats: int = 10
    dataset: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    prep: PrepConfig = field(default_factory=PrepConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    examples: ExamplesConfig = field(default_factory=ExamplesConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        # section seeds always mirror the top-level seed
        data["model"].pop("seed", None)
        data["train"].pop("seed", None)
        return data

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        seed = int(data.get("seed", 0))
        model = ModelConfig(**data.get("model", {}), seed=seed)
        train = TrainConfig(**data.get("train", {}), seed=seed)
        return cls(
            seed=seed,
            jobs=int(data.get("jobs", 1)),
            paths=PathsConfig(**data.get("paths", {})),
            prep=PrepConfig(**data.get("prep", {})),
            vocab=VocabConfig(**data.get("vocab", {})),
            examples=ExamplesConfig(**data.get("examples", {})),
            model=model,
            train=train,
            finetune=FinetuneConfig(**data.get("finetune", {})),
            eval=EvalConfig(**data.get("eval", {})),
        )


# argparse dest -> dotted location in the config document
FLAG_PATHS: dict[str, str] = {
    "seed": "seed",
    "jobs": "jobs",
    "in_path": "paths.corpus",
    "docs": "paths.docs",
    "rejects": "paths.rejects",
    "emoji_table": "paths.emoji_table",
    "vocab": "paths.vocab",
    "shards": "paths.shards",
    "checkpoints": "paths.checkpoints",
    "resume": "paths.resume",
    "checkpoint": "paths.checkpoint",
    "datasets": "paths.datasets",
    "reports": "paths.reports",
    "dedup_threshold": "prep.dedup_threshold",
    "normalize_datasets": "prep.normalize_datasets",
    "size": "vocab.size",
    "dupe_factor": "examples.dupe_factor",
    "num_shards": "examples.num_shards",
    "validation_fraction": "examples.validation_fraction",
    "layers": "model.layers",
    "hidden": "model.hidden",
    "heads": "model.heads",
    "ff_dim": "model.ff_dim",
    "learning_rate": "train.learning_rate",
    "batch_size": "train.batch_size",
    "total_steps": "train.total_steps",
    "checkpoint_interval": "train.checkpoint_interval",
    "eval_interval": "train.eval_interval",
    "eval_batches": "train.eval_batches",
    "finetune_lr": "finetune.learning_rate",
    "finetune_batch_size": "finetune.batch_size",
    "epochs": "finetune.epochs",
    "repeats": "eval.repeats",
    "dataset": "eval.dataset",
}


def _section_keys() -> dict[str, set[str]]:
    defaults = RunConfig().to_dict()
    return {
        name: set(value.keys())
        for name, value in defaults.items()
        if isinstance(value, dict)
    }


def _merge_file_config(data: dict[str, Any], file_config: Mapping[str, Any]) -> None:
    sections = _section_keys()
    for key, value in file_config.items():
        if key in sections:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config section {key!r} must be an object")
            for sub_key, sub_value in value.items():
                if sub_key not in sections[key]:
                    raise ConfigError(f"unknown config key {key}.{sub_key}")
                data[key][sub_key] = sub_value
        elif key in data:
            data[key] = value
        else:
            raise ConfigError(f"unknown config key {key}")


def _set_dotted(data: dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    target = data
    for part in parts[:-1]:
        target = target[part]
    target[parts[-1]] = value


def load_config_file(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return loaded


def resolve_run_config(
    flags: Mapping[str, Any],
    file_config: Mapping[str, Any] | None = None,
) -> RunConfig:
    data = RunConfig().to_dict()
    if file_config:
        _merge_file_config(data, file_config)
    for dest, dotted in FLAG_PATHS.items():
        value = flags.get(dest)
        if value is not None:
            _set_dotted(data, dotted, value)
    try:
        return RunConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def with_vocab_size(config: RunConfig, vocab_size: int) -> RunConfig:
    return replace(config, model=replace(config.model, vocab_size=vocab_size))
