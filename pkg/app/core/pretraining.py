from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from tqdm import tqdm

from app.core.checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint, step_dir_name
from app.core.encoder_model import EncoderModel, PretrainBatch, compute_losses
from app.core.example_gen import MAX_PREDICTIONS, RECORD_DTYPE, ShardSet, read_shard_records
from app.errors import ConfigError, DataError, NumericError


ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
METRICS_FILE = "metrics.jsonl"


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    batch_size: int = 32
    total_steps: int = 2500
    checkpoint_interval: int = 500
    eval_interval: int = 100
    eval_batches: int = 50
    seed: int = 0

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be positive, got {self.learning_rate}")
        for name in ("batch_size", "total_steps", "checkpoint_interval", "eval_interval", "eval_batches"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"train.{name} must be a positive integer, got {value!r}")
        if self.checkpoint_interval > self.total_steps:
            raise ConfigError(
                f"train.checkpoint_interval ({self.checkpoint_interval}) exceeds "
                f"train.total_steps ({self.total_steps})"
            )


@dataclass(frozen=True)
class MetricsPoint:
    step: int
    mlm_loss: float
    mlm_acc: float
    nsp_loss: float
    nsp_acc: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "MetricsPoint":
        return cls(
            step=int(data["step"]),
            mlm_loss=float(data["mlm_loss"]),
            mlm_acc=float(data["mlm_acc"]),
            nsp_loss=float(data["nsp_loss"]),
            nsp_acc=float(data["nsp_acc"]),
        )


@dataclass
class PretrainResult:
    final_checkpoint: Path
    metrics: list[MetricsPoint] = field(default_factory=list)
    last_step: int = 0
    checkpoints: list[Path] = field(default_factory=list)


def make_optimizer(model: EncoderModel, learning_rate: float) -> torch.optim.Adam:
    # constant lr, no warmup, single-tensor kernels for reproducible updates
    return torch.optim.Adam(
        model.parameters(), lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS, foreach=False
    )


class BatchSchedule:
    """Batch indices as a pure function of the step number.

    Epoch e uses permutation default_rng([seed, e]); step s (1-based) reads
    slot (s - 1) mod steps_per_epoch of epoch (s - 1) // steps_per_epoch.
    """

    def __init__(self, example_count: int, batch_size: int, seed: int) -> None:
        if example_count < 1:
            raise DataError("no training examples in the shard set")
        self.example_count = example_count
        self.batch_size = min(batch_size, example_count)
        self.seed = seed
        self.steps_per_epoch = example_count // self.batch_size
        self._cache: tuple[int, np.ndarray] | None = None

    def _permutation(self, epoch: int) -> np.ndarray:
        if self._cache is None or self._cache[0] != epoch:
            perm = np.random.default_rng([self.seed, epoch]).permutation(self.example_count)
            self._cache = (epoch, perm)
        return self._cache[1]

    def indices(self, step: int) -> np.ndarray:
        epoch, slot = divmod(step - 1, self.steps_per_epoch)
        start = slot * self.batch_size
        return self._permutation(epoch)[start : start + self.batch_size]


def load_records(paths: list[Path]) -> np.ndarray:
    if not paths:
        return np.zeros(0, dtype=RECORD_DTYPE)
    return np.concatenate([read_shard_records(p) for p in paths])


def evaluate(
    model: EncoderModel,
    records: np.ndarray,
    batch_size: int,
    max_batches: int,
    step: int,
) -> MetricsPoint:
    """Count-weighted losses/accuracies over the first max_batches held-out batches."""
    was_training = model.training
    model.eval()
    mlm_loss = mlm_acc = nsp_loss = nsp_acc = 0.0
    mlm_total = nsp_total = 0
    with torch.no_grad():
        for b in range(max_batches):
            chunk = records[b * batch_size : (b + 1) * batch_size]
            if len(chunk) == 0:
                break
            batch = PretrainBatch.from_records(chunk)
            losses = compute_losses(model(batch), batch)
            mlm_loss += float(losses.mlm_loss) * losses.mlm_count
            mlm_acc += losses.mlm_acc * losses.mlm_count
            nsp_loss += float(losses.nsp_loss) * losses.nsp_count
            nsp_acc += losses.nsp_acc * losses.nsp_count
            mlm_total += losses.mlm_count
            nsp_total += losses.nsp_count
    model.train(was_training)
    if not mlm_total:
        raise DataError("held-out set produced no evaluation batches")
    point = MetricsPoint(
        step=step,
        mlm_loss=mlm_loss / mlm_total,
        mlm_acc=mlm_acc / mlm_total,
        nsp_loss=nsp_loss / nsp_total,
        nsp_acc=nsp_acc / nsp_total,
    )
    if not all(math.isfinite(v) for v in (point.mlm_loss, point.nsp_loss)):
        raise NumericError(f"non-finite held-out loss at step {step}")
    return point


def _check_geometry(model: EncoderModel, records: np.ndarray) -> None:
    seq_len = records["input_ids"].shape[1]
    if seq_len > model.config.max_seq:
        raise ConfigError(f"shards hold sequences of {seq_len} tokens, model.max_seq is {model.config.max_seq}")
    if records["masked_positions"].shape[1] != MAX_PREDICTIONS:
        raise DataError("shard masked-slot count does not match this build")
    max_id = int(records["input_ids"].max())
    if max_id >= model.config.vocab_size:
        raise ConfigError(
            f"shards contain token id {max_id} but model.vocab_size is {model.config.vocab_size}"
        )


def write_metrics(path: Path, metrics: list[MetricsPoint]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for point in metrics:
            fh.write(json.dumps(point.to_dict(), sort_keys=True) + "\n")


def read_metrics(path: str | Path) -> list[MetricsPoint]:
    with open(path, "r", encoding="utf-8") as fh:
        return [MetricsPoint.from_dict(json.loads(line)) for line in fh if line.strip()]


def pretrain(
    config: TrainConfig,
    shards: ShardSet,
    model: EncoderModel,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    stop_at: int | None = None,
    vocab_hash: str | None = None,
    progress: bool = False,
) -> PretrainResult:
    """Run (or continue) pretraining and checkpoint into out_dir/step<N>.

    Checkpoints land at step 0, every checkpoint_interval steps and at the
    final step; held-out metrics every eval_interval steps (and at step 0).
    `stop_at` ends the run early after writing a checkpoint at that step.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_records = load_records(shards.paths)
    if len(train_records) == 0:
        raise DataError("shard set is empty")
    _check_geometry(model, train_records)
    held_out = load_records(shards.validation_paths)
    if len(held_out) == 0:
        logging.warning("PRETRAIN_NO_HELDOUT: no validation shards; evaluating on training shards")
        held_out = train_records

    schedule = BatchSchedule(len(train_records), config.batch_size, config.seed)
    metrics: list[MetricsPoint] = []
    start_step = 0
    optimizer = make_optimizer(model, config.learning_rate)

    if resume_from is not None:
        loaded: LoadedCheckpoint = load_checkpoint(resume_from, model.config)
        if vocab_hash and loaded.vocab_hash and loaded.vocab_hash != vocab_hash:
            raise DataError("resume checkpoint was trained with a different vocabulary")
        with torch.no_grad():
            for target, source in zip(model.parameters(), loaded.model.parameters()):
                target.copy_(source)
        loaded.model = model
        loaded.restore_optimizer(optimizer)
        start_step = loaded.step
        metrics = [MetricsPoint.from_dict(m) for m in loaded.train_state.get("metrics", [])]
        logging.info(f"PRETRAIN_RESUME: step={start_step} from={resume_from}")

    end_step = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    checkpoints: list[Path] = []
    last_good: Path | None = Path(resume_from) if resume_from is not None else None

    def checkpoint(step: int) -> Path:
        path = save_checkpoint(
            model,
            optimizer,
            step,
            out_dir / step_dir_name(step),
            train_state={"metrics": [m.to_dict() for m in metrics], "train_config": asdict(config)},
            vocab_hash=vocab_hash,
        )
        checkpoints.append(path)
        return path

    if start_step == 0:
        metrics.append(evaluate(model, held_out, config.batch_size, config.eval_batches, 0))
        last_good = checkpoint(0)
        write_metrics(out_dir / METRICS_FILE, metrics)

    model.train()
    step = start_step
    bar = tqdm(total=end_step, initial=start_step, disable=not progress, desc="pretrain")
    for step in range(start_step + 1, end_step + 1):
        batch = PretrainBatch.from_records(train_records[schedule.indices(step)])
        optimizer.zero_grad(set_to_none=True)
        try:
            losses = compute_losses(model(batch), batch)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}; last good checkpoint {last_good}") from exc
        total = losses.total
        if not torch.isfinite(total):
            raise NumericError(
                f"non-finite loss {float(total)} at step {step}; last good checkpoint {last_good}"
            )
        total.backward()
        optimizer.step()
        bar.update(1)

        if step % config.eval_interval == 0 or step == config.total_steps:
            point = evaluate(model, held_out, config.batch_size, config.eval_batches, step)
            metrics.append(point)
            write_metrics(out_dir / METRICS_FILE, metrics)
            logging.info(
                f"PRETRAIN_EVAL: step={step} mlm_loss={point.mlm_loss:.4f} mlm_acc={point.mlm_acc:.4f} "
                f"nsp_loss={point.nsp_loss:.4f} nsp_acc={point.nsp_acc:.4f}"
            )
        if step % config.checkpoint_interval == 0 or step == end_step:
            last_good = checkpoint(step)
    bar.close()

    if last_good is None:
        last_good = checkpoint(step)
    write_metrics(out_dir / METRICS_FILE, metrics)
    logging.info(f"PRETRAIN_DONE: last_step={step} checkpoints={len(checkpoints)} final={last_good}")
    return PretrainResult(
        final_checkpoint=last_good,
        metrics=metrics,
        last_step=step,
        checkpoints=checkpoints,
    )
