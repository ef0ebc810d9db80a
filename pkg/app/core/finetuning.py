from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from app.core.checkpoint import load_checkpoint
from app.core.corpus_prep import CleanTweet, clean_tweet, load_emoji_table
from app.core.encoder_model import EncoderModel, INIT_STD
from app.core.statistics import macro_f1
from app.core.tokenizer import CLS_ID, PAD_ID, SEP_ID, Vocabulary, encode
from app.errors import ConfigError, DataError, RecordRejected


# dataset name (lower-cased) -> finetuning epochs
EPOCH_POLICY: dict[str, int] = {
    "sst-2": 3,
    "sst2": 3,
    "cc": 3,
    "se": 3,
    "vc": 5,
    "vs": 5,
    "mvs": 10,
    "mvc": 10,
}
DEFAULT_EPOCHS = 3
TRAIN_SUFFIX = ".train.csv"
DEV_SUFFIX = ".dev.csv"
TEST_SUFFIX = ".test.csv"


def epochs_for(name: str) -> int:
    return EPOCH_POLICY.get(name.lower(), DEFAULT_EPOCHS)


@dataclass
class FinetuneConfig:
    learning_rate: float = 2e-5
    batch_size: int = 16
    epochs: int | None = None

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"finetune.learning_rate must be positive, got {self.learning_rate}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"finetune.batch_size must be a positive integer, got {self.batch_size!r}")
        if self.epochs is not None and (not isinstance(self.epochs, int) or self.epochs < 1):
            raise ConfigError(f"finetune.epochs must be a positive integer, got {self.epochs!r}")


@dataclass
class LabeledDataset:
    name: str
    classes: tuple[str, ...]
    train: list[tuple[str, str]]
    dev: list[tuple[str, str]]
    epochs: int = DEFAULT_EPOCHS

    def __post_init__(self) -> None:
        known = set(self.classes)
        for split_name, rows in (("train", self.train), ("dev", self.dev)):
            for text, label in rows:
                if label not in known:
                    raise DataError(f"{self.name}.{split_name}: label {label!r} not in classes {list(self.classes)}")
        missing = known - {label for _, label in self.train}
        if missing:
            raise DataError(
                f"{self.name}: classes {sorted(missing)} have no train examples; head target undefined"
            )


@dataclass
class FinetuneResult:
    dataset: str
    seed: int
    f1: float
    epochs: int
    predictions: list[str] = field(default_factory=list)


def _text_hash(text: str) -> str:
    return hashlib.sha1(text.encode("utf-8")).hexdigest()


def _read_split(path: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"dataset file not found: {path}") from exc
    missing = {"text", "label"} - set(frame.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)} (expected header text,label)")
    return frame[["text", "label"]]


def _normalize_texts(frame: pd.DataFrame, emoji_table: dict[str, str], name: str) -> pd.DataFrame:
    texts = []
    for i, text in enumerate(frame["text"]):
        try:
            texts.append(clean_tweet(CleanTweet(id=f"{name}:{i}", text=text), emoji_table).text)
        except RecordRejected:
            texts.append("")
    return frame.assign(text=texts)


def load_labeled_dataset(
    directory: str | Path,
    name: str,
    normalize: bool = False,
    emoji_table: dict[str, str] | None = None,
) -> LabeledDataset:
    """Read ``<name>.train.csv`` / ``<name>.dev.csv``; dev rows whose text also
    occurs in train are dropped so the splits stay disjoint by text hash."""
    directory = Path(directory)
    train = _read_split(directory / f"{name}{TRAIN_SUFFIX}")
    dev = _read_split(directory / f"{name}{DEV_SUFFIX}")
    if normalize:
        table = emoji_table if emoji_table is not None else load_emoji_table()
        train = _normalize_texts(train, table, name)
        dev = _normalize_texts(dev, table, name)

    train_hashes = set(train["text"].map(_text_hash))
    overlap = dev["text"].map(_text_hash).isin(train_hashes)
    if overlap.any():
        logging.warning(f"DATASET_OVERLAP: dataset={name} dropped_dev_rows={int(overlap.sum())}")
        dev = dev[~overlap]

    classes = tuple(sorted(set(train["label"]) | set(dev["label"])))
    if not len(train) or not len(dev):
        raise DataError(f"{name}: train and dev splits must both be non-empty")
    return LabeledDataset(
        name=name,
        classes=classes,
        train=list(train.itertuples(index=False, name=None)),
        dev=list(dev.itertuples(index=False, name=None)),
        epochs=epochs_for(name),
    )


def discover_datasets(directory: str | Path) -> list[str]:
    directory = Path(directory)
    names = []
    for path in sorted(directory.glob(f"*{TRAIN_SUFFIX}")):
        name = path.name[: -len(TRAIN_SUFFIX)]
        if (directory / f"{name}{DEV_SUFFIX}").exists():
            names.append(name)
    return names


def split_labeled_csv(
    path: str | Path,
    out_dir: str | Path,
    name: str | None = None,
    seed: int = 0,
    fractions: tuple[float, float, float] = (0.5, 0.3, 0.2),
) -> dict[str, Path]:
    """Split one ``text,label`` CSV into train/dev/test files by a seeded hash order."""
    path = Path(path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = name or path.stem
    frame = _read_split(path).drop_duplicates(subset="text")
    order = frame["text"].map(lambda t: hashlib.sha1(f"{seed}:{t}".encode("utf-8")).hexdigest())
    frame = frame.assign(_order=order).sort_values("_order").drop(columns="_order")

    n = len(frame)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    parts = {
        "train": (frame.iloc[:n_train], TRAIN_SUFFIX),
        "dev": (frame.iloc[n_train : n_train + n_dev], DEV_SUFFIX),
        "test": (frame.iloc[n_train + n_dev :], TEST_SUFFIX),
    }
    written = {}
    for split, (part, suffix) in parts.items():
        target = out_dir / f"{name}{suffix}"
        part.to_csv(target, index=False, encoding="utf-8")
        written[split] = target
    logging.info(
        f"DATASET_SPLIT: dataset={name} train={len(parts['train'][0])} dev={len(parts['dev'][0])} "
        f"test={len(parts['test'][0])} seed={seed}"
    )
    return written


# ── Classification head ──────────────────────────────────────────────────────


class SequenceClassifier(nn.Module):
    """Pretrained encoder + CLS pooler -> softmax over dataset classes."""

    def __init__(self, encoder: EncoderModel, num_classes: int, generator: torch.Generator) -> None:
        super().__init__()
        self.encoder = encoder
        self.classifier = nn.Linear(encoder.config.hidden, num_classes)
        with torch.no_grad():
            nn.init.trunc_normal_(
                self.classifier.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator
            )
            self.classifier.bias.zero_()

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        seq = self.encoder.encode(ids, torch.zeros_like(ids), mask)
        return self.classifier(self.encoder.pooled(seq))


def encode_texts(texts: Sequence[str], vocab: Vocabulary, max_seq: int) -> tuple[torch.Tensor, torch.Tensor]:
    ids = np.full((len(texts), max_seq), PAD_ID, dtype=np.int64)
    for row, text in enumerate(texts):
        pieces = list(encode(text, vocab).ids[: max_seq - 2])
        seq = [CLS_ID] + pieces + [SEP_ID]
        ids[row, : len(seq)] = seq
    tensor = torch.from_numpy(ids)
    return tensor, tensor != PAD_ID


def finetune(
    checkpoint: str | Path,
    dataset: LabeledDataset,
    seed: int,
    vocab: Vocabulary,
    config: FinetuneConfig | None = None,
) -> FinetuneResult:
    """Train a classification head on dataset.train, return macro-F1 on dev."""
    config = config or FinetuneConfig()
    config.validate()
    loaded = load_checkpoint(checkpoint)
    if loaded.vocab_hash and loaded.vocab_hash != vocab.content_hash():
        raise DataError(
            f"checkpoint {checkpoint} was pretrained with a different vocabulary "
            f"({loaded.vocab_hash[:12]} != {vocab.content_hash()[:12]})"
        )
    encoder = loaded.model
    if vocab.size > encoder.config.vocab_size:
        raise DataError(f"vocabulary of {vocab.size} tokens exceeds model vocab_size {encoder.config.vocab_size}")

    epochs = config.epochs if config.epochs is not None else dataset.epochs
    label_index = {label: i for i, label in enumerate(dataset.classes)}
    train_ids, train_mask = encode_texts([t for t, _ in dataset.train], vocab, encoder.config.max_seq)
    train_labels = torch.tensor([label_index[label] for _, label in dataset.train], dtype=torch.long)
    dev_ids, dev_mask = encode_texts([t for t, _ in dataset.dev], vocab, encoder.config.max_seq)

    generator = torch.Generator().manual_seed(seed)
    model = SequenceClassifier(encoder, len(dataset.classes), generator)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, foreach=False)

    model.train()
    n = len(dataset.train)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size])
            logits = model(train_ids[idx], train_mask[idx])
            loss = F.cross_entropy(logits.to(torch.float64), train_labels[idx])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

    model.eval()
    predictions: list[int] = []
    with torch.no_grad():
        for start in range(0, len(dataset.dev), 64):
            logits = model(dev_ids[start : start + 64], dev_mask[start : start + 64])
            predictions.extend(int(i) for i in logits.argmax(dim=-1))
    predicted = [dataset.classes[i] for i in predictions]
    golds = [label for _, label in dataset.dev]
    f1 = macro_f1(predicted, golds, dataset.classes)
    logging.info(
        f"FINETUNE_DONE: dataset={dataset.name} checkpoint_step={loaded.step} seed={seed} "
        f"epochs={epochs} f1={f1:.4f}"
    )
    return FinetuneResult(dataset=dataset.name, seed=seed, f1=f1, epochs=epochs, predictions=predicted)
