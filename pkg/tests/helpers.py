"""Synthetic corpora, datasets and toy models shared by the test modules."""

from __future__ import annotations

import asyncio
import csv
from pathlib import Path

import numpy as np

from app.core.checkpoint import save_checkpoint
from app.core.corpus_prep import SentenceDoc
from app.core.encoder_model import ModelConfig, init_params
from app.core.example_gen import MAX_SEQ_LEN, ShardSet, generate_shards
from app.core.tokenizer import Vocabulary
from app.db.session import dispose_engines, get_session, init_db

# 5 specials + 59 words = a 64-token vocabulary
CHAIN_WORDS: tuple[str, ...] = tuple(f"w{i:02d}" for i in range(59))


def chain_vocab() -> Vocabulary:
    return Vocabulary.from_tokens(CHAIN_WORDS, injected=())


def chain_docs(
    count: int,
    seed: int = 0,
    sentences: int = 3,
    words_per_sentence: int = 6,
) -> list[SentenceDoc]:
    """Documents that walk the word cycle w00 -> w01 -> ... -> w58 -> w00.

    Every word is determined by its left neighbour, so a masked word is
    recoverable from context.
    """
    rng = np.random.default_rng(seed)
    docs = []
    for d in range(count):
        k = int(rng.integers(len(CHAIN_WORDS)))
        sents = []
        for _ in range(sentences):
            sents.append(" ".join(CHAIN_WORDS[(k + j) % len(CHAIN_WORDS)] for j in range(words_per_sentence)))
            k += words_per_sentence
        docs.append(SentenceDoc(id=f"doc{d:05d}", sentences=tuple(sents)))
    return docs


def echo_docs(count: int, seed: int = 0, words_per_sentence: int = 4) -> list[SentenceDoc]:
    """Two-sentence documents that repeat one document-specific word.

    A true continuation repeats the word of its first segment while a
    partner from another document almost never does, so NSP is separable.
    """
    rng = np.random.default_rng(seed)
    docs = []
    for d in range(count):
        sentence = " ".join([CHAIN_WORDS[int(rng.integers(len(CHAIN_WORDS)))]] * words_per_sentence)
        docs.append(SentenceDoc(id=f"echo{d:05d}", sentences=(sentence, sentence)))
    return docs


def toy_config(vocab_size: int = 64, **overrides) -> ModelConfig:
    values = dict(layers=2, hidden=32, heads=4, ff_dim=64, vocab_size=vocab_size, max_seq=MAX_SEQ_LEN, seed=0)
    values.update(overrides)
    return ModelConfig(**values)


def build_shards(
    out_dir: Path,
    docs: list[SentenceDoc],
    vocab: Vocabulary,
    dupe_factor: int = 1,
    seed: int = 0,
    validation_fraction: float = 0.1,
    num_shards: int = 2,
) -> ShardSet:
    return generate_shards(
        docs,
        vocab,
        dupe_factor=dupe_factor,
        seed=seed,
        out_dir=out_dir,
        num_shards=num_shards,
        validation_fraction=validation_fraction,
    )


def save_untrained(path: Path, config: ModelConfig, vocab: Vocabulary, step: int = 0) -> Path:
    return save_checkpoint(init_params(config), None, step, path, vocab_hash=vocab.content_hash())


def keyword_rows(count: int, seed: int, classes: tuple[str, ...] = ("a", "b", "c")) -> list[tuple[str, str]]:
    """Linearly separable rows: each class owns ten keywords, fillers are shared."""
    rng = np.random.default_rng(seed)
    fillers = CHAIN_WORDS[10 * len(classes) :]
    rows = []
    for i in range(count):
        k = i % len(classes)
        own = CHAIN_WORDS[10 * k : 10 * (k + 1)]
        words = list(rng.choice(own, size=3)) + list(rng.choice(fillers, size=3))
        rng.shuffle(words)
        rows.append((" ".join(words), classes[k]))
    return rows


def write_dataset(directory: Path, name: str, train: list[tuple[str, str]], dev: list[tuple[str, str]]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for split, rows in (("train", train), ("dev", dev)):
        with open(directory / f"{name}.{split}.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["text", "label"])
            writer.writerows(rows)


def run_in_session(db_url: str, work):
    """Run `work(session)` on a fresh event loop against db_url."""

    async def runner():
        try:
            await init_db(db_url)
            async with get_session(db_url) as session:
                return await work(session)
        finally:
            await dispose_engines()

    return asyncio.run(runner())
