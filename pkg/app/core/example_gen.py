"""MLM + NSP pretraining examples and their fixed-size binary shard format.

Shard layout (little-endian): magic ``CTPT``, u32 version, u64 record count,
then fixed-size records of RECORD_DTYPE. Fixed records allow O(1) seeking.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from tqdm import tqdm

from app.core.corpus_prep import SentenceDoc
from app.core.tokenizer import CLS_ID, MASK_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS, TokenSequence, Vocabulary, encode
from app.errors import ConfigError, DataError, ShardFormatError


MAX_SEQ_LEN = 96
MAX_PREDICTIONS = 14
MASKED_WORD_RATE = 0.15
IS_NEXT, RANDOM_NEXT = 0, 1
SHARD_MAGIC = b"CTPT"
SHARD_VERSION = 1
HEADER = struct.Struct("<4sIQ")

RECORD_DTYPE = np.dtype(
    [
        ("input_ids", "<u4", (MAX_SEQ_LEN,)),
        ("input_mask", "u1", (MAX_SEQ_LEN,)),
        ("segment_ids", "u1", (MAX_SEQ_LEN,)),
        ("num_predictions", "u1"),
        ("masked_positions", "<u2", (MAX_PREDICTIONS,)),
        ("masked_label_ids", "<u4", (MAX_PREDICTIONS,)),
        ("masked_weights", "<f4", (MAX_PREDICTIONS,)),
        ("nsp_label", "u1"),
    ]
)
UNMASKABLE_IDS = frozenset({CLS_ID, SEP_ID, PAD_ID})


@dataclass(frozen=True)
class PretrainExample:
    input_ids: tuple[int, ...]
    input_mask: tuple[bool, ...]
    segment_ids: tuple[int, ...]
    masked_positions: tuple[int, ...]
    masked_label_ids: tuple[int, ...]
    masked_weights: tuple[float, ...]
    nsp_label: int

    @property
    def num_predictions(self) -> int:
        return int(sum(1 for w in self.masked_weights if w > 0))

    def to_record(self) -> np.ndarray:
        record = np.zeros((), dtype=RECORD_DTYPE)
        record["input_ids"] = self.input_ids
        record["input_mask"] = self.input_mask
        record["segment_ids"] = self.segment_ids
        record["num_predictions"] = self.num_predictions
        record["masked_positions"] = self.masked_positions
        record["masked_label_ids"] = self.masked_label_ids
        record["masked_weights"] = self.masked_weights
        record["nsp_label"] = self.nsp_label
        return record

    @classmethod
    def from_record(cls, record: np.ndarray) -> "PretrainExample":
        return cls(
            input_ids=tuple(int(x) for x in record["input_ids"]),
            input_mask=tuple(bool(x) for x in record["input_mask"]),
            segment_ids=tuple(int(x) for x in record["segment_ids"]),
            masked_positions=tuple(int(x) for x in record["masked_positions"]),
            masked_label_ids=tuple(int(x) for x in record["masked_label_ids"]),
            masked_weights=tuple(float(x) for x in record["masked_weights"]),
            nsp_label=int(record["nsp_label"]),
        )


@dataclass
class ShardSet:
    paths: list[Path]
    example_count: int
    seed: int
    validation_paths: list[Path] = field(default_factory=list)
    validation_count: int = 0
    manifest_path: Path | None = None


def _as_rng(seed_or_rng: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


# ── Sentence pairing (NSP) ───────────────────────────────────────────────────


def _concat(segments: Sequence[TokenSequence]) -> TokenSequence:
    out = TokenSequence((), ())
    for seg in segments:
        out = out + seg
    return out


def _truncate_pair(
    a: TokenSequence, b: TokenSequence, budget: int, rng: np.random.Generator
) -> tuple[TokenSequence, TokenSequence]:
    a_ids, a_ws = list(a.ids), list(a.word_start)
    b_ids, b_ws = list(b.ids), list(b.word_start)
    while len(a_ids) + len(b_ids) > budget:
        ids, ws = (a_ids, a_ws) if len(a_ids) > len(b_ids) else (b_ids, b_ws)
        # trim from either end so neither side is systematically biased
        if rng.random() < 0.5:
            del ids[0], ws[0]
        else:
            ids.pop()
            ws.pop()
    return TokenSequence(tuple(a_ids), tuple(a_ws)), TokenSequence(tuple(b_ids), tuple(b_ws))


def _take_sentences(sentences: Sequence[TokenSequence], start: int, target: int) -> TokenSequence:
    picked: list[TokenSequence] = []
    picked_len = 0
    for sent in sentences[start:]:
        picked.append(sent)
        picked_len += len(sent)
        if picked_len >= target:
            break
    return _concat(picked)


def pair_sentences(
    docs: Sequence[SentenceDoc],
    vocab: Vocabulary,
    seed: int | np.random.Generator,
    max_seq_len: int = MAX_SEQ_LEN,
    is_next_prob: float = 0.5,
) -> Iterator[tuple[TokenSequence, TokenSequence, int]]:
    """Yield (segment A, segment B, nsp_label) pairs.

    Sentences of a document are packed into chunks of up to max_seq_len - 3
    tokens. The label of every chunk is drawn first, IS_NEXT with probability
    is_next_prob. An IS_NEXT chunk of two or more sentences is split at a
    random point. A single-sentence IS_NEXT chunk is continued by the
    sentences that follow it in stream order: the rest of its document, else
    the next document. A chunk with nothing after it in the stream is
    skipped and counted. RANDOM_NEXT chunks take sentences from a uniformly
    chosen different document.
    """
    if len(docs) < 2:
        raise DataError("sentence pairing needs at least 2 documents")
    rng = _as_rng(seed)
    budget = max_seq_len - 3
    encoded = [[encode(s, vocab) for s in doc.sentences] for doc in docs]
    counts = {IS_NEXT: 0, RANDOM_NEXT: 0}
    skipped = 0

    for doc_index, sentences in enumerate(encoded):
        chunk: list[TokenSequence] = []
        length = 0
        for i, sentence in enumerate(sentences):
            chunk.append(sentence)
            length += len(sentence)
            if i != len(sentences) - 1 and length < budget:
                continue
            label = IS_NEXT if rng.random() < is_next_prob else RANDOM_NEXT
            if len(chunk) >= 2:
                a_end = int(rng.integers(1, len(chunk)))
                seg_a = _concat(chunk[:a_end])
            else:
                seg_a = chunk[0]
            target_b = max(1, budget - len(seg_a))

            if label == IS_NEXT and len(chunk) >= 2:
                seg_b = _concat(chunk[a_end:])
            elif label == IS_NEXT:
                if i + 1 < len(sentences):
                    seg_b = _take_sentences(sentences, i + 1, target_b)
                elif doc_index + 1 < len(encoded):
                    seg_b = _take_sentences(encoded[doc_index + 1], 0, target_b)
                else:
                    seg_b = TokenSequence((), ())
            else:
                other = int(rng.integers(0, len(encoded) - 1))
                if other >= doc_index:
                    other += 1
                other_sents = encoded[other]
                start = int(rng.integers(0, len(other_sents)))
                seg_b = _take_sentences(other_sents, start, target_b)

            if len(seg_a) and len(seg_b):
                seg_a, seg_b = _truncate_pair(seg_a, seg_b, budget, rng)
                counts[label] += 1
                yield seg_a, seg_b, label
            else:
                skipped += 1
            chunk, length = [], 0

    logging.info(
        f"NSP_PAIRS: is_next={counts[IS_NEXT]} random_next={counts[RANDOM_NEXT]} skipped={skipped}"
    )


# ── Whole-word masking (MLM) ─────────────────────────────────────────────────


def _word_groups(seq: TokenSequence) -> list[list[int]]:
    groups: list[list[int]] = []
    previous_special = True
    for position, (token_id, starts) in enumerate(zip(seq.ids, seq.word_start)):
        if token_id in UNMASKABLE_IDS:
            previous_special = True
            continue
        if starts or previous_special or not groups:
            groups.append([position])
        else:
            groups[-1].append(position)
        previous_special = False
    return groups


def mask_sequence(
    seq: TokenSequence,
    seed: int | np.random.Generator,
    vocab_size: int,
    max_predictions: int = MAX_PREDICTIONS,
    masked_word_rate: float = MASKED_WORD_RATE,
) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
    """Whole-word masking; returns (masked ids, sorted positions, original ids).

    The number of words to mask is masked_word_rate * n_words with stochastic
    rounding (at least one), capped so the total subword predictions stay
    within max_predictions. Per selected word: 80% [MASK], 10% random
    non-special ids, 10% unchanged.
    """
    rng = _as_rng(seed)
    ids = list(seq.ids)
    groups = _word_groups(seq)
    if not groups:
        real = [p for p, token_id in enumerate(ids) if token_id != PAD_ID]
        if not real:
            raise DataError("sequence has no real token")
        # nothing maskable: one forced prediction on the first real token
        groups = [[real[0]]]

    expected = masked_word_rate * len(groups)
    num_words = int(np.floor(expected))
    if rng.random() < expected - num_words:
        num_words += 1
    num_words = max(1, num_words)

    selected: list[list[int]] = []
    budget = max_predictions
    for group_index in rng.permutation(len(groups)):
        if len(selected) >= num_words:
            break
        group = groups[int(group_index)]
        if len(group) > budget:
            continue
        selected.append(group)
        budget -= len(group)
    if not selected:
        # every word is longer than the prediction budget
        selected = [[groups[0][0]]]

    positions: list[int] = []
    for group in selected:
        roll = rng.random()
        for position in group:
            if roll < 0.8:
                ids[position] = MASK_ID
            elif roll < 0.9:
                pass
            else:
                ids[position] = int(rng.integers(len(SPECIAL_TOKENS), vocab_size))
            positions.append(position)
    positions.sort()
    labels = tuple(seq.ids[p] for p in positions)
    return tuple(ids), tuple(positions), labels


def assemble_example(
    seg_a: TokenSequence,
    seg_b: TokenSequence,
    nsp_label: int,
    vocab_size: int,
    rng: np.random.Generator,
    max_seq_len: int = MAX_SEQ_LEN,
    max_predictions: int = MAX_PREDICTIONS,
) -> PretrainExample:
    special = TokenSequence((CLS_ID,), (True,))
    sep = TokenSequence((SEP_ID,), (True,))
    seq = special + seg_a + sep + seg_b + sep
    if len(seq) > max_seq_len:
        raise DataError(f"assembled sequence of {len(seq)} tokens exceeds {max_seq_len}")
    segment = [0] * (len(seg_a) + 2) + [1] * (len(seg_b) + 1)

    masked_ids, positions, labels = mask_sequence(
        seq, rng, vocab_size, max_predictions=max_predictions
    )
    pad = max_seq_len - len(seq)
    slots = max_predictions - len(positions)
    return PretrainExample(
        input_ids=masked_ids + (PAD_ID,) * pad,
        input_mask=(True,) * len(seq) + (False,) * pad,
        segment_ids=tuple(segment) + (0,) * pad,
        masked_positions=positions + (0,) * slots,
        masked_label_ids=labels + (0,) * slots,
        masked_weights=(1.0,) * len(positions) + (0.0,) * slots,
        nsp_label=nsp_label,
    )


def create_examples(
    docs: Sequence[SentenceDoc],
    vocab: Vocabulary,
    seed: int,
) -> list[PretrainExample]:
    rng = np.random.default_rng(seed)
    return [
        assemble_example(a, b, label, vocab.size, rng)
        for a, b, label in pair_sentences(docs, vocab, rng)
    ]


# ── Shard files ──────────────────────────────────────────────────────────────


def write_shard(path: str | Path, examples: Sequence[PretrainExample]) -> int:
    records = np.zeros(len(examples), dtype=RECORD_DTYPE)
    for i, example in enumerate(examples):
        records[i] = example.to_record()
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(SHARD_MAGIC, SHARD_VERSION, len(records)))
        fh.write(records.tobytes())
    return len(records)


def _read_header(fh, path: str) -> int:
    raw = fh.read(HEADER.size)
    if len(raw) < HEADER.size:
        raise ShardFormatError("file shorter than the shard header", path, offset=len(raw))
    magic, version, count = HEADER.unpack(raw)
    if magic != SHARD_MAGIC:
        raise ShardFormatError(f"bad magic {magic!r}", path, offset=0)
    if version != SHARD_VERSION:
        raise ShardFormatError(f"unsupported shard version {version}", path, offset=4)
    return count


def read_shard_records(path: str | Path) -> np.ndarray:
    """All records of a shard as a structured array (bulk path for training)."""
    path = str(path)
    with open(path, "rb") as fh:
        count = _read_header(fh, path)
        payload = fh.read()
    complete = len(payload) // RECORD_DTYPE.itemsize
    if complete < count:
        raise ShardFormatError(
            f"truncated shard: header says {count} records, found {complete}",
            path,
            offset=HEADER.size + complete * RECORD_DTYPE.itemsize,
            record_index=complete,
        )
    if count == 0:
        return np.zeros(0, dtype=RECORD_DTYPE)
    return np.frombuffer(payload, dtype=RECORD_DTYPE, count=count)


def read_shard(path: str | Path) -> Iterator[PretrainExample]:
    path = str(path)
    with open(path, "rb") as fh:
        count = _read_header(fh, path)
        for index in range(count):
            raw = fh.read(RECORD_DTYPE.itemsize)
            if len(raw) < RECORD_DTYPE.itemsize:
                raise ShardFormatError(
                    "truncated record",
                    path,
                    offset=HEADER.size + index * RECORD_DTYPE.itemsize,
                    record_index=index,
                )
            yield PretrainExample.from_record(np.frombuffer(raw, dtype=RECORD_DTYPE)[0])


def is_validation_doc(doc_id: str, fraction: float) -> bool:
    digest = hashlib.sha1(doc_id.encode("utf-8")).hexdigest()
    return int(digest[:8], 16) % 10000 < round(fraction * 10000)


def _ensure_writable(out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out_dir, prefix=".writable-"):
            pass
    except OSError as exc:
        raise DataError(f"output directory {out_dir} is not writable: {exc}") from exc


def write_json_atomic(path: Path, payload: dict) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


def _generate_split(
    docs: Sequence[SentenceDoc],
    vocab: Vocabulary,
    dupe_factor: int,
    seed: int,
    out_dir: Path,
    prefix: str,
    num_shards: int,
    jobs: int,
    progress: bool,
) -> tuple[list[Path], list[int]]:
    passes = range(dupe_factor)
    seeds = [seed + p for p in passes]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_pass = list(pool.map(create_examples, [docs] * dupe_factor, [vocab] * dupe_factor, seeds))
    else:
        per_pass = [
            create_examples(docs, vocab, s)
            for s in tqdm(seeds, desc=f"{prefix} passes", disable=not progress)
        ]

    buckets: list[list[PretrainExample]] = [[] for _ in range(num_shards)]
    k = 0
    for examples in per_pass:
        for example in examples:
            buckets[k % num_shards].append(example)
            k += 1
    paths: list[Path] = []
    for shard_index, bucket in enumerate(buckets):
        path = out_dir / f"{prefix}-{shard_index:05d}.bin"
        write_shard(path, bucket)
        paths.append(path)
    return paths, [len(p) for p in per_pass]


def generate_shards(
    docs: Iterable[SentenceDoc],
    vocab: Vocabulary,
    dupe_factor: int,
    seed: int,
    out_dir: str | Path,
    num_shards: int = 4,
    validation_fraction: float = 0.01,
    jobs: int = 1,
    progress: bool = False,
) -> ShardSet:
    """Run dupe_factor passes (seed + pass) and write round-robin shards plus a manifest."""
    if dupe_factor < 1:
        raise ConfigError("dupe_factor must be >= 1")
    if num_shards < 1:
        raise ConfigError("num_shards must be >= 1")
    out_dir = Path(out_dir)
    _ensure_writable(out_dir)

    all_docs = list(docs)
    train_docs = [d for d in all_docs if not is_validation_doc(d.id, validation_fraction)]
    valid_docs = [d for d in all_docs if is_validation_doc(d.id, validation_fraction)]

    train_paths, pass_counts = _generate_split(
        train_docs, vocab, dupe_factor, seed, out_dir, "train", num_shards, jobs, progress
    )
    valid_paths: list[Path] = []
    valid_counts: list[int] = []
    if len(valid_docs) >= 2:
        valid_paths, valid_counts = _generate_split(
            valid_docs, vocab, dupe_factor, seed, out_dir, "valid", 1, jobs, progress
        )
    else:
        logging.warning(
            f"EXAMPLES_NO_VALIDATION: held-out docs={len(valid_docs)} (need >= 2); "
            f"validation shards skipped"
        )

    shard_set = ShardSet(
        paths=train_paths,
        example_count=sum(pass_counts),
        seed=seed,
        validation_paths=valid_paths,
        validation_count=sum(valid_counts),
        manifest_path=out_dir / "manifest.json",
    )
    write_json_atomic(
        shard_set.manifest_path,
        {
            "shards": [p.name for p in train_paths],
            "validation_shards": [p.name for p in valid_paths],
            "example_count": shard_set.example_count,
            "validation_count": shard_set.validation_count,
            "pass_counts": pass_counts,
            "pass_seeds": [seed + p for p in range(dupe_factor)],
            "seed": seed,
            "dupe_factor": dupe_factor,
            "vocab_hash": vocab.content_hash(),
            "vocab_size": vocab.size,
            "max_seq_len": MAX_SEQ_LEN,
            "max_predictions": MAX_PREDICTIONS,
            "documents": {"train": len(train_docs), "validation": len(valid_docs)},
        },
    )
    logging.info(
        f"EXAMPLES_DONE: train={shard_set.example_count} validation={shard_set.validation_count} "
        f"shards={len(train_paths)} dupe_factor={dupe_factor} seed={seed}"
    )
    return shard_set


def load_shard_set(shard_dir: str | Path) -> tuple[ShardSet, dict]:
    shard_dir = Path(shard_dir)
    manifest_path = shard_dir / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError(f"shard manifest not found: {manifest_path}") from exc
    shard_set = ShardSet(
        paths=[shard_dir / name for name in manifest["shards"]],
        example_count=int(manifest["example_count"]),
        seed=int(manifest["seed"]),
        validation_paths=[shard_dir / name for name in manifest.get("validation_shards", [])],
        validation_count=int(manifest.get("validation_count", 0)),
        manifest_path=manifest_path,
    )
    return shard_set, manifest
