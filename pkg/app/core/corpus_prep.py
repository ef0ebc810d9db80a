from __future__ import annotations

import hashlib
import json
import logging
import re
import unicodedata
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import mmh3
import numpy as np

from app.errors import ConfigError, DataError, RecordRejected


USER_TOKEN = "twitteruser"
URL_TOKEN = "twitterurl"
MAX_TEXT_LENGTH = 4000
SHINGLE_SIZE = 3
DEFAULT_EMOJI_TABLE = Path(__file__).resolve().parent.parent / "data" / "emoji_shortcodes.tsv"

EMOJI_RANGES: tuple[tuple[int, int], ...] = (
    (0x1F000, 0x1FAFF),
    (0x2600, 0x27BF),
    (0x231A, 0x231B),
    (0x2328, 0x2328),
    (0x23CF, 0x23CF),
    (0x23E9, 0x23F3),
    (0x23F8, 0x23FA),
    (0x2194, 0x2199),
    (0x21A9, 0x21AA),
    (0x25AA, 0x25AB),
    (0x25B6, 0x25B6),
    (0x25C0, 0x25C0),
    (0x25FB, 0x25FE),
    (0x2934, 0x2935),
    (0x2B05, 0x2B07),
    (0x2B1B, 0x2B1C),
    (0x2B50, 0x2B50),
    (0x2B55, 0x2B55),
    (0x203C, 0x203C),
    (0x2049, 0x2049),
    (0x3030, 0x3030),
    (0x303D, 0x303D),
    (0x3297, 0x3297),
    (0x3299, 0x3299),
    (0x200D, 0x200D),
    (0x20E3, 0x20E3),
    (0xFE00, 0xFE0F),
    (0xE0020, 0xE007F),
)

_EMOJI_RE = re.compile(
    "["
    + "".join(f"{re.escape(chr(lo))}-{re.escape(chr(hi))}" for lo, hi in EMOJI_RANGES)
    + "]"
)
_RETWEET_RE = re.compile(r"^rt\s*:?\s*(?=@\w)", re.IGNORECASE)
# the colon closing "RT @name:" belongs to the tag, the handle stays a mention
_RETWEET_SOURCE_RE = re.compile(r"^(@\w+)\s*:\s*")
_URL_RE = re.compile(r"https?://\S*|\bwww\.\S+", re.IGNORECASE)
_USER_RE = re.compile(r"@\w+")
_SENTENCE_BREAK_RE = re.compile(r"(?<=[.!?])\s+")


# ── Records ──────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class RawTweet:
    id: str
    text: str
    created_at: str = ""


@dataclass(frozen=True)
class CleanTweet:
    id: str
    text: str
    was_retweet: bool = False


@dataclass(frozen=True)
class SentenceDoc:
    id: str
    sentences: tuple[str, ...]

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "sentences": list(self.sentences)}, ensure_ascii=False)

    @classmethod
    def from_dict(cls, data: Mapping) -> "SentenceDoc":
        return cls(id=str(data["id"]), sentences=tuple(data["sentences"]))


# ── Emoji table ──────────────────────────────────────────────────────────────


def is_emoji_codepoint(ch: str) -> bool:
    return _EMOJI_RE.fullmatch(ch) is not None


def _as_shortcode(name: str) -> str:
    name = name.strip().strip(":")
    return f":{name}:"


def load_emoji_table(path: str | Path | None = None) -> dict[str, str]:
    """Read a `codepoint-hex<TAB>shortcode` table; '#' lines are comments."""
    table_path = Path(path) if path else DEFAULT_EMOJI_TABLE
    table: dict[str, str] = {}
    try:
        lines = table_path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError as exc:
        raise DataError(f"emoji table not found: {table_path}") from exc
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{table_path}:{line_no}: expected 'codepoint<TAB>shortcode'")
        try:
            char = chr(int(parts[0], 16))
        except ValueError as exc:
            raise DataError(f"{table_path}:{line_no}: bad codepoint {parts[0]!r}") from exc
        table[char] = _as_shortcode(parts[1])
    return table


def export_emoji_table(path: str | Path) -> int:
    """Write a full single-codepoint table from the `emoji` package data."""
    import emoji

    rows: list[tuple[int, str]] = []
    for char, data in emoji.EMOJI_DATA.items():
        if len(char) != 1 or not is_emoji_codepoint(char):
            continue
        aliases = data.get("alias") or []
        name = aliases[0] if aliases else data.get("en", "")
        name = name.strip(":").lower()
        # shortcodes must stay plain ASCII without whitespace
        if not name or not name.isascii() or any(ch.isspace() for ch in name):
            continue
        rows.append((ord(char), name))
    rows.sort()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("# codepoint\tshortcode (exported from the emoji package)\n")
        for codepoint, name in rows:
            fh.write(f"{codepoint:x}\t{name}\n")
    logging.info(f"EMOJI_TABLE_EXPORT: path={out} entries={len(rows)}")
    return len(rows)


# ── Normalization ────────────────────────────────────────────────────────────


def _is_word_char(ch: str) -> bool:
    return ch.isalnum() or ch == "_"


def _placeholder(token: str):
    def replace(match: re.Match) -> str:
        text = match.string
        left = " " if match.start() > 0 and _is_word_char(text[match.start() - 1]) else ""
        right = " " if match.end() < len(text) and _is_word_char(text[match.end()]) else ""
        return f"{left}{token}{right}"

    return replace


def _replace_all(pattern: re.Pattern, token: str, text: str) -> str:
    # replacements can expose a new match ("@@bob" -> "@twitteruser")
    while pattern.search(text):
        text = pattern.sub(_placeholder(token), text)
    return text


def _validate_raw(record: RawTweet | CleanTweet) -> None:
    if not isinstance(record.id, str) or not record.id:
        raise RecordRejected("missing_id", None)
    if not isinstance(record.text, str):
        raise RecordRejected("missing_text", record.id)
    if len(record.text) > MAX_TEXT_LENGTH:
        raise RecordRejected("text_too_long", record.id, f"length={len(record.text)}")
    try:
        record.text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise RecordRejected("malformed_unicode", record.id, f"position={exc.start}") from exc


def clean_tweet(record: RawTweet | CleanTweet, emoji_table: Mapping[str, str]) -> CleanTweet:
    """Normalize and pseudonymize one tweet.

    Strips retweet prefixes, replaces usernames and URLs with the canonical
    tokens, turns emoji into space-padded shortcodes (unknown emoji are
    dropped), removes control characters, lowercases and collapses
    whitespace. Accepts its own output and returns it unchanged.
    """
    _validate_raw(record)
    text = unicodedata.normalize("NFC", record.text)
    text = "".join(" " if unicodedata.category(ch) == "Cc" else ch for ch in text)
    text = text.strip()

    was_retweet = bool(getattr(record, "was_retweet", False))
    while _RETWEET_RE.match(text):
        text = _RETWEET_RE.sub("", text, count=1).strip()
        text = _RETWEET_SOURCE_RE.sub(r"\1 ", text, count=1).strip()
        was_retweet = True

    text = _replace_all(_URL_RE, URL_TOKEN, text)
    text = _replace_all(_USER_RE, USER_TOKEN, text)
    text = _EMOJI_RE.sub(lambda m: f" {emoji_table.get(m.group(0), '')} ", text)
    text = " ".join(text.lower().split())
    return CleanTweet(id=record.id, text=text, was_retweet=was_retweet)


# ── Deduplication ────────────────────────────────────────────────────────────


def word_shingles(text: str, size: int = SHINGLE_SIZE) -> frozenset[str]:
    words = text.split()
    if len(words) < size:
        return frozenset([" ".join(words)]) if words else frozenset()
    return frozenset(" ".join(words[i : i + size]) for i in range(len(words) - size + 1))


def jaccard(a: frozenset[str], b: frozenset[str]) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


_MERSENNE_PRIME = np.uint64((1 << 61) - 1)
_HASH_RANGE = np.uint64(1 << 32)


def _rows_per_band(threshold: float, num_perm: int, miss_tolerance: float) -> int | None:
    """Largest band width whose miss probability at `threshold` is negligible."""
    best = None
    for rows in range(1, num_perm + 1):
        if num_perm % rows:
            continue
        bands = num_perm // rows
        if (1.0 - threshold**rows) ** bands <= miss_tolerance:
            best = rows
    return best


class MinHashIndex:
    """Banded MinHash LSH over word shingles with exact Jaccard verification."""

    def __init__(
        self,
        threshold: float,
        num_perm: int = 128,
        seed: int = 1,
        miss_tolerance: float = 1e-9,
    ) -> None:
        self.threshold = threshold
        self.num_perm = num_perm
        rng = np.random.default_rng(seed)
        self._a = rng.integers(1, 1 << 31, size=num_perm, dtype=np.uint64)
        self._b = rng.integers(0, 1 << 31, size=num_perm, dtype=np.uint64)
        rows = _rows_per_band(threshold, num_perm, miss_tolerance) if threshold > 0 else None
        # no banding keeps the miss rate low enough: compare against every survivor
        self.exhaustive = rows is None
        self.rows = rows or num_perm
        self.bands = num_perm // self.rows
        self._buckets: list[dict[bytes, list[int]]] = [defaultdict(list) for _ in range(self.bands)]
        self._shingles: list[frozenset[str]] = []

    def signature(self, shingles: frozenset[str]) -> np.ndarray:
        if not shingles:
            return np.full(self.num_perm, _HASH_RANGE, dtype=np.uint64)
        base = np.array(
            sorted(mmh3.hash(s, 0, signed=False) for s in shingles), dtype=np.uint64
        )
        permuted = (np.outer(self._a, base) + self._b[:, None]) % _MERSENNE_PRIME
        return permuted.min(axis=1)

    def _band_keys(self, signature: np.ndarray) -> list[bytes]:
        return [
            signature[i * self.rows : (i + 1) * self.rows].tobytes() for i in range(self.bands)
        ]

    def find_match(self, shingles: frozenset[str]) -> int | None:
        """Index of the earliest stored entry with Jaccard >= threshold."""
        if self.exhaustive:
            candidates: Iterable[int] = range(len(self._shingles))
            signature = None
        else:
            signature = self.signature(shingles)
            found: set[int] = set()
            for band, key in enumerate(self._band_keys(signature)):
                found.update(self._buckets[band].get(key, ()))
            candidates = sorted(found)
        for idx in candidates:
            if jaccard(shingles, self._shingles[idx]) >= self.threshold:
                return idx
        return None

    def add(self, shingles: frozenset[str]) -> int:
        idx = len(self._shingles)
        self._shingles.append(shingles)
        if not self.exhaustive:
            for band, key in enumerate(self._band_keys(self.signature(shingles))):
                self._buckets[band][key].append(idx)
        return idx

    def __len__(self) -> int:
        return len(self._shingles)


@dataclass
class DedupStats:
    retweets: int = 0
    exact_duplicates: int = 0
    near_duplicates: int = 0
    kept: int = 0


def dedup_corpus(
    tweets: Iterable[CleanTweet],
    near_dup_threshold: float = 0.8,
    stats: DedupStats | None = None,
) -> Iterator[CleanTweet]:
    """Drop retweets, exact and near duplicates; the first occurrence survives."""
    if not 0.0 <= near_dup_threshold <= 1.0:
        raise ConfigError(f"near_dup_threshold must be in [0, 1], got {near_dup_threshold}")
    stats = stats if stats is not None else DedupStats()
    index = MinHashIndex(near_dup_threshold)
    seen_text: set[str] = set()

    for tweet in tweets:
        if tweet.was_retweet:
            stats.retweets += 1
            continue
        digest = hashlib.sha1(tweet.text.encode("utf-8")).hexdigest()
        if digest in seen_text:
            stats.exact_duplicates += 1
            continue
        shingles = word_shingles(tweet.text)
        if index.find_match(shingles) is not None:
            stats.near_duplicates += 1
            continue
        seen_text.add(digest)
        index.add(shingles)
        stats.kept += 1
        yield tweet


# ── Sentence segmentation ────────────────────────────────────────────────────


def segment_sentences(tweet: CleanTweet) -> SentenceDoc:
    text = tweet.text.strip()
    if not text:
        raise RecordRejected("empty_text", tweet.id)
    sentences = tuple(s for s in (part.strip() for part in _SENTENCE_BREAK_RE.split(text)) if s)
    return SentenceDoc(id=tweet.id, sentences=sentences)


# ── File pipeline ────────────────────────────────────────────────────────────


@dataclass
class PrepStats:
    read: int = 0
    rejected: Counter = field(default_factory=Counter)
    dedup: DedupStats = field(default_factory=DedupStats)
    written: int = 0

    def as_dict(self) -> dict:
        return {
            "read": self.read,
            "rejected": dict(self.rejected),
            "dedup": asdict(self.dedup),
            "written": self.written,
        }


def iter_raw_tweets(path: str | Path) -> Iterator[RawTweet | RecordRejected]:
    with open(path, "r", encoding="utf-8", errors="surrogateescape") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError:
                yield RecordRejected("invalid_json", None, f"line={line_no}")
                continue
            if not isinstance(data, dict) or "text" not in data or "id" not in data:
                yield RecordRejected("missing_field", None, f"line={line_no}")
                continue
            yield RawTweet(
                id=str(data["id"]),
                text=data["text"] if isinstance(data["text"], str) else None,
                created_at=str(data.get("created_at") or ""),
            )


def iter_sentence_docs(path: str | Path) -> Iterator[SentenceDoc]:
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield SentenceDoc.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{line_no}: not a sentence document ({exc})") from exc


def _clean_or_reject(
    record: RawTweet | RecordRejected, emoji_table: Mapping[str, str]
) -> CleanTweet | RecordRejected:
    if isinstance(record, RecordRejected):
        return record
    try:
        return clean_tweet(record, emoji_table)
    except RecordRejected as rejected:
        return rejected


def prep_corpus(
    in_path: str | Path,
    out_path: str | Path,
    reject_path: str | Path,
    emoji_table: Mapping[str, str],
    near_dup_threshold: float = 0.8,
    jobs: int = 1,
) -> PrepStats:
    """Raw tweet JSONL -> cleaned, deduplicated sentence documents."""
    stats = PrepStats()
    out_path, reject_path = Path(out_path), Path(reject_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    reject_path.parent.mkdir(parents=True, exist_ok=True)

    with open(out_path, "w", encoding="utf-8") as out, open(
        reject_path, "w", encoding="utf-8"
    ) as rejects:

        def reject(item: RecordRejected) -> None:
            stats.rejected[item.reason] += 1
            rejects.write(
                json.dumps(
                    {"id": item.record_id, "reason": item.reason, "detail": item.detail},
                    ensure_ascii=False,
                )
                + "\n"
            )

        def cleaned() -> Iterator[CleanTweet]:
            raws = iter_raw_tweets(in_path)
            worker = partial(_clean_or_reject, emoji_table=dict(emoji_table))
            if jobs > 1:
                executor = ProcessPoolExecutor(max_workers=jobs)
                results = executor.map(worker, raws, chunksize=256)
            else:
                executor = None
                results = map(worker, raws)
            try:
                for item in results:
                    stats.read += 1
                    if isinstance(item, RecordRejected):
                        reject(item)
                        continue
                    yield item
            finally:
                if executor is not None:
                    executor.shutdown()

        for tweet in dedup_corpus(cleaned(), near_dup_threshold, stats.dedup):
            try:
                doc = segment_sentences(tweet)
            except RecordRejected as rejected:
                reject(rejected)
                continue
            out.write(doc.to_json() + "\n")
            stats.written += 1

    logging.info(
        f"PREP_DONE: read={stats.read} written={stats.written} "
        f"rejected={sum(stats.rejected.values())} retweets={stats.dedup.retweets} "
        f"exact_dups={stats.dedup.exact_duplicates} near_dups={stats.dedup.near_duplicates}"
    )
    return stats
