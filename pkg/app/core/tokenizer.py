from __future__ import annotations

import hashlib
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from tqdm import tqdm

from app.core.corpus_prep import URL_TOKEN, USER_TOKEN, SentenceDoc
from app.errors import ConfigError, DataError


PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS: tuple[str, ...] = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(len(SPECIAL_TOKENS))
DEFAULT_INJECTED: tuple[str, ...] = (USER_TOKEN, URL_TOKEN)
CONTINUATION_PREFIX = "##"
MAX_VOCAB_SIZE = 30000
MAX_WORD_CHARS = 100


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    injected_whole_tokens: frozenset[str] = frozenset()
    undersized: bool = False
    _index: dict[str, int] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise DataError(f"vocabulary must start with {', '.join(SPECIAL_TOKENS)}")
        if len(self.tokens) > MAX_VOCAB_SIZE:
            raise DataError(f"vocabulary has {len(self.tokens)} tokens, limit is {MAX_VOCAB_SIZE}")
        index: dict[str, int] = {}
        for i, token in enumerate(self.tokens):
            if token in index:
                raise DataError(f"duplicate vocabulary token {token!r} at id {i}")
            index[token] = i
        missing = [t for t in self.injected_whole_tokens if t not in index]
        if missing:
            raise DataError(f"injected tokens missing from vocabulary: {missing}")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    @classmethod
    def from_tokens(
        cls,
        tokens: Iterable[str],
        injected: Iterable[str] = DEFAULT_INJECTED,
    ) -> "Vocabulary":
        """Build from content tokens; specials and injected tokens are prepended."""
        injected = tuple(dict.fromkeys(injected))
        body = [t for t in dict.fromkeys(tokens) if t not in SPECIAL_TOKENS and t not in injected]
        return cls(
            tokens=SPECIAL_TOKENS + injected + tuple(body),
            injected_whole_tokens=frozenset(injected),
        )


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    word_start: tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.word_start):
            raise ValueError("ids and word_start must have equal lengths")

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "TokenSequence") -> "TokenSequence":
        return TokenSequence(self.ids + other.ids, self.word_start + other.word_start)


# ── Vocabulary files ─────────────────────────────────────────────────────────


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for token in vocab.tokens:
            fh.write(token + "\n")


def load_vocab(path: str | Path, injected: Iterable[str] = DEFAULT_INJECTED) -> Vocabulary:
    """One token per line, line number = id."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            tokens = tuple(line.rstrip("\n") for line in fh)
    except FileNotFoundError as exc:
        raise DataError(f"vocabulary file not found: {path}") from exc
    present = frozenset(t for t in injected if t in tokens)
    return Vocabulary(tokens=tokens, injected_whole_tokens=present)


# ── WordPiece induction ──────────────────────────────────────────────────────


def _merge_pair(a: str, b: str) -> str:
    return a + (b[len(CONTINUATION_PREFIX) :] if b.startswith(CONTINUATION_PREFIX) else b)


def _initial_split(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION_PREFIX + ch for ch in word[1:]]


def count_words(docs: Iterable[SentenceDoc]) -> Counter:
    counts: Counter = Counter()
    for doc in docs:
        for sentence in doc.sentences:
            counts.update(sentence.split())
    return counts


def build_vocab(
    docs: Iterable[SentenceDoc],
    target_size: int,
    injected: Iterable[str] = DEFAULT_INJECTED,
    progress: bool = False,
) -> Vocabulary:
    """Greedy WordPiece induction.

    Starts from the character alphabet (first characters plain, the rest
    `##`-prefixed) and repeatedly adds the merge with the best score
    pair_freq / (freq_left * freq_right), ties broken by the lexicographically
    smallest merged string. Word frequencies are order independent, so any
    permutation of the corpus gives the same vocabulary.
    """
    injected = tuple(dict.fromkeys(injected))
    if target_size > MAX_VOCAB_SIZE:
        raise ConfigError(f"target_size {target_size} exceeds {MAX_VOCAB_SIZE}")

    word_counts = count_words(docs)
    for token in injected:
        word_counts.pop(token, None)
    word_counts = Counter(
        {w: c for w, c in word_counts.items() if len(w) <= MAX_WORD_CHARS}
    )
    if not word_counts and not injected:
        raise DataError("cannot build a vocabulary from an empty corpus")

    words = sorted(word_counts)
    splits = {w: _initial_split(w) for w in words}
    alphabet = sorted({piece for pieces in splits.values() for piece in pieces})
    base_size = len(SPECIAL_TOKENS) + len(injected) + len(alphabet)
    if target_size < base_size:
        raise ConfigError(
            f"target_size {target_size} is below the base inventory of {base_size} "
            f"(specials + injected + alphabet)"
        )

    vocab_tokens: list[str] = list(alphabet)
    known = set(SPECIAL_TOKENS) | set(injected) | set(alphabet)

    pair_freqs: Counter = Counter()
    unit_freqs: Counter = Counter()
    where: dict[tuple[str, str], set[str]] = defaultdict(set)
    for w in words:
        pieces, count = splits[w], word_counts[w]
        for piece in pieces:
            unit_freqs[piece] += count
        for pair in zip(pieces, pieces[1:]):
            pair_freqs[pair] += count
            where[pair].add(w)

    bar = tqdm(total=target_size, initial=base_size, disable=not progress, desc="wordpiece")
    size = base_size
    while size < target_size:
        best_pair, best_key = None, None
        for pair, freq in pair_freqs.items():
            if freq <= 0:
                continue
            score = freq / (unit_freqs[pair[0]] * unit_freqs[pair[1]])
            key = (-score, _merge_pair(*pair))
            if best_key is None or key < best_key:
                best_pair, best_key = pair, key
        if best_pair is None:
            break

        merged = best_key[1]
        left, right = best_pair
        for w in sorted(where.pop(best_pair, ())):
            pieces, count = splits[w], word_counts[w]
            for piece in pieces:
                unit_freqs[piece] -= count
            for pair in zip(pieces, pieces[1:]):
                pair_freqs[pair] -= count
                if pair != best_pair:
                    where[pair].discard(w)
            rebuilt: list[str] = []
            i = 0
            while i < len(pieces):
                if i + 1 < len(pieces) and pieces[i] == left and pieces[i + 1] == right:
                    rebuilt.append(merged)
                    i += 2
                else:
                    rebuilt.append(pieces[i])
                    i += 1
            splits[w] = rebuilt
            for piece in rebuilt:
                unit_freqs[piece] += count
            for pair in zip(rebuilt, rebuilt[1:]):
                pair_freqs[pair] += count
                where[pair].add(w)
        pair_freqs.pop(best_pair, None)

        if merged not in known:
            known.add(merged)
            vocab_tokens.append(merged)
            size += 1
            bar.update(1)
    bar.close()

    undersized = size < target_size
    if undersized:
        logging.warning(
            f"VOCAB_UNDERSIZED: target={target_size} reached={size} "
            f"(corpus has no further merges)"
        )
    vocab = Vocabulary.from_tokens(vocab_tokens, injected=injected)
    if undersized:
        vocab = Vocabulary(
            tokens=vocab.tokens,
            injected_whole_tokens=vocab.injected_whole_tokens,
            undersized=True,
        )
    logging.info(f"VOCAB_BUILT: size={vocab.size} words={len(words)} alphabet={len(alphabet)}")
    return vocab


# ── Encoding ─────────────────────────────────────────────────────────────────


def _wordpiece(word: str, vocab: Vocabulary) -> list[int] | None:
    if len(word) > MAX_WORD_CHARS:
        return None
    ids: list[int] = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONTINUATION_PREFIX + piece
            # literal "[MASK]" etc. in text never map onto special ids
            if piece in vocab and piece not in SPECIAL_TOKENS:
                found = vocab.id_of(piece)
                break
            end -= 1
        if found is None:
            return None
        ids.append(found)
        start = end
    return ids


def encode(text: str, vocab: Vocabulary) -> TokenSequence:
    """Greedy longest-match-first WordPiece over whitespace-split words."""
    ids: list[int] = []
    word_start: list[bool] = []
    for word in text.split():
        if word in vocab.injected_whole_tokens:
            pieces = [vocab.id_of(word)]
        else:
            pieces = _wordpiece(word, vocab) or [UNK_ID]
        ids.extend(pieces)
        word_start.extend([True] + [False] * (len(pieces) - 1))
    return TokenSequence(ids=tuple(ids), word_start=tuple(word_start))


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    for position, token_id in enumerate(ids):
        if not 0 <= token_id < vocab.size:
            raise DataError(
                f"token id {token_id} at position {position} is outside vocabulary of size {vocab.size}"
            )
        if token_id < len(SPECIAL_TOKENS):
            continue
        token = vocab.tokens[token_id]
        if token.startswith(CONTINUATION_PREFIX) and words:
            words[-1] += token[len(CONTINUATION_PREFIX) :]
        else:
            words.append(token)
    return " ".join(words)
