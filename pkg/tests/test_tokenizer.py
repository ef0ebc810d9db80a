import numpy as np
import pytest

from app.core.corpus_prep import SentenceDoc
from app.core.tokenizer import (
    CLS_ID,
    MASK_ID,
    PAD_ID,
    SEP_ID,
    SPECIAL_TOKENS,
    UNK_ID,
    Vocabulary,
    build_vocab,
    decode,
    encode,
    load_vocab,
    save_vocab,
)
from app.errors import ConfigError, DataError


def _docs(*texts):
    return [SentenceDoc(id=str(i), sentences=(t,)) for i, t in enumerate(texts)]


@pytest.fixture
def toy_vocab():
    return Vocabulary.from_tokens(["un", "##aff", "##able", "hello", "world", "##s", "a", "##b"])


def test_special_ids_are_fixed():
    vocab = Vocabulary.from_tokens(["x"])
    assert [vocab.id_of(t) for t in SPECIAL_TOKENS] == [PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID]
    assert (PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID) == (0, 1, 2, 3, 4)


def test_vocabulary_rejects_duplicates():
    with pytest.raises(DataError, match="duplicate"):
        Vocabulary(tokens=SPECIAL_TOKENS + ("a", "a"))


# ── build_vocab ──────────────────────────────────────────────────────────────


def test_repeated_word_becomes_one_token():
    # merges: ##a+##b -> ##ab, ##a+##ab -> ##aab, a+##aab -> aaab
    vocab = build_vocab(_docs("aaab aaab aaab"), target_size=11, injected=())
    assert "aaab" in vocab
    assert vocab.tokens[5:] == ("##a", "##b", "a", "##ab", "##aab", "aaab")
    assert vocab.undersized is False
    assert encode("aaab", vocab).ids == (vocab.id_of("aaab"),)


def test_small_corpus_returns_flagged_smaller_vocabulary():
    vocab = build_vocab(_docs("aaab aaab aaab"), target_size=20, injected=())
    assert vocab.size == 11
    assert vocab.undersized is True


def test_minimal_corpus():
    vocab = build_vocab(_docs("a"), target_size=6, injected=())
    assert vocab.tokens == SPECIAL_TOKENS + ("a",)
    assert set(vocab.tokens) == set(SPECIAL_TOKENS) | {"a"}
    assert vocab.injected_whole_tokens == frozenset()
    assert vocab.undersized is False
    assert encode("a", vocab).ids == (len(SPECIAL_TOKENS),)


def test_injected_tokens_follow_specials():
    vocab = build_vocab(_docs("twitteruser said hi twitterurl"), target_size=30)
    assert vocab.tokens[5:7] == ("twitteruser", "twitterurl")
    assert vocab.injected_whole_tokens == frozenset({"twitteruser", "twitterurl"})


def test_vocabulary_is_order_independent():
    rng = np.random.default_rng(0)
    words = ["covid", "vaccine", "vaccines", "mask", "masks", "lockdown", "cases", "case"]
    docs = [SentenceDoc(id=str(i), sentences=(" ".join(rng.choice(words, size=6)),)) for i in range(60)]
    shuffled = [docs[i] for i in rng.permutation(len(docs))]
    assert build_vocab(docs, 60) == build_vocab(shuffled, 60)


def test_target_below_base_inventory():
    with pytest.raises(ConfigError):
        build_vocab(_docs("abc"), target_size=5, injected=())


def test_target_above_limit():
    with pytest.raises(ConfigError):
        build_vocab(_docs("abc"), target_size=30001)


def test_continuation_pieces_carry_prefix():
    vocab = build_vocab(_docs("stay home stay safe", "home safe"), target_size=18, injected=())
    for word in ("stay", "home", "safe"):
        pieces = [vocab.tokens[i] for i in encode(word, vocab).ids]
        assert not pieces[0].startswith("##")
        assert all(p.startswith("##") for p in pieces[1:])
        assert decode(encode(word, vocab).ids, vocab) == word


# ── encode / decode ──────────────────────────────────────────────────────────


def test_greedy_longest_match(toy_vocab):
    seq = encode("unaffable", toy_vocab)
    assert [toy_vocab.tokens[i] for i in seq.ids] == ["un", "##aff", "##able"]
    assert seq.word_start == (True, False, False)


def test_injected_token_is_single_id(toy_vocab):
    seq = encode("twitteruser", toy_vocab)
    assert seq.ids == (toy_vocab.id_of("twitteruser"),)
    assert seq.word_start == (True,)


def test_undecomposable_word_is_unk(toy_vocab):
    seq = encode("zzz", toy_vocab)
    assert seq.ids == (UNK_ID,)
    assert seq.word_start == (True,)


@pytest.mark.parametrize("literal", SPECIAL_TOKENS)
def test_special_token_text_is_unk(toy_vocab, literal):
    seq = encode(f"hello {literal} world", toy_vocab)
    assert seq.ids == (toy_vocab.id_of("hello"), UNK_ID, toy_vocab.id_of("world"))


def test_overlong_word_is_unk():
    vocab = Vocabulary.from_tokens(["a", "##a"])
    assert encode("a" * 101, vocab).ids == (UNK_ID,)
    assert len(encode("a" * 100, vocab).ids) == 100


def test_word_start_count_equals_word_count(toy_vocab):
    text = "hello worlds unaffable ab twitterurl"
    seq = encode(text, toy_vocab)
    assert sum(seq.word_start) == len(text.split())


def test_decode_strips_specials(toy_vocab):
    assert decode([CLS_ID, toy_vocab.id_of("hello"), SEP_ID], toy_vocab) == "hello"


def test_decode_out_of_range(toy_vocab):
    with pytest.raises(DataError, match="position 0"):
        decode([toy_vocab.size + 1], toy_vocab)


def test_round_trip_on_in_vocab_sentences(toy_vocab):
    words = ["hello", "world", "worlds", "unaffable", "un", "ab", "a", "twitteruser", "twitterurl"]
    rng = np.random.default_rng(1)
    for _ in range(1000):
        text = " ".join(rng.choice(words, size=int(rng.integers(1, 10))))
        assert decode(encode(text, toy_vocab).ids, toy_vocab) == text


def test_save_load_round_trip(tmp_path, toy_vocab):
    path = tmp_path / "vocab.txt"
    save_vocab(toy_vocab, path)
    loaded = load_vocab(path)
    assert loaded.tokens == toy_vocab.tokens
    assert loaded.injected_whole_tokens == toy_vocab.injected_whole_tokens
    assert loaded.content_hash() == toy_vocab.content_hash()
    assert len(path.read_text(encoding="utf-8").splitlines()) == toy_vocab.size


def test_load_missing_vocab(tmp_path):
    with pytest.raises(DataError):
        load_vocab(tmp_path / "nope.txt")
