import json
import re

import numpy as np
import pytest

from app.core.corpus_prep import (
    CleanTweet,
    DedupStats,
    RawTweet,
    SentenceDoc,
    clean_tweet,
    dedup_corpus,
    export_emoji_table,
    is_emoji_codepoint,
    iter_sentence_docs,
    jaccard,
    load_emoji_table,
    prep_corpus,
    segment_sentences,
    word_shingles,
)
from app.errors import ConfigError, DataError, RecordRejected


@pytest.fixture(scope="module")
def emoji_table():
    return load_emoji_table()


# ── clean_tweet ──────────────────────────────────────────────────────────────


def test_clean_tweet_strips_retweet_prefix_and_pseudonymizes(emoji_table):
    cleaned = clean_tweet(RawTweet(id="1", text="RT @alice: Check https://ex.co 😄"), emoji_table)
    # only the RT tag and its colon go; the handle is pseudonymized like any mention
    assert cleaned.text == "twitteruser check twitterurl :smile:"
    assert sorted(cleaned.text.split()) == sorted("check twitteruser twitterurl :smile:".split())
    assert cleaned.was_retweet is True


def test_clean_tweet_replaces_inline_usernames(emoji_table):
    cleaned = clean_tweet(RawTweet(id="1", text="thanks @bob_99 and @Carol!"), emoji_table)
    assert cleaned.text == "thanks twitteruser and twitteruser!"
    assert cleaned.was_retweet is False


def test_clean_tweet_plain_text_is_fixed_point(emoji_table):
    cleaned = clean_tweet(RawTweet(id="1", text="hello world"), emoji_table)
    assert cleaned == CleanTweet(id="1", text="hello world", was_retweet=False)


def test_clean_tweet_is_idempotent(emoji_table):
    once = clean_tweet(RawTweet(id="7", text="RT @x: Wow!! 😄😄 see www.example.org\tnow"), emoji_table)
    twice = clean_tweet(once, emoji_table)
    assert twice == once


def test_unknown_emoji_are_dropped():
    cleaned = clean_tweet(RawTweet(id="1", text="hi 😄 there"), {})
    assert cleaned.text == "hi there"


def test_emoji_shortcodes_are_space_padded(emoji_table):
    cleaned = clean_tweet(RawTweet(id="1", text="great😄job"), emoji_table)
    assert cleaned.text == "great :smile: job"


def test_control_characters_are_removed(emoji_table):
    cleaned = clean_tweet(RawTweet(id="1", text="a\x07b\x00c  \n d"), emoji_table)
    assert cleaned.text == "a b c d"


@pytest.mark.parametrize(
    "text, reason",
    [
        ("x" * 4001, "text_too_long"),
        ("bad \ud800 surrogate", "malformed_unicode"),
    ],
)
def test_clean_tweet_rejects_invalid_records(emoji_table, text, reason):
    with pytest.raises(RecordRejected) as excinfo:
        clean_tweet(RawTweet(id="9", text=text), emoji_table)
    assert excinfo.value.reason == reason
    assert excinfo.value.record_id == "9"


def test_clean_tweet_rejects_missing_id(emoji_table):
    with pytest.raises(RecordRejected) as excinfo:
        clean_tweet(RawTweet(id="", text="hello"), emoji_table)
    assert excinfo.value.reason == "missing_id"


FUZZ_PIECES = [
    "@", "@bob", "@@eve", "http://", "https://", "HTTPS://t.co/AbC", "ex.co/x?y=1", "www.site.org",
    " ", "  ", "\t", "\x07", "😄", "🙃", "❤", "RT ", "rt @z:", ":", "Hello", "é", "_", "abc", ".", "!",
]


def test_fuzzed_tweets_satisfy_clean_invariants(emoji_table):
    rng = np.random.default_rng(11)
    for i in range(500):
        pieces = rng.choice(FUZZ_PIECES, size=int(rng.integers(1, 12)))
        text = "".join(str(p) for p in pieces)
        try:
            cleaned = clean_tweet(RawTweet(id=str(i), text=text), emoji_table)
        except RecordRejected:
            continue
        assert re.search(r"@\w+", cleaned.text) is None, text
        assert "http://" not in cleaned.text and "https://" not in cleaned.text, text
        assert not any(is_emoji_codepoint(ch) for ch in cleaned.text), text
        assert cleaned.text == cleaned.text.strip()
        assert "  " not in cleaned.text
        assert clean_tweet(cleaned, emoji_table) == cleaned


# ── dedup_corpus ─────────────────────────────────────────────────────────────


def _tweets(texts):
    return [CleanTweet(id=str(i), text=t) for i, t in enumerate(texts)]


def brute_force_dedup(tweets, threshold):
    kept = []
    for tweet in tweets:
        if tweet.was_retweet:
            continue
        shingles = word_shingles(tweet.text)
        if any(
            k.text == tweet.text or jaccard(shingles, word_shingles(k.text)) >= threshold for k in kept
        ):
            continue
        kept.append(tweet)
    return kept


def _random_text(rng, words=40):
    return " ".join(f"t{n}" for n in rng.integers(0, 1_000_000, size=words))


def _near_duplicate(text):
    # replacing the last two words changes exactly two of the 38 shingles: Jaccard 36/40
    words = text.split()
    return " ".join(words[:-2] + ["changed1", "changed2"])


def test_exact_duplicate_keeps_first():
    a, b, c = _tweets(["x y z w v", "x y z w v", "q r s t u"])
    assert list(dedup_corpus([a, b, c])) == [a, c]


def test_empty_stream():
    assert list(dedup_corpus([])) == []


def test_retweets_are_dropped_and_counted():
    stats = DedupStats()
    tweets = [CleanTweet("1", "a b c", was_retweet=True), CleanTweet("2", "a b c")]
    assert [t.id for t in dedup_corpus(tweets, stats=stats)] == ["2"]
    assert stats.retweets == 1 and stats.kept == 1


def test_planted_near_duplicates_are_removed():
    rng = np.random.default_rng(3)
    bases = [_random_text(rng) for _ in range(450)]
    texts = list(bases)
    for i, position in enumerate(sorted(rng.choice(np.arange(50, 500), size=50, replace=False))):
        texts.insert(int(position), _near_duplicate(bases[i]))
    assert jaccard(word_shingles(bases[0]), word_shingles(_near_duplicate(bases[0]))) == pytest.approx(0.9)
    tweets = _tweets(texts)

    stats = DedupStats()
    survivors = list(dedup_corpus(tweets, 0.8, stats))
    assert len(survivors) == 450
    assert survivors == brute_force_dedup(tweets, 0.8)
    assert stats.near_duplicates == 50


@pytest.mark.parametrize("threshold", [0.7, 0.8, 1.0])
def test_dedup_matches_all_pairs_oracle(threshold):
    rng = np.random.default_rng(5)
    texts = []
    for _ in range(150):
        roll = rng.random()
        if texts and roll < 0.2:
            texts.append(texts[int(rng.integers(len(texts)))])
        elif texts and roll < 0.5:
            words = texts[int(rng.integers(len(texts)))].split()
            cut = int(rng.integers(1, 6))
            texts.append(" ".join(words[:-cut] + [f"n{k}" for k in range(cut)]))
        else:
            texts.append(_random_text(rng, words=int(rng.integers(12, 30))))
    tweets = _tweets(texts)
    assert list(dedup_corpus(tweets, threshold)) == brute_force_dedup(tweets, threshold)


def test_threshold_one_is_identity_without_exact_duplicates():
    rng = np.random.default_rng(8)
    tweets = _tweets(_random_text(rng, words=10) for _ in range(200))
    assert list(dedup_corpus(tweets, 1.0)) == tweets


def test_threshold_out_of_range():
    with pytest.raises(ConfigError):
        list(dedup_corpus(_tweets(["a"]), 1.5))


# ── segment_sentences ────────────────────────────────────────────────────────


def test_two_terminal_marks():
    doc = segment_sentences(CleanTweet("1", "hello world. how are you?"))
    assert doc == SentenceDoc("1", ("hello world.", "how are you?"))


def test_single_sentence_fallback():
    doc = segment_sentences(CleanTweet("1", "no punctuation here"))
    assert doc.sentences == ("no punctuation here",)


def test_shortcodes_are_never_split():
    doc = segment_sentences(CleanTweet("1", "so happy :smile: really! :heart: ok"))
    assert doc.sentences == ("so happy :smile: really!", ":heart: ok")


def test_empty_text_is_rejected():
    with pytest.raises(RecordRejected) as excinfo:
        segment_sentences(CleanTweet("1", ""))
    assert excinfo.value.reason == "empty_text"


def scan_sentences(text):
    sentences, current = [], []
    i = 0
    while i < len(text):
        ch = text[i]
        current.append(ch)
        if ch in ".!?" and i + 1 < len(text) and text[i + 1] == " ":
            sentences.append("".join(current).strip())
            current = []
            while i + 1 < len(text) and text[i + 1] == " ":
                i += 1
        i += 1
    sentences.append("".join(current).strip())
    return [s for s in sentences if s]


def test_segmentation_matches_character_scan(emoji_table):
    words = ["hello", "world.", "ok!", "why?", ":smile:", "e.g.", "wow...", "what?!", "twitterurl", "fine"]
    rng = np.random.default_rng(2)
    for i in range(200):
        text = " ".join(str(w) for w in rng.choice(words, size=int(rng.integers(1, 15))))
        tweet = clean_tweet(RawTweet(id=str(i), text=text), emoji_table)
        doc = segment_sentences(tweet)
        assert list(doc.sentences) == scan_sentences(tweet.text)
        assert " ".join(doc.sentences) == tweet.text


# ── prep_corpus ──────────────────────────────────────────────────────────────


def test_prep_corpus_writes_docs_and_reject_log(tmp_path, emoji_table):
    raw = tmp_path / "tweets.jsonl"
    lines = [
        json.dumps({"id": "1", "text": "Hello @bob. Visit https://x.co now!"}),
        json.dumps({"id": "2", "text": "RT @bob: Hello twitteruser. Visit"}),
        json.dumps({"id": "3", "text": "hello @someone. visit https://y.co now!"}),
        "{not json",
        json.dumps({"id": "4"}),
        json.dumps({"id": "5", "text": "😄 good morning"}),
        json.dumps({"id": "6", "text": "x" * 5000}),
    ]
    raw.write_text("\n".join(lines) + "\n", encoding="utf-8")
    out, rejects = tmp_path / "docs.jsonl", tmp_path / "rejects.jsonl"

    stats = prep_corpus(raw, out, rejects, emoji_table, near_dup_threshold=0.8)

    docs = list(iter_sentence_docs(out))
    assert [d.id for d in docs] == ["1", "5"]
    assert docs[0].sentences == ("hello twitteruser.", "visit twitterurl now!")
    assert docs[1].sentences == (":smile: good morning",)
    assert stats.read == 7
    assert stats.written == 2
    assert stats.dedup.retweets == 1
    assert stats.dedup.exact_duplicates == 1
    assert dict(stats.rejected) == {"invalid_json": 1, "missing_field": 1, "text_too_long": 1}
    reasons = sorted(json.loads(line)["reason"] for line in rejects.read_text().splitlines())
    assert reasons == ["invalid_json", "missing_field", "text_too_long"]


def test_iter_sentence_docs_reports_bad_line(tmp_path):
    path = tmp_path / "docs.jsonl"
    path.write_text('{"id": "1", "sentences": ["a"]}\n{"id": "2"}\n', encoding="utf-8")
    with pytest.raises(DataError, match=":2:"):
        list(iter_sentence_docs(path))


def test_exported_emoji_table_loads_back(tmp_path):
    path = tmp_path / "emoji.tsv"
    count = export_emoji_table(path)
    table = load_emoji_table(path)
    assert len(table) == count > 500
    assert table["\U0001F604"] == ":smile:"
    assert all(is_emoji_codepoint(ch) for ch in table)


def test_missing_emoji_table(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_emoji_table(tmp_path / "absent.tsv")


@pytest.mark.parametrize(
    "text, expected",
    [
        ("RT @alice: hi", "twitteruser hi"),
        ("rt: @alice hi", "twitteruser hi"),
        ("RT @a: RT @b: hi", "twitteruser rt twitteruser: hi"),
        ("rtfm @alice", "rtfm twitteruser"),
        ("RT is not a retweet", "rt is not a retweet"),
    ],
)
def test_retweet_tag_variants(text, expected):
    cleaned = clean_tweet(RawTweet(id="1", text=text), {})
    assert cleaned.text == expected
    assert cleaned.was_retweet is expected.startswith("twitteruser")
