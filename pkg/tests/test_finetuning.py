import math

import numpy as np
import pandas as pd
import pytest

from app.core.checkpoint import read_manifest
from app.core.encoder_model import init_params
from app.core.finetuning import (
    FinetuneConfig,
    LabeledDataset,
    discover_datasets,
    epochs_for,
    finetune,
    load_labeled_dataset,
    split_labeled_csv,
)
from app.core.pretraining import TrainConfig, pretrain
from app.core.statistics import sem
from app.core.tokenizer import Vocabulary
from app.errors import ConfigError, DataError
from helpers import build_shards, chain_docs, chain_vocab, keyword_rows, save_untrained, toy_config, write_dataset


@pytest.fixture
def small_checkpoint(tmp_path):
    return save_untrained(tmp_path / "step0", toy_config(max_seq=16), chain_vocab())


def test_epoch_policy():
    assert epochs_for("SST-2") == 3
    assert epochs_for("CC") == 3
    assert epochs_for("SE") == 3
    assert epochs_for("VC") == 5
    assert epochs_for("MVS") == 10
    assert epochs_for("airline_sentiment") == 3


def test_class_without_train_examples():
    with pytest.raises(DataError, match="no train examples"):
        LabeledDataset(
            name="d",
            classes=("a", "b", "c"),
            train=[("w00", "a"), ("w10", "b")],
            dev=[("w20", "c")],
        )


def test_dev_label_outside_classes():
    with pytest.raises(DataError, match="not in classes"):
        LabeledDataset(name="d", classes=("a",), train=[("w00", "a")], dev=[("w10", "z")])


def test_load_drops_dev_rows_seen_in_train(tmp_path):
    write_dataset(
        tmp_path,
        "VC",
        train=[("w00 w01", "a"), ("w10 w11", "b")],
        dev=[("w00 w01", "a"), ("w12 w13", "b"), ("w02", "a")],
    )
    dataset = load_labeled_dataset(tmp_path, "VC")
    assert dataset.classes == ("a", "b")
    assert dataset.dev == [("w12 w13", "b"), ("w02", "a")]
    assert dataset.epochs == 5


def test_missing_split_file(tmp_path):
    write_dataset(tmp_path, "CC", train=[("w00", "a")], dev=[("w01", "a")])
    (tmp_path / "CC.dev.csv").unlink()
    with pytest.raises(DataError, match="not found"):
        load_labeled_dataset(tmp_path, "CC")


def test_discover_needs_train_and_dev(tmp_path):
    write_dataset(tmp_path, "CC", train=[("w00", "a")], dev=[("w01", "a")])
    write_dataset(tmp_path, "SE", train=[("w00", "a")], dev=[("w01", "a")])
    (tmp_path / "SE.dev.csv").unlink()
    assert discover_datasets(tmp_path) == ["CC"]


def test_split_is_disjoint_and_sized(tmp_path):
    source = tmp_path / "all.csv"
    pd.DataFrame({"text": [f"text {i}" for i in range(100)], "label": ["x", "y"] * 50}).to_csv(
        source, index=False
    )
    paths = split_labeled_csv(source, tmp_path / "out", name="MVS", seed=4)
    frames = {split: pd.read_csv(path, dtype=str) for split, path in paths.items()}
    assert [len(frames[s]) for s in ("train", "dev", "test")] == [50, 30, 20]
    texts = [set(frames[s]["text"]) for s in ("train", "dev", "test")]
    assert not texts[0] & texts[1] and not texts[0] & texts[2] and not texts[1] & texts[2]
    again = split_labeled_csv(source, tmp_path / "again", name="MVS", seed=4)
    assert again["train"].read_bytes() == paths["train"].read_bytes()
    assert sorted(p.name for p in paths.values()) == ["MVS.dev.csv", "MVS.test.csv", "MVS.train.csv"]


def test_finetune_config_validation():
    with pytest.raises(ConfigError):
        FinetuneConfig(learning_rate=0).validate()
    with pytest.raises(ConfigError):
        FinetuneConfig(epochs=0).validate()


def test_same_seed_gives_same_result(small_checkpoint):
    dataset = LabeledDataset("toy", ("a", "b", "c"), keyword_rows(30, seed=1), keyword_rows(15, seed=2), epochs=1)
    config = FinetuneConfig(learning_rate=1e-3, batch_size=8)
    first = finetune(small_checkpoint, dataset, 5, chain_vocab(), config)
    second = finetune(small_checkpoint, dataset, 5, chain_vocab(), config)
    assert first.f1 == second.f1
    assert first.predictions == second.predictions
    assert 0.0 <= first.f1 <= 1.0
    assert first.epochs == 1


def test_vocabulary_mismatch(small_checkpoint):
    dataset = LabeledDataset("toy", ("a", "b", "c"), keyword_rows(6, seed=1), keyword_rows(3, seed=2))
    other = Vocabulary.from_tokens(["x", "y"], injected=())
    with pytest.raises(DataError, match="different vocabulary"):
        finetune(small_checkpoint, dataset, 0, other)


@pytest.fixture(scope="module")
def pretrained_checkpoint(tmp_path_factory):
    root = tmp_path_factory.mktemp("pretrained")
    vocab = chain_vocab()
    shard_set = build_shards(root / "shards", chain_docs(1000, seed=6), vocab)
    config = TrainConfig(
        learning_rate=1e-3,
        batch_size=32,
        total_steps=600,
        checkpoint_interval=300,
        eval_interval=300,
        eval_batches=4,
        seed=0,
    )
    result = pretrain(config, shard_set, init_params(toy_config()), root / "run", vocab_hash=vocab.content_hash())
    return result.final_checkpoint


@pytest.mark.slow
def test_separable_classes_are_learned_from_a_pretrained_checkpoint(pretrained_checkpoint):
    assert read_manifest(pretrained_checkpoint)["step"] == 600
    dataset = LabeledDataset(
        "separable",
        ("a", "b", "c"),
        keyword_rows(500, seed=11),
        keyword_rows(300, seed=12),
    )
    result = finetune(pretrained_checkpoint, dataset, 0, chain_vocab(), FinetuneConfig(learning_rate=1e-3, epochs=8))
    assert result.f1 >= 0.95


@pytest.mark.slow
def test_sem_over_ten_repeats_matches_closed_form(pretrained_checkpoint):
    dataset = LabeledDataset(
        "separable",
        ("a", "b", "c"),
        keyword_rows(60, seed=21),
        keyword_rows(30, seed=22),
        epochs=1,
    )
    config = FinetuneConfig(learning_rate=1e-3, batch_size=8)
    f1s = [finetune(pretrained_checkpoint, dataset, seed, chain_vocab(), config).f1 for seed in range(10)]
    expected = float(np.std(f1s, ddof=1) / math.sqrt(len(f1s)))
    assert abs(sem(f1s) - expected) <= 1e-12
