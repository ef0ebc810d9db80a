from __future__ import annotations

import argparse
import json
from pathlib import Path

from app.cli.common import echo, progress_enabled, require, require_existing, write_run_manifest
from app.cli.parser import ToolkitArgumentParser, add_common_flags
from app.config import RunConfig
from app.core.corpus_prep import export_emoji_table, iter_sentence_docs, load_emoji_table, prep_corpus
from app.core.example_gen import generate_shards
from app.core.finetuning import split_labeled_csv
from app.core.tokenizer import SPECIAL_TOKENS, Vocabulary, build_vocab, load_vocab, save_vocab
from app.errors import DataError


def handle_prep(args: argparse.Namespace, config: RunConfig) -> int:
    in_path = require_existing(config.paths.corpus, "--in")
    out_path = Path(require(config.paths.docs, "--out"))
    reject_path = Path(config.paths.rejects or f"{out_path}.rejects.jsonl")
    emoji_table = load_emoji_table(config.paths.emoji_table)

    stats = prep_corpus(
        in_path,
        out_path,
        reject_path,
        emoji_table,
        near_dup_threshold=config.prep.dedup_threshold,
        jobs=config.jobs,
    )
    write_run_manifest(
        out_path.parent,
        "prep",
        config,
        {"docs": str(out_path), "rejects": str(reject_path), "stats": stats.as_dict()},
    )
    echo(f"prep read={stats.read} written={stats.written} rejected={sum(stats.rejected.values())}")
    return 0


def handle_vocab_build(args: argparse.Namespace, config: RunConfig) -> int:
    docs_path = require_existing(config.paths.docs, "--docs")
    vocab_path = Path(require(config.paths.vocab, "--out"))
    vocab = build_vocab(
        iter_sentence_docs(docs_path),
        config.vocab.size,
        progress=progress_enabled(args),
    )
    save_vocab(vocab, vocab_path)
    write_run_manifest(
        vocab_path.parent,
        "vocab",
        config,
        {
            "vocab": str(vocab_path),
            "size": vocab.size,
            "undersized": vocab.undersized,
            "vocab_hash": vocab.content_hash(),
        },
    )
    echo(f"vocab size={vocab.size} undersized={str(vocab.undersized).lower()}")
    return 0


def _undersized_flag(vocab_path: Path, vocab: Vocabulary, target: int | None) -> str:
    """true/false against --size, else what vocab.run.json recorded for this exact vocabulary."""
    if target is not None:
        return str(vocab.size < target).lower()
    manifest = vocab_path.parent / "vocab.run.json"
    if not manifest.exists():
        return "unknown"
    try:
        outputs = json.loads(manifest.read_text(encoding="utf-8")).get("outputs", {})
    except json.JSONDecodeError as exc:
        raise DataError(f"vocab manifest {manifest} is not valid JSON: {exc}") from exc
    if outputs.get("vocab_hash") != vocab.content_hash() or "undersized" not in outputs:
        return "unknown"
    return str(bool(outputs["undersized"])).lower()


def handle_vocab_inspect(args: argparse.Namespace, config: RunConfig) -> int:
    vocab_path = require_existing(config.paths.vocab, "--vocab")
    vocab = load_vocab(vocab_path)
    injected = sorted(vocab.injected_whole_tokens)
    echo(f"vocab path={vocab_path} size={vocab.size} hash={vocab.content_hash()}")
    echo(f"specials={','.join(SPECIAL_TOKENS)}")
    echo(f"injected={','.join(injected) if injected else '-'}")
    echo(f"undersized={_undersized_flag(vocab_path, vocab, args.target_size)}")
    return 0


def handle_examples(args: argparse.Namespace, config: RunConfig) -> int:
    docs_path = require_existing(config.paths.docs, "--docs")
    vocab = load_vocab(require_existing(config.paths.vocab, "--vocab"))
    out_dir = Path(require(config.paths.shards, "--out"))
    shard_set = generate_shards(
        iter_sentence_docs(docs_path),
        vocab,
        dupe_factor=config.examples.dupe_factor,
        seed=config.seed,
        out_dir=out_dir,
        num_shards=config.examples.num_shards,
        validation_fraction=config.examples.validation_fraction,
        jobs=config.jobs,
        progress=progress_enabled(args),
    )
    write_run_manifest(
        out_dir,
        "examples",
        config,
        {"example_count": shard_set.example_count, "validation_count": shard_set.validation_count},
    )
    echo(f"examples train={shard_set.example_count} validation={shard_set.validation_count}")
    return 0


def handle_split_dataset(args: argparse.Namespace, config: RunConfig) -> int:
    csv_path = require_existing(args.csv_path, "--csv")
    out_dir = Path(require(config.paths.datasets, "--out"))
    written = split_labeled_csv(csv_path, out_dir, name=args.name, seed=config.seed)
    write_run_manifest(
        out_dir,
        f"split-{args.name or csv_path.stem}",
        config,
        {split: str(path) for split, path in written.items()},
    )
    for split, path in written.items():
        echo(f"{split} {path}")
    return 0


def handle_emoji_table(args: argparse.Namespace, config: RunConfig) -> int:
    out_path = Path(require(config.paths.emoji_table, "--out"))
    count = export_emoji_table(out_path)
    echo(f"emoji-table entries={count} path={out_path}")
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    prep = subparsers.add_parser("prep", help="clean, deduplicate and segment a raw tweet corpus")
    add_common_flags(prep)
    prep.add_argument("--in", dest="in_path", help="raw tweets, JSON lines with id/text")
    prep.add_argument("--out", dest="docs", help="sentence documents (JSON lines)")
    prep.add_argument("--rejects", help="reject log (default: <out>.rejects.jsonl)")
    prep.add_argument("--emoji-table", dest="emoji_table")
    prep.add_argument("--dedup-threshold", dest="dedup_threshold", type=float)
    prep.set_defaults(handler=handle_prep)

    vocab = subparsers.add_parser("vocab", help="build or inspect a WordPiece vocabulary")
    vocab_sub = vocab.add_subparsers(dest="vocab_command", required=True, parser_class=ToolkitArgumentParser)

    build = vocab_sub.add_parser("build", help="induce a WordPiece vocabulary from sentence documents")
    add_common_flags(build)
    build.add_argument("--docs")
    build.add_argument("--out", dest="vocab")
    build.add_argument("--size", type=int)
    build.set_defaults(handler=handle_vocab_build)

    inspect = vocab_sub.add_parser("inspect", help="print size, specials, injected tokens and hash")
    add_common_flags(inspect)
    inspect.add_argument("--vocab")
    inspect.add_argument("--size", dest="target_size", type=int, help="target size to judge undersized against")
    inspect.set_defaults(handler=handle_vocab_inspect)

    examples = subparsers.add_parser("examples", help="generate MLM/NSP example shards")
    add_common_flags(examples)
    examples.add_argument("--docs")
    examples.add_argument("--vocab")
    examples.add_argument("--out", dest="shards")
    examples.add_argument("--dupe-factor", dest="dupe_factor", type=int)
    examples.add_argument("--num-shards", dest="num_shards", type=int)
    examples.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    examples.set_defaults(handler=handle_examples)

    split = subparsers.add_parser("split-dataset", help="split a text,label CSV into train/dev/test")
    add_common_flags(split)
    split.add_argument("--csv", dest="csv_path")
    split.add_argument("--out", dest="datasets")
    split.add_argument("--name", help="dataset name (default: CSV file stem)")
    split.set_defaults(handler=handle_split_dataset)

    emoji = subparsers.add_parser("emoji-table", help="export the full emoji shortcode table")
    add_common_flags(emoji)
    emoji.add_argument("--out", dest="emoji_table")
    emoji.set_defaults(handler=handle_emoji_table)
