from __future__ import annotations

import argparse
from typing import NoReturn

from app.errors import UsageError


class ToolkitArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting, so run() owns exit codes."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().rstrip()}")


def add_common_flags(parser: argparse.ArgumentParser) -> None:
    # every value flag defaults to None so config-file values survive
    parser.add_argument("--config", help="JSON run configuration (flags override it)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--jobs", type=int, help="worker processes for parallel stages")
    parser.add_argument("--progress", action="store_true", help="show progress bars")


def add_model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--layers", type=int)
    group.add_argument("--hidden", type=int)
    group.add_argument("--heads", type=int)
    group.add_argument("--ff-dim", dest="ff_dim", type=int)


def add_finetune_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("finetuning")
    group.add_argument("--finetune-lr", dest="finetune_lr", type=float)
    group.add_argument("--finetune-batch-size", dest="finetune_batch_size", type=int)
    group.add_argument("--epochs", type=int, help="override the per-dataset epoch policy")
    group.add_argument(
        "--normalize-datasets",
        dest="normalize_datasets",
        action="store_const",
        const=True,
        help="pseudonymize usernames/URLs in dataset texts like the corpus",
    )


def build_parser() -> ToolkitArgumentParser:
    from app.cli import handlers_data, handlers_model

    parser = ToolkitArgumentParser(
        prog="ctpt",
        description="Domain-adaptive pretraining toolkit: corpus prep, WordPiece, "
        "MLM/NSP pretraining and finetuning evaluation.",
    )
    subparsers = parser.add_subparsers(
        dest="command",
        required=True,
        parser_class=ToolkitArgumentParser,
    )
    handlers_data.register(subparsers)
    handlers_model.register(subparsers)
    return parser
