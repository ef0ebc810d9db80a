from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any

from app.config import RunConfig
from app.core.example_gen import write_json_atomic
from app.errors import UsageError


def require(value: str | None, flag: str) -> str:
    if not value:
        raise UsageError(f"missing required option {flag} (flag or config file)")
    return value


def require_existing(value: str | None, flag: str) -> Path:
    path = Path(require(value, flag))
    if not path.exists():
        raise UsageError(f"{flag}: path does not exist: {path}")
    return path


def write_run_manifest(
    directory: str | Path,
    stage: str,
    config: RunConfig,
    outputs: dict[str, Any] | None = None,
) -> Path:
    """`<stage>.run.json`: resolved config, its hash and the seed, enough to rerun the stage."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{stage}.run.json"
    write_json_atomic(
        path,
        {
            "stage": stage,
            "seed": config.seed,
            "config_hash": config.config_hash(),
            "config": config.to_dict(),
            "outputs": outputs or {},
        },
    )
    return path


def echo(line: str) -> None:
    sys.stdout.write(line + "\n")


def progress_enabled(args: argparse.Namespace) -> bool:
    return bool(getattr(args, "progress", False))
