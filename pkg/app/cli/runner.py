from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from typing import Sequence

import torch
from sqlalchemy.exc import SQLAlchemyError

from app.cli.parser import build_parser
from app.config import RunConfig, Settings, get_settings, load_config_file, resolve_run_config
from app.db.models import StageStatus
from app.db.repositories import StageRunRepository
from app.db.session import dispose_engines, get_session, init_db
from app.errors import DataError, ToolkitError, UsageError

# stages whose outcome is recorded in the stage-run log
RECORDED_STAGES = frozenset({"prep", "vocab", "examples", "pretrain", "finetune", "eval-matrix", "report"})


def apply_determinism(settings: Settings) -> None:
    if settings.deterministic:
        torch.use_deterministic_algorithms(True)


async def _record_stage(
    db_url: str,
    stage: str,
    config: RunConfig,
    status: StageStatus,
    exit_code: int,
    details: str | None,
) -> None:
    try:
        await init_db(db_url)
        async with get_session(db_url) as session:
            await StageRunRepository(session).log(
                stage=stage,
                config_hash=config.config_hash(),
                seed=config.seed,
                status=status,
                exit_code=exit_code,
                details=details,
            )
            await session.commit()
    finally:
        await dispose_engines()


def _record(settings: Settings, stage: str, config: RunConfig, exit_code: int, details: str | None) -> None:
    status = StageStatus.OK if exit_code == 0 else StageStatus.FAILED
    try:
        asyncio.run(_record_stage(settings.db_url, stage, config, status, exit_code, details))
    except (SQLAlchemyError, OSError) as exc:
        logging.warning(f"STAGE_LOG_FAILED: stage={stage} error={exc}")


def stage_name(args: argparse.Namespace) -> str:
    if args.command == "model":
        return f"model-{args.model_command}"
    if args.command == "vocab" and args.vocab_command != "build":
        return f"vocab-{args.vocab_command}"
    return args.command


def run(argv: Sequence[str] | None = None) -> int:
    """Parse argv, run one stage, return the process exit code.

    0 success, 1 usage error, 2 data error, 3 numeric failure.
    """
    settings = get_settings()
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv) if argv is not None else None)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return exc.exit_code
    except SystemExit as exc:
        # --help
        return int(exc.code or 0)

    stage = stage_name(args)
    config = RunConfig()
    try:
        # env default < config file < flag
        file_config = {"jobs": settings.default_jobs}
        if args.config:
            file_config.update(load_config_file(args.config))
        config = resolve_run_config(vars(args), file_config)
        apply_determinism(settings)
        logging.info(f"STAGE_START: stage={stage} seed={config.seed} config_hash={config.config_hash()[:12]}")
        exit_code = args.handler(args, config) or 0
        details = None
    except (ToolkitError, OSError) as exc:
        exit_code = getattr(exc, "exit_code", DataError.exit_code)
        details = str(exc)
        logging.error(f"STAGE_FAILED: stage={stage} exit_code={exit_code} error={exc}")
        sys.stderr.write(f"error: {exc}\n")
        if isinstance(exc, UsageError):
            sys.stderr.write(parser.format_usage())

    if stage in RECORDED_STAGES:
        _record(settings, stage, config, exit_code, details)
    if exit_code == 0:
        logging.info(f"STAGE_DONE: stage={stage}")
    return exit_code
