from __future__ import annotations

import argparse
import asyncio
import json
from dataclasses import asdict, replace
from functools import partial
from pathlib import Path

from app.cli.common import echo, progress_enabled, require, require_existing, write_run_manifest
from app.cli.parser import ToolkitArgumentParser, add_common_flags, add_finetune_flags, add_model_flags
from app.config import RunConfig, get_settings, with_vocab_size
from app.core.checkpoint import list_checkpoints, read_manifest
from app.core.encoder_model import (
    ModelConfig,
    count_parameters,
    grad_check_model,
    init_params,
    random_batch,
)
from app.core.evaluation import EvaluationService, emit_report, finetune_f1, load_report
from app.core.example_gen import load_shard_set
from app.core.finetuning import discover_datasets, finetune, load_labeled_dataset
from app.core.pretraining import pretrain
from app.core.tokenizer import load_vocab
from app.db.repositories import StageRunRepository
from app.db.session import dispose_engines, get_session, init_db
from app.errors import DataError, NumericError


def handle_pretrain(args: argparse.Namespace, config: RunConfig) -> int:
    shard_dir = require_existing(config.paths.shards, "--shards")
    out_dir = Path(require(config.paths.checkpoints, "--out"))
    shard_set, manifest = load_shard_set(shard_dir)
    if config.paths.vocab:
        vocab = load_vocab(require_existing(config.paths.vocab, "--vocab"))
        if vocab.content_hash() != manifest.get("vocab_hash"):
            raise DataError(f"vocabulary {config.paths.vocab} does not match the one used for {shard_dir}")

    config = with_vocab_size(config, int(manifest["vocab_size"]))
    model_config = config.model
    if config.paths.resume:
        # a resumed run keeps the geometry it was started with
        model_config = ModelConfig(**read_manifest(config.paths.resume)["model_config"])
    model = init_params(model_config)

    result = pretrain(
        config.train,
        shard_set,
        model,
        out_dir,
        resume_from=config.paths.resume,
        stop_at=args.stop_at,
        vocab_hash=manifest.get("vocab_hash"),
        progress=progress_enabled(args),
    )
    write_run_manifest(
        out_dir,
        "pretrain",
        config,
        {
            "final_checkpoint": str(result.final_checkpoint),
            "last_step": result.last_step,
            "model_config": asdict(model_config),
        },
    )
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        echo(
            f"pretrain step={last.step} mlm_loss={last.mlm_loss:.4f} mlm_acc={last.mlm_acc:.4f} "
            f"nsp_loss={last.nsp_loss:.4f} nsp_acc={last.nsp_acc:.4f}"
        )
    return 0


def _load_datasets(config: RunConfig) -> list:
    datasets_dir = require_existing(config.paths.datasets, "--datasets")
    names = [config.eval.dataset] if config.eval.dataset else discover_datasets(datasets_dir)
    if not names:
        raise DataError(f"no <name>.train.csv / <name>.dev.csv pairs in {datasets_dir}")
    return [
        load_labeled_dataset(datasets_dir, name, normalize=config.prep.normalize_datasets)
        for name in names
    ]


def handle_finetune(args: argparse.Namespace, config: RunConfig) -> int:
    checkpoint = require_existing(config.paths.checkpoint, "--checkpoint")
    vocab = load_vocab(require_existing(config.paths.vocab, "--vocab"))
    results = []
    for dataset in _load_datasets(config):
        result = finetune(checkpoint, dataset, config.seed, vocab, config.finetune)
        results.append(result)
        echo(f"finetune dataset={dataset.name} epochs={result.epochs} seed={config.seed} f1={result.f1:.4f}")
    write_run_manifest(
        checkpoint.parent,
        f"finetune-{checkpoint.name}",
        config,
        {r.dataset: r.f1 for r in results},
    )
    return 0


async def _run_matrix(config: RunConfig, checkpoints, datasets, finetune_fn, progress: bool):
    db_url = get_settings().db_url
    try:
        await init_db(db_url)
        async with get_session(db_url) as session:
            service = EvaluationService(session=session, progress=progress)
            return await service.run_matrix(
                checkpoints,
                datasets,
                finetune_fn,
                repeats=config.eval.repeats,
                base_seed=config.seed,
                jobs=config.jobs,
                key_extra=json.dumps(
                    {
                        "finetune": asdict(config.finetune),
                        "normalize": config.prep.normalize_datasets,
                    },
                    sort_keys=True,
                ),
            )
    finally:
        await dispose_engines()


def handle_eval_matrix(args: argparse.Namespace, config: RunConfig) -> int:
    ckpt_root = require_existing(config.paths.checkpoints, "--checkpoints")
    out_dir = Path(require(config.paths.reports, "--out"))
    vocab = load_vocab(require_existing(config.paths.vocab, "--vocab"))
    checkpoints = list_checkpoints(ckpt_root)
    if not checkpoints:
        raise DataError(f"no step<N> checkpoints under {ckpt_root}")
    datasets = _load_datasets(config)
    finetune_fn = partial(finetune_f1, vocab=vocab, config=config.finetune)

    report = asyncio.run(_run_matrix(config, checkpoints, datasets, finetune_fn, progress_enabled(args)))
    written = emit_report(report, out_dir)
    write_run_manifest(out_dir, "eval-matrix", config, {k: str(v) for k, v in written.items()})
    for row in report.summary():
        delta = "" if row.mean_delta_mp is None else f"{row.mean_delta_mp:.2f}"
        echo(f"eval step={row.checkpoint_step} mean_f1={row.mean_f1:.4f} mean_delta_mp_pct={delta}")
    return 0


def handle_report(args: argparse.Namespace, config: RunConfig) -> int:
    source = require_existing(args.report_json, "--from")
    out_dir = Path(require(config.paths.reports, "--out"))
    report = load_report(source)
    written = emit_report(report, out_dir)
    for name, path in written.items():
        echo(f"{name} {path}")
    return 0


def _toy_or_configured(args: argparse.Namespace, config: RunConfig, toy: bool) -> ModelConfig:
    if not toy:
        model_config = config.model
        if args.vocab:
            model_config = replace(model_config, vocab_size=load_vocab(args.vocab).size)
        elif args.vocab_size:
            model_config = replace(model_config, vocab_size=args.vocab_size)
        return model_config
    return ModelConfig(
        layers=args.layers or 2,
        hidden=args.hidden or 32,
        heads=args.heads or 4,
        ff_dim=args.ff_dim or 64,
        vocab_size=args.vocab_size or 50,
        max_seq=16,
        seed=config.seed,
    )


def handle_model_describe(args: argparse.Namespace, config: RunConfig) -> int:
    model_config = _toy_or_configured(args, config, toy=False)
    model = init_params(model_config)
    echo(" ".join(f"{k}={v}" for k, v in asdict(model_config).items()))
    for group, count in count_parameters(model).items():
        echo(f"params group={group} count={count}")
    return 0


def handle_model_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    model_config = _toy_or_configured(args, config, toy=True)
    model = init_params(model_config)
    batch = random_batch(model_config, batch_size=3, seed=config.seed)
    report = grad_check_model(model, batch, h=args.h, tolerance=args.tolerance, seed=config.seed, atol=args.atol)
    for line in report.lines():
        echo(line)
    echo(f"gradcheck checked={report.checked} max_rel_error={report.max_error:.3e} passed={str(report.passed).lower()}")
    worst = report.worst()
    if worst is not None:
        echo(
            f"gradcheck worst tensor={worst.tensor} index={list(worst.worst_index)} "
            f"analytic={worst.worst_analytic:.6e} numeric={worst.worst_numeric:.6e} rel_error={worst.relative_error:.3e}"
        )
    if not report.passed:
        raise NumericError(
            f"gradient check failed for {len(report.failures())} tensors; worst {worst.tensor}"
            f"{list(worst.worst_index)} analytic={worst.worst_analytic:.6e} numeric={worst.worst_numeric:.6e} "
            f"rel_error={worst.relative_error:.3e} > {args.tolerance}"
        )
    return 0


async def _recent_runs(limit: int):
    db_url = get_settings().db_url
    try:
        await init_db(db_url)
        async with get_session(db_url) as session:
            return list(await StageRunRepository(session).list_recent(limit))
    finally:
        await dispose_engines()


def handle_runs(args: argparse.Namespace, config: RunConfig) -> int:
    for run in asyncio.run(_recent_runs(args.limit)):
        echo(
            f"run id={run.id} stage={run.stage} status={run.status.value} exit_code={run.exit_code} "
            f"seed={run.seed} config_hash={run.config_hash[:12]} at={run.created_at.isoformat()}"
        )
    return 0


def register(subparsers: argparse._SubParsersAction) -> None:
    train = subparsers.add_parser("pretrain", help="MLM + NSP pretraining with checkpoints")
    add_common_flags(train)
    add_model_flags(train)
    train.add_argument("--shards")
    train.add_argument("--vocab", help="optional; verified against the shard manifest")
    train.add_argument("--out", dest="checkpoints")
    train.add_argument("--resume", help="checkpoint directory to continue from")
    train.add_argument("--stop-at", dest="stop_at", type=int, help="halt after this step")
    train.add_argument("--learning-rate", dest="learning_rate", type=float)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--total-steps", dest="total_steps", type=int)
    train.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    train.add_argument("--eval-interval", dest="eval_interval", type=int)
    train.add_argument("--eval-batches", dest="eval_batches", type=int)
    train.set_defaults(handler=handle_pretrain)

    tune = subparsers.add_parser("finetune", help="finetune one checkpoint on labeled datasets")
    add_common_flags(tune)
    add_finetune_flags(tune)
    tune.add_argument("--checkpoint")
    tune.add_argument("--datasets", help="directory with <name>.train.csv / <name>.dev.csv")
    tune.add_argument("--dataset", help="only this dataset name")
    tune.add_argument("--vocab")
    tune.set_defaults(handler=handle_finetune)

    matrix = subparsers.add_parser("eval-matrix", help="checkpoint x dataset x repeat evaluation")
    add_common_flags(matrix)
    add_finetune_flags(matrix)
    matrix.add_argument("--checkpoints", help="directory holding step<N> checkpoints")
    matrix.add_argument("--datasets")
    matrix.add_argument("--dataset", help="only this dataset name")
    matrix.add_argument("--vocab")
    matrix.add_argument("--repeats", type=int)
    matrix.add_argument("--out", dest="reports")
    matrix.set_defaults(handler=handle_eval_matrix)

    report = subparsers.add_parser("report", help="re-emit report files from a report.json")
    add_common_flags(report)
    report.add_argument("--from", dest="report_json")
    report.add_argument("--out", dest="reports")
    report.set_defaults(handler=handle_report)

    model = subparsers.add_parser("model", help="inspect or verify the encoder")
    model_sub = model.add_subparsers(dest="model_command", required=True, parser_class=ToolkitArgumentParser)

    describe = model_sub.add_parser("describe", help="print config and parameter counts")
    add_common_flags(describe)
    add_model_flags(describe)
    describe.add_argument("--vocab", help="take vocab_size from this vocabulary file")
    describe.add_argument("--vocab-size", dest="vocab_size", type=int)
    describe.set_defaults(handler=handle_model_describe)

    gradcheck = model_sub.add_parser("gradcheck", help="finite-difference gradient check on a toy config")
    add_common_flags(gradcheck)
    add_model_flags(gradcheck)
    gradcheck.add_argument("--vocab-size", dest="vocab_size", type=int)
    gradcheck.add_argument("--step-size", dest="h", type=float, default=1e-3)
    gradcheck.add_argument("--tolerance", type=float, default=1e-3)
    gradcheck.add_argument(
        "--atol", type=float, help="absolute difference that counts as agreement (default: tolerance * step size)"
    )
    gradcheck.set_defaults(handler=handle_model_gradcheck, vocab=None)

    runs = subparsers.add_parser("runs", help="list recently recorded stage runs")
    add_common_flags(runs)
    runs.add_argument("--limit", type=int, default=20)
    runs.set_defaults(handler=handle_runs)

