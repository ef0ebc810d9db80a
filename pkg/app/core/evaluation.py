"""Checkpoint x dataset x repeat evaluation matrix and its report files."""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd
from sqlalchemy.ext.asyncio import AsyncSession
from tqdm import tqdm

from app.core.checkpoint import read_manifest
from app.core.finetuning import FinetuneConfig, LabeledDataset, finetune
from app.core.statistics import delta_mp, sem
from app.core.tokenizer import Vocabulary
from app.db.repositories import CellResultRepository
from app.errors import DataError


REPORT_SCHEMA_VERSION = 1
REPORT_COLUMNS = ["checkpoint_step", "dataset", "repeat_count", "mean_f1", "sem", "delta_mp_pct"]
PLOT_COLUMNS = ["checkpoint_step", "dataset", "mean_f1", "sem", "delta_mp_pct", "delta_mp_sem_pct"]
SUMMARY_COLUMNS = ["checkpoint_step", "dataset_count", "mean_f1", "mean_delta_mp_pct"]

# (checkpoint path, dataset, seed) -> dev macro-F1
FinetuneFn = Callable[[Path, LabeledDataset, int], float]


@dataclass
class ReportCell:
    checkpoint_step: int
    dataset: str
    f1s: list[float]
    mean_f1: float
    sem: float | None
    delta_mp: float | None

    @property
    def repeat_count(self) -> int:
        return len(self.f1s)

    def to_dict(self) -> dict[str, Any]:
        return {
            "checkpoint_step": self.checkpoint_step,
            "dataset": self.dataset,
            "f1s": list(self.f1s),
            "repeat_count": self.repeat_count,
            "mean_f1": self.mean_f1,
            "sem": self.sem,
            "delta_mp_pct": self.delta_mp,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ReportCell":
        return cls(
            checkpoint_step=int(data["checkpoint_step"]),
            dataset=str(data["dataset"]),
            f1s=[float(v) for v in data["f1s"]],
            mean_f1=float(data["mean_f1"]),
            sem=None if data["sem"] is None else float(data["sem"]),
            delta_mp=None if data["delta_mp_pct"] is None else float(data["delta_mp_pct"]),
        )


@dataclass
class SummaryRow:
    checkpoint_step: int
    dataset_count: int
    mean_f1: float
    mean_delta_mp: float | None


@dataclass
class EvalReport:
    cells: list[ReportCell]
    repeats: int
    base_seed: int
    schema_version: int = REPORT_SCHEMA_VERSION

    @property
    def steps(self) -> list[int]:
        return sorted({c.checkpoint_step for c in self.cells})

    @property
    def datasets(self) -> list[str]:
        return sorted({c.dataset for c in self.cells})

    def cell(self, checkpoint_step: int, dataset: str) -> ReportCell:
        for c in self.cells:
            if c.checkpoint_step == checkpoint_step and c.dataset == dataset:
                return c
        raise KeyError((checkpoint_step, dataset))

    def summary(self) -> list[SummaryRow]:
        """Per-checkpoint averages over datasets."""
        rows = []
        for step in self.steps:
            cells = [c for c in self.cells if c.checkpoint_step == step]
            deltas = [c.delta_mp for c in cells if c.delta_mp is not None]
            rows.append(
                SummaryRow(
                    checkpoint_step=step,
                    dataset_count=len(cells),
                    mean_f1=float(np.mean([c.mean_f1 for c in cells])),
                    mean_delta_mp=float(np.mean(deltas)) if deltas else None,
                )
            )
        return rows

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "repeats": self.repeats,
            "base_seed": self.base_seed,
            "cells": [c.to_dict() for c in self.cells],
            "summary": [
                {
                    "checkpoint_step": s.checkpoint_step,
                    "dataset_count": s.dataset_count,
                    "mean_f1": s.mean_f1,
                    "mean_delta_mp_pct": s.mean_delta_mp,
                }
                for s in self.summary()
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "EvalReport":
        version = data.get("schema_version")
        if version != REPORT_SCHEMA_VERSION:
            raise DataError(f"report schema version {version} is not supported")
        return cls(
            cells=[ReportCell.from_dict(c) for c in data["cells"]],
            repeats=int(data["repeats"]),
            base_seed=int(data["base_seed"]),
            schema_version=version,
        )


def build_report(
    f1s: dict[tuple[int, str], list[float]],
    repeats: int,
    base_seed: int,
) -> EvalReport:
    """Aggregate raw repeat F1s; ΔMP is measured against the step-0 mean per dataset."""
    if not f1s:
        raise DataError("no evaluation results to report")
    baselines = {dataset: values for (step, dataset), values in f1s.items() if step == 0}
    cells = []
    for (step, dataset), values in sorted(f1s.items()):
        if dataset not in baselines:
            raise DataError(f"dataset {dataset} has no step-0 baseline; delta_mp undefined")
        mean_f1 = float(np.mean(values))
        base_mean = float(np.mean(baselines[dataset]))
        cells.append(
            ReportCell(
                checkpoint_step=step,
                dataset=dataset,
                f1s=list(values),
                mean_f1=mean_f1,
                sem=sem(values) if len(values) >= 2 else None,
                delta_mp=0.0 if step == 0 else (delta_mp(base_mean, mean_f1) if base_mean < 1 else None),
            )
        )
    return EvalReport(cells=cells, repeats=repeats, base_seed=base_seed)


def matrix_key(
    checkpoints: Sequence[tuple[int, Path]],
    datasets: Sequence[str],
    repeats: int,
    base_seed: int,
    extra: str = "",
) -> str:
    """Identity of a matrix run; stored cells are reused only under the same key."""
    fingerprints = []
    for step, path in checkpoints:
        try:
            fingerprints.append([step, read_manifest(path).get("blob_sha256")])
        except DataError:
            fingerprints.append([step, str(path)])
    payload = json.dumps(
        {
            "checkpoints": fingerprints,
            "datasets": sorted(datasets),
            "repeats": repeats,
            "base_seed": base_seed,
            "extra": extra,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def finetune_f1(
    checkpoint: Path,
    dataset: LabeledDataset,
    seed: int,
    vocab: Vocabulary,
    config: FinetuneConfig,
) -> float:
    return finetune(checkpoint, dataset, seed, vocab, config).f1


@dataclass
class EvaluationService:
    session: AsyncSession
    progress: bool = False

    @property
    def cells(self) -> CellResultRepository:
        return CellResultRepository(self.session)

    async def run_matrix(
        self,
        checkpoints: Sequence[tuple[int, Path]],
        datasets: Sequence[LabeledDataset],
        finetune_fn: FinetuneFn,
        repeats: int = 10,
        base_seed: int = 0,
        jobs: int = 1,
        key_extra: str = "",
    ) -> EvalReport:
        """Finetune every (checkpoint, dataset, repeat) cell with seed base_seed + repeat.

        Finished cells are committed one by one and skipped when the same
        matrix is run again.
        """
        if repeats < 1:
            raise DataError("repeats must be >= 1")
        steps = [step for step, _ in checkpoints]
        if 0 not in steps:
            raise DataError("checkpoint list has no step-0 baseline; delta_mp undefined")
        if not datasets:
            raise DataError("no datasets to evaluate")

        key = matrix_key(checkpoints, [d.name for d in datasets], repeats, base_seed, key_extra)
        done = {
            (row.checkpoint_step, row.dataset, row.repeat): row.f1
            for row in await self.cells.list_for_matrix(key)
        }
        pending = [
            (step, path, dataset, repeat)
            for step, path in sorted(checkpoints)
            for dataset in datasets
            for repeat in range(repeats)
            if (step, dataset.name, repeat) not in done
        ]
        if done:
            logging.info(f"MATRIX_RESUME: key={key[:12]} done={len(done)} pending={len(pending)}")

        bar = tqdm(total=len(pending), disable=not self.progress, desc="eval-matrix")
        loop = asyncio.get_running_loop()
        pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
        try:
            futures = [
                (
                    cell,
                    loop.run_in_executor(pool, partial(finetune_fn, cell[1], cell[2], base_seed + cell[3]))
                    if pool is not None
                    else None,
                )
                for cell in pending
            ]
            for (step, path, dataset, repeat), future in futures:
                seed = base_seed + repeat
                f1 = await future if future is not None else finetune_fn(path, dataset, seed)
                await self.cells.record(key, step, dataset.name, repeat, seed, f1)
                await self.session.commit()
                done[(step, dataset.name, repeat)] = f1
                bar.update(1)
                logging.info(
                    f"CELL_DONE: checkpoint_step={step} dataset={dataset.name} repeat={repeat} "
                    f"seed={seed} f1={f1:.4f}"
                )
        finally:
            bar.close()
            if pool is not None:
                pool.shutdown(wait=True, cancel_futures=True)

        grouped: dict[tuple[int, str], list[float]] = {}
        for step in sorted(set(steps)):
            for dataset in datasets:
                grouped[(step, dataset.name)] = [done[(step, dataset.name, r)] for r in range(repeats)]
        report = build_report(grouped, repeats=repeats, base_seed=base_seed)
        logging.info(f"MATRIX_DONE: key={key[:12]} cells={len(report.cells)} repeats={repeats}")
        return report


# ── Report files ─────────────────────────────────────────────────────────────


def _plot_rows(report: EvalReport) -> list[dict[str, Any]]:
    baselines = {c.dataset: c.mean_f1 for c in report.cells if c.checkpoint_step == 0}
    rows = []
    for c in report.cells:
        headroom = 1 - baselines.get(c.dataset, 1.0)
        rows.append(
            {
                "checkpoint_step": c.checkpoint_step,
                "dataset": c.dataset,
                "mean_f1": c.mean_f1,
                "sem": c.sem,
                "delta_mp_pct": c.delta_mp,
                # F1 error band expressed in delta_mp units
                "delta_mp_sem_pct": (c.sem / headroom * 100.0) if c.sem is not None and headroom > 0 else None,
            }
        )
    return rows


def _ensure_writable(out_dir: Path) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=out_dir, prefix=".writable-"):
            pass
    except OSError as exc:
        raise DataError(f"report directory {out_dir} is not writable: {exc}") from exc


def emit_report(report: EvalReport, out_dir: str | Path) -> dict[str, Path]:
    """Write report.csv, report.json, delta_mp_plot.csv and summary.csv.

    Every file is staged under a temporary name first and renamed only once
    all of them were written.
    """
    if not report.cells:
        raise DataError("cannot emit an empty report")
    out_dir = Path(out_dir)
    _ensure_writable(out_dir)

    cells = pd.DataFrame(
        [{k: v for k, v in c.to_dict().items() if k != "f1s"} for c in report.cells],
        columns=REPORT_COLUMNS,
    )
    plot = pd.DataFrame(_plot_rows(report), columns=PLOT_COLUMNS)
    summary = pd.DataFrame(
        [
            {
                "checkpoint_step": s.checkpoint_step,
                "dataset_count": s.dataset_count,
                "mean_f1": s.mean_f1,
                "mean_delta_mp_pct": s.mean_delta_mp,
            }
            for s in report.summary()
        ],
        columns=SUMMARY_COLUMNS,
    )

    targets = {
        "csv": out_dir / "report.csv",
        "json": out_dir / "report.json",
        "plot": out_dir / "delta_mp_plot.csv",
        "summary": out_dir / "summary.csv",
    }
    staged = {name: path.with_name(f".{path.name}.tmp") for name, path in targets.items()}
    try:
        cells.to_csv(staged["csv"], index=False)
        plot.to_csv(staged["plot"], index=False)
        summary.to_csv(staged["summary"], index=False)
        with open(staged["json"], "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    except OSError as exc:
        for path in staged.values():
            path.unlink(missing_ok=True)
        raise DataError(f"failed writing report to {out_dir}: {exc}") from exc
    for name, path in staged.items():
        os.replace(path, targets[name])
    logging.info(f"REPORT_WRITTEN: dir={out_dir} cells={len(report.cells)}")
    return targets


def load_report(path: str | Path) -> EvalReport:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return EvalReport.from_dict(json.load(fh))
    except FileNotFoundError as exc:
        raise DataError(f"report not found: {path}") from exc
