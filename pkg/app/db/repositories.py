from __future__ import annotations

from typing import Sequence

from sqlalchemy import Select, select
from sqlalchemy.ext.asyncio import AsyncSession

from app.db import models
from app.db.models import StageStatus


class CellResultRepository:
    def __init__(self, session: AsyncSession) -> None:
        self.session = session

    async def list_for_matrix(self, matrix_key: str) -> Sequence[models.CellResult]:
        stmt: Select[tuple[models.CellResult]] = (
            select(models.CellResult)
            .where(models.CellResult.matrix_key == matrix_key)
            .order_by(
                models.CellResult.checkpoint_step,
                models.CellResult.dataset,
                models.CellResult.repeat,
            )
        )
        result = await self.session.execute(stmt)
        return result.scalars().all()

    async def get(
        self, matrix_key: str, checkpoint_step: int, dataset: str, repeat: int
    ) -> models.CellResult | None:
        stmt = select(models.CellResult).where(
            models.CellResult.matrix_key == matrix_key,
            models.CellResult.checkpoint_step == checkpoint_step,
            models.CellResult.dataset == dataset,
            models.CellResult.repeat == repeat,
        )
        result = await self.session.execute(stmt)
        return result.scalar_one_or_none()

    async def record(
        self,
        matrix_key: str,
        checkpoint_step: int,
        dataset: str,
        repeat: int,
        seed: int,
        f1: float,
    ) -> models.CellResult:
        existing = await self.get(matrix_key, checkpoint_step, dataset, repeat)
        if existing is not None:
            existing.seed = seed
            existing.f1 = f1
            return existing
        row = models.CellResult(
            matrix_key=matrix_key,
            checkpoint_step=checkpoint_step,
            dataset=dataset,
            repeat=repeat,
            seed=seed,
            f1=f1,
        )
        self.session.add(row)
        return row


class StageRunRepository:
    def __init__(self, session: AsyncSession) -> None:
        self.session = session

    async def log(
        self,
        stage: str,
        config_hash: str,
        seed: int,
        status: StageStatus,
        exit_code: int = 0,
        details: str | None = None,
    ) -> models.StageRun:
        entry = models.StageRun(
            stage=stage,
            config_hash=config_hash,
            seed=seed,
            status=status,
            exit_code=exit_code,
            details=details,
        )
        self.session.add(entry)
        return entry

    async def list_recent(self, limit: int = 20) -> Sequence[models.StageRun]:
        stmt = select(models.StageRun).order_by(models.StageRun.id.desc()).limit(limit)
        result = await self.session.execute(stmt)
        return result.scalars().all()
