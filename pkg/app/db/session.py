from collections.abc import AsyncIterator
from contextlib import asynccontextmanager

from sqlalchemy.ext.asyncio import (
    AsyncEngine,
    AsyncSession,
    async_sessionmaker,
    create_async_engine,
)
from sqlalchemy.orm import DeclarativeBase

from app.config import get_settings


class Base(DeclarativeBase):
    pass


_engines: dict[str, AsyncEngine] = {}
_session_factories: dict[str, async_sessionmaker[AsyncSession]] = {}


def _resolve_url(db_url: str | None) -> str:
    return db_url or get_settings().db_url


def get_engine(db_url: str | None = None) -> AsyncEngine:
    url = _resolve_url(db_url)
    if url not in _engines:
        _engines[url] = create_async_engine(url, echo=False, future=True)
    return _engines[url]


def get_session_factory(db_url: str | None = None) -> async_sessionmaker[AsyncSession]:
    url = _resolve_url(db_url)
    if url not in _session_factories:
        _session_factories[url] = async_sessionmaker(
            bind=get_engine(url),
            expire_on_commit=False,
        )
    return _session_factories[url]


@asynccontextmanager
async def get_session(db_url: str | None = None) -> AsyncIterator[AsyncSession]:
    session_factory = get_session_factory(db_url)
    async with session_factory() as session:
        try:
            yield session
        finally:
            await session.close()


async def init_db(db_url: str | None = None) -> None:
    """Create all tables (the schema is small and append-only)."""
    from app.db import models  # noqa: F401

    engine = get_engine(db_url)
    async with engine.begin() as conn:
        await conn.run_sync(models.Base.metadata.create_all)


async def dispose_engines() -> None:
    # engines are bound to the event loop that created them
    for engine in _engines.values():
        await engine.dispose()
    _engines.clear()
    _session_factories.clear()
