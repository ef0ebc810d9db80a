import pytest


@pytest.fixture(autouse=True)
def isolated_db(tmp_path, monkeypatch):
    """Every test gets its own sqlite file for cell results and stage runs."""
    url = f"sqlite+aiosqlite:///{tmp_path / 'ctpt-test.db'}"
    monkeypatch.setenv("DB_URL", url)
    monkeypatch.setenv("CTPT_JOBS", "1")
    return url
