import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from app.core.evaluation import EvaluationService, build_report, emit_report, load_report
from app.core.finetuning import LabeledDataset
from app.errors import DataError
from helpers import run_in_session

# dataset -> (baseline F1, pretrained F1), the published benchmark averages
PUBLISHED_F1 = {
    "CC": (0.931, 0.949),
    "VC": (0.824, 0.869),
    "MVS": (0.696, 0.748),
    "SST-2": (0.937, 0.944),
    "SE": (0.620, 0.654),
}
PUBLISHED_DELTA = {"CC": 25.88, "VC": 25.27, "MVS": 17.07, "SST-2": 10.67, "SE": 8.97}
PUBLISHED_AVERAGE_DELTA = 17.57


def _dataset(name: str) -> LabeledDataset:
    return LabeledDataset(name=name, classes=("a",), train=[("w00", "a")], dev=[("w01", "a")])


def _checkpoints(tmp_path: Path, steps=(0, 500, 1000)) -> list[tuple[int, Path]]:
    return [(step, tmp_path / f"step{step}") for step in steps]


class FakeFinetune:
    """F1 as a fixed function of (checkpoint step, dataset, seed); counts calls."""

    def __init__(self, fail_after: int | None = None) -> None:
        self.calls: list[tuple[str, str, int]] = []
        self.fail_after = fail_after

    def __call__(self, checkpoint: Path, dataset: LabeledDataset, seed: int) -> float:
        if self.fail_after is not None and len(self.calls) >= self.fail_after:
            raise RuntimeError("worker died")
        self.calls.append((checkpoint.name, dataset.name, seed))
        step = int(checkpoint.name[len("step") :])
        return 0.6 + step / 10_000 + 0.01 * seed + (0.05 if dataset.name == "VC" else 0.0)


def _run(db_url, checkpoints, datasets, fn, repeats=3, base_seed=0):
    async def work(session):
        return await EvaluationService(session).run_matrix(
            checkpoints, datasets, fn, repeats=repeats, base_seed=base_seed
        )

    return run_in_session(db_url, work)


# ── run_matrix ───────────────────────────────────────────────────────────────


def test_matrix_cells_and_baseline(tmp_path, isolated_db):
    fake = FakeFinetune()
    report = _run(isolated_db, _checkpoints(tmp_path), [_dataset("CC"), _dataset("VC")], fake, base_seed=7)

    assert len(fake.calls) == 3 * 2 * 3
    assert {seed for _, _, seed in fake.calls} == {7, 8, 9}
    assert len(report.cells) == 6
    assert all(c.repeat_count == 3 for c in report.cells)
    for dataset in ("CC", "VC"):
        assert report.cell(0, dataset).delta_mp == 0.0
        assert report.cell(1000, dataset).delta_mp > report.cell(500, dataset).delta_mp > 0

    cell = report.cell(500, "CC")
    assert cell.f1s == pytest.approx([0.72, 0.73, 0.74])
    assert cell.mean_f1 == pytest.approx(0.73)
    assert cell.sem == pytest.approx(0.01 / np.sqrt(3))


def test_rerun_skips_finished_cells(tmp_path, isolated_db):
    checkpoints = _checkpoints(tmp_path)
    datasets = [_dataset("CC"), _dataset("VC")]
    first = _run(isolated_db, checkpoints, datasets, FakeFinetune())

    again = FakeFinetune()
    second = _run(isolated_db, checkpoints, datasets, again)
    assert again.calls == []
    assert second == first


def test_interrupted_matrix_resumes_remaining_cells(tmp_path, isolated_db):
    checkpoints = _checkpoints(tmp_path)
    datasets = [_dataset("CC"), _dataset("VC")]
    with pytest.raises(RuntimeError):
        _run(isolated_db, checkpoints, datasets, FakeFinetune(fail_after=5))

    rest = FakeFinetune()
    report = _run(isolated_db, checkpoints, datasets, rest)
    assert len(rest.calls) == 18 - 5
    fresh_db = f"sqlite+aiosqlite:///{tmp_path / 'fresh.db'}"
    assert report == _run(fresh_db, checkpoints, datasets, FakeFinetune())


def test_changing_repeats_starts_a_new_matrix(tmp_path, isolated_db):
    checkpoints = _checkpoints(tmp_path, steps=(0, 500))
    _run(isolated_db, checkpoints, [_dataset("CC")], FakeFinetune(), repeats=2)
    fresh = FakeFinetune()
    _run(isolated_db, checkpoints, [_dataset("CC")], fresh, repeats=3)
    assert len(fresh.calls) == 6


def test_missing_step_zero(tmp_path, isolated_db):
    with pytest.raises(DataError, match="step-0"):
        _run(isolated_db, _checkpoints(tmp_path, steps=(500, 1000)), [_dataset("CC")], FakeFinetune())


def test_single_repeat_has_no_sem(tmp_path, isolated_db):
    report = _run(isolated_db, _checkpoints(tmp_path, steps=(0, 500)), [_dataset("CC")], FakeFinetune(), repeats=1)
    assert all(c.sem is None for c in report.cells)


# ── build_report ─────────────────────────────────────────────────────────────


def _published_report(repeats: int = 10):
    f1s = {}
    for name, (base, model) in PUBLISHED_F1.items():
        f1s[(0, name)] = [base] * repeats
        f1s[(2500, name)] = [model] * repeats
    return build_report(f1s, repeats=repeats, base_seed=0)


def test_published_improvements_are_reproduced():
    report = _published_report()
    for name, expected in PUBLISHED_DELTA.items():
        assert abs(report.cell(2500, name).delta_mp - expected) <= 0.5
        assert report.cell(0, name).delta_mp == 0.0
        assert report.cell(2500, name).sem == 0.0

    baseline, pretrained = report.summary()
    assert baseline.mean_f1 == pytest.approx(0.802, abs=5e-4)
    assert pretrained.mean_f1 == pytest.approx(0.833, abs=5e-4)
    assert pretrained.dataset_count == 5
    assert abs(pretrained.mean_delta_mp - PUBLISHED_AVERAGE_DELTA) <= 0.5


def test_build_report_needs_a_baseline_per_dataset():
    with pytest.raises(DataError, match="no step-0 baseline"):
        build_report({(0, "CC"): [0.5, 0.6], (500, "SE"): [0.7, 0.8]}, repeats=2, base_seed=0)


def test_perfect_baseline_leaves_delta_undefined():
    report = build_report({(0, "CC"): [1.0, 1.0], (500, "CC"): [0.9, 1.0]}, repeats=2, base_seed=0)
    assert report.cell(500, "CC").delta_mp is None


# ── emit_report ──────────────────────────────────────────────────────────────


def test_emitted_files_reparse_to_the_report(tmp_path):
    report = _published_report(repeats=3)
    paths = emit_report(report, tmp_path / "report")

    assert load_report(paths["json"]) == report
    assert json.loads(paths["json"].read_text())["schema_version"] == 1

    cells = pd.read_csv(paths["csv"])
    assert list(cells.columns) == ["checkpoint_step", "dataset", "repeat_count", "mean_f1", "sem", "delta_mp_pct"]
    assert len(cells) == 10
    for row in cells.itertuples(index=False):
        cell = report.cell(int(row.checkpoint_step), row.dataset)
        assert row.mean_f1 == pytest.approx(cell.mean_f1, abs=1e-12)
        assert row.delta_mp_pct == pytest.approx(cell.delta_mp, abs=1e-9)
        assert row.repeat_count == 3

    plot = pd.read_csv(paths["plot"])
    baseline = plot[plot["checkpoint_step"] == 0]
    assert (baseline["delta_mp_pct"] == 0).all()
    assert (baseline["sem"] >= 0).all()

    summary = pd.read_csv(paths["summary"])
    assert list(summary["checkpoint_step"]) == [0, 2500]
    assert not list((tmp_path / "report").glob(".*.tmp"))


def test_unwritable_report_directory(tmp_path):
    blocker = tmp_path / "file.txt"
    blocker.write_text("x")
    with pytest.raises(DataError, match="not writable"):
        emit_report(_published_report(repeats=2), blocker / "report")


def test_missing_report_file(tmp_path):
    with pytest.raises(DataError, match="not found"):
        load_report(tmp_path / "report.json")
