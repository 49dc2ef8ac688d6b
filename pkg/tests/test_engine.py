"""Test suite for the run engine, event log and experiment grid"""
import asyncio

import pandas as pd
import pytest

import app.trainer as trainer
from app.config import build_run_config
from app.engine import (
    EventLog,
    ResultRow,
    Stage,
    executed_epochs,
    read_events,
    read_results,
    results_table,
    write_results,
)
from app.engine.core import PipelineEngine, exit_code_for, resolve_output_dir
from app.engine.grid import check_unique, run_grid
from app.errors import (
    BudgetMismatchError,
    DuplicateRunError,
    InvalidConfigError,
    RunLockedError,
    StageError,
)
from app.events import EventType, RunStartedEvent, StageCompletedEvent, StageFailedEvent
from app.models.checkpoint import load_checkpoint
from app.utils import parameter_hash
from tests.conftest import tiny_run_data


def _config(**changes):
    return build_run_config(tiny_run_data(**changes))


def test_event_log_persists_and_replays(tmp_path):
    """Test event log"""
    log = EventLog(tmp_path / "events.jsonl")
    log.put(RunStartedEvent(run="r", method="simsiam", seed=1, budget=3))
    log.put(StageCompletedEvent(run="r", stage="pretrain", epochs=3, detail={"final_loss": -0.5}))

    assert len(log.events) == 2
    assert log.executed_epochs() == 3
    events = read_events(tmp_path / "events.jsonl")
    assert [e.event_type for e in events] == [EventType.RUN_STARTED, EventType.STAGE_COMPLETED]
    assert events[1].detail == {"final_loss": -0.5}
    # reopening the log replays its history
    reopened = EventLog(tmp_path / "events.jsonl")
    assert len(reopened.events) == 2
    assert reopened.executed_epochs() == 3


def test_executed_epochs_counts_latest_completion_per_stage():
    events = [
        StageCompletedEvent(run="r", stage="pretrain", epochs=1),
        StageFailedEvent(run="r", stage="experts", error="x", exit_code=13),
        StageCompletedEvent(run="r", stage="experts", epochs=1),
        # pretrain rerun after its checkpoint was removed
        StageCompletedEvent(run="r", stage="pretrain", epochs=1),
        StageCompletedEvent(run="r", stage="distill", epochs=1),
        StageCompletedEvent(run="r", stage="lineval", epochs=0),
    ]
    assert executed_epochs(events) == 3
    assert executed_epochs([]) == 0


def test_in_memory_event_log():
    log = EventLog()
    log.put(StageFailedEvent(run="r", stage="cluster", error="x", exit_code=12))
    assert log.events[0].exit_code == 12
    assert log.executed_epochs() == 0


def test_read_events_skips_garbage(tmp_path):
    path = tmp_path / "events.jsonl"
    path.write_text('{"event_type": "RUN_STARTED", "run": "a"}\nnot json\n{"event_type": "UNKNOWN"}\n')
    assert len(read_events(path)) == 1


def test_results_round_trip_and_table(tmp_path):
    rows = [
        ResultRow(subset="Imbalanced (p=10)", n=20431, method="simsiam", accuracy=80.0, seed=0),
        ResultRow(subset="Imbalanced (p=10)", n=20431, method="simsiam", accuracy=82.0, seed=1),
        ResultRow(subset="Imbalanced (p=10)", n=20431, method="simsiam+c+d", accuracy=83.0, seed=0),
    ]
    path = write_results(rows, tmp_path / "results.csv")
    assert read_results(path) == rows
    table = results_table(rows)
    assert table.loc[("Imbalanced (p=10)", 20431), "simsiam"] == pytest.approx(81.0)
    assert table.loc[("Imbalanced (p=10)", 20431), "simsiam+c+d"] == pytest.approx(83.0)
    with pytest.raises(ValueError):
        ResultRow(subset="x", n=1, method="simsiam", accuracy=101.0, seed=0)


def test_plans():
    assert PipelineEngine(_config(method="simsiam")).plan() == [Stage.DATASET, Stage.PRETRAIN, Stage.LINEVAL]
    assert Stage.CLUSTER in PipelineEngine(_config()).plan()
    plus_d = PipelineEngine(_config(method="simsiam+d"))
    assert Stage.CLUSTER not in plus_d.plan() and Stage.EXPERTS in plus_d.plan()
    no_expert = PipelineEngine(_config(method="simsiam+d", distill={"use_experts": False}))
    assert Stage.EXPERTS not in no_expert.plan()
    assert no_expert.stage_epochs() == {Stage.PRETRAIN: 1, Stage.DISTILL: 2}


def test_output_dir_resolution(artifact_root, tmp_path):
    assert resolve_output_dir("runs/a") == artifact_root / "runs/a"
    assert resolve_output_dir(str(tmp_path / "abs")) == tmp_path / "abs"


def test_pipeline_run_end_to_end(artifact_root):
    """Staged pipeline writes every artifact and spends exactly the budget"""
    cfg = _config()
    rows = PipelineEngine(cfg).run()
    root = artifact_root / "runs/tiny"

    assert len(rows) == 1
    row = rows[0]
    assert row.method == "simsiam+c+d"
    assert row.subset == "Imbalanced (p=4)"
    assert row.n == sum([12, 7, 4, 3])
    assert row.epochs == cfg.budget
    assert 0.0 <= row.accuracy <= 100.0

    for name in ("config.lock", "results.csv", "distribution.csv", "subset.csv",
                 "cluster/assignments.csv", "cluster/pca.csv", "cluster/inertia.csv",
                 "checkpoints/base.ckpt", "checkpoints/expert_0.ckpt", "checkpoints/expert_1.ckpt",
                 "checkpoints/student.ckpt", "logs/events.jsonl", "logs/run.log",
                 "logs/pretrain.csv", "logs/distill.csv", "logs/lineval.csv"):
        assert (root / name).exists(), name
    assert not (root / ".lock").exists()
    assert executed_epochs(read_events(root / "logs/events.jsonl")) == cfg.budget
    assert load_checkpoint(root / "checkpoints/student.ckpt").num_experts == 2


def test_rerun_returns_existing_results(artifact_root):
    cfg = _config(method="simsiam")
    first = PipelineEngine(cfg).run()
    second = PipelineEngine(cfg).run()
    assert first == second


def test_resume_skips_finished_stages(artifact_root):
    cfg = _config()
    PipelineEngine(cfg).run(stop_after=Stage.CLUSTER)
    root = artifact_root / "runs/tiny"
    assert (root / "cluster/assignments.csv").exists()
    assert not (root / "results.csv").exists()
    base_hash = parameter_hash(load_checkpoint(root / "checkpoints/base.ckpt"))

    PipelineEngine(cfg).run()
    events = read_events(root / "logs/events.jsonl")
    skipped = {e.stage for e in events if e.event_type == EventType.STAGE_SKIPPED}
    assert {"pretrain", "cluster"} <= skipped
    assert parameter_hash(load_checkpoint(root / "checkpoints/base.ckpt")) == base_hash
    assert (root / "results.csv").exists()


def test_determinism(artifact_root):
    """Same config and seed: same subset, clusters and final parameters"""
    a = _config(output_dir="runs/a")
    b = _config(output_dir="runs/b")
    PipelineEngine(a).run()
    PipelineEngine(b).run()
    ra, rb = artifact_root / "runs/a", artifact_root / "runs/b"
    for name in ("subset.csv", "cluster/assignments.csv"):
        pd.testing.assert_frame_equal(pd.read_csv(ra / name), pd.read_csv(rb / name))
    assert parameter_hash(load_checkpoint(ra / "checkpoints/student.ckpt")) == \
        parameter_hash(load_checkpoint(rb / "checkpoints/student.ckpt"))


def test_no_expert_budget(artifact_root):
    cfg = _config(method="simsiam+d", distill={"use_experts": False})
    row = PipelineEngine(cfg).run()[0]
    assert row.epochs == cfg.budget
    assert not (artifact_root / "runs/tiny/checkpoints/expert_0.ckpt").exists()


def test_config_lock_rejects_changed_config(artifact_root):
    PipelineEngine(_config(method="simsiam")).run(stop_after=Stage.DATASET)
    with pytest.raises(InvalidConfigError):
        PipelineEngine(_config(method="simsiam", seed=5)).run()


def test_locked_run_dir(artifact_root):
    root = artifact_root / "runs/tiny"
    root.mkdir(parents=True)
    (root / ".lock").write_text("123")
    with pytest.raises(RunLockedError):
        PipelineEngine(_config()).run()


def test_stop_after_outside_plan():
    with pytest.raises(InvalidConfigError):
        PipelineEngine(_config(method="simsiam")).run(stop_after=Stage.CLUSTER)


def test_stage_failure_carries_exit_code(artifact_root):
    cfg = _config(dataset={"source": str(artifact_root / "nowhere"), "num_classes": 4, "image_size": 8})
    with pytest.raises(StageError) as excinfo:
        PipelineEngine(cfg).run()
    assert excinfo.value.stage == "dataset"
    assert exit_code_for(excinfo.value) == 10
    events = read_events(artifact_root / "runs/tiny/logs/events.jsonl")
    assert events[-1].event_type == EventType.STAGE_FAILED


def test_exit_codes():
    assert exit_code_for(BudgetMismatchError("x")) == 2
    assert exit_code_for(RuntimeError("x")) == 1
    assert [s.exit_code for s in Stage] == [10, 11, 12, 13, 14, 15, 16]


def test_grid_rejects_duplicates():
    cfg = _config(method="simsiam")
    with pytest.raises(DuplicateRunError):
        check_unique([cfg, cfg.model_copy(update={"output_dir": "runs/other"})])
    with pytest.raises(DuplicateRunError):
        check_unique([cfg, cfg.model_copy(update={"seed": 1})])


@pytest.mark.asyncio
async def test_run_grid(artifact_root):
    """Test grid execution with bounded concurrency"""
    configs = [
        _config(method="simsiam", output_dir="grid/a", name="a"),
        _config(method="simclr", output_dir="grid/b", name="b"),
    ]
    result = await run_grid(configs, max_parallel=2, output_dir="grid")
    assert not result.failures
    assert sorted(r.method for r in result.rows) == ["simclr", "simsiam"]
    assert set(result.table.columns) == {"simclr", "simsiam"}
    assert len(read_results(artifact_root / "grid/results.csv")) == 2


@pytest.mark.asyncio
async def test_run_grid_continues_after_failure(artifact_root):
    bad = _config(
        method="simsiam", output_dir="grid/bad", name="bad",
        dataset={"source": str(artifact_root / "nowhere"), "num_classes": 4, "image_size": 8},
    )
    good = _config(method="simsiam", output_dir="grid/good", name="good", seed=1)
    result = await run_grid([bad, good], max_parallel=1)
    assert list(result.failures) == ["bad"]
    assert [r.run for r in result.rows] == ["good"]


def test_budget_check_reads_event_history(artifact_root):
    """A stale completion left in events.jsonl breaks the epoch budget"""
    root = artifact_root / "runs/tiny"
    EventLog(root / "logs/events.jsonl").put(StageCompletedEvent(run="tiny", stage="distill", epochs=1))
    with pytest.raises(BudgetMismatchError):
        PipelineEngine(_config(method="simsiam")).run()


@pytest.mark.asyncio
async def test_parallel_grid_matches_sequential(artifact_root):
    """Concurrent runs produce the same parameters and accuracies as one-at-a-time runs"""
    def configs(prefix):
        return [
            _config(method="simsiam", output_dir=f"{prefix}/a", name=f"{prefix}-a"),
            _config(method="simsiam+d", output_dir=f"{prefix}/b", name=f"{prefix}-b", seed=1),
        ]

    parallel = await run_grid(configs("par"), max_parallel=2)
    sequential = await run_grid(configs("seq"), max_parallel=1)
    assert not parallel.failures and not sequential.failures

    for run, ckpt in (("a", "base"), ("b", "base"), ("b", "student")):
        path = f"{run}/checkpoints/{ckpt}.ckpt"
        assert parameter_hash(load_checkpoint(artifact_root / "par" / path)) == \
            parameter_hash(load_checkpoint(artifact_root / "seq" / path)), path
    accuracies = [{r.run.split("-")[1]: r.accuracy for r in grid.rows} for grid in (parallel, sequential)]
    assert accuracies[0] == accuracies[1]


def test_interrupted_pretrain_resumes_from_snapshot(artifact_root, monkeypatch):
    PipelineEngine(_config(method="simsiam", output_dir="runs/ref")).run(stop_after=Stage.PRETRAIN)
    real_append = trainer.append_log

    def crash_on_last_epoch(path, row):
        if row["epoch"] == 2:
            raise RuntimeError("interrupted")
        real_append(path, row)

    cfg = _config(method="simsiam")
    monkeypatch.setattr(trainer, "append_log", crash_on_last_epoch)
    with pytest.raises(StageError):
        PipelineEngine(cfg).run()
    monkeypatch.setattr(trainer, "append_log", real_append)

    root = artifact_root / "runs/tiny"
    assert (root / "checkpoints/base.partial.ckpt").exists()
    PipelineEngine(cfg).run()
    assert parameter_hash(load_checkpoint(root / "checkpoints/base.ckpt")) == \
        parameter_hash(load_checkpoint(artifact_root / "runs/ref/checkpoints/base.ckpt"))
    assert pd.read_csv(root / "logs/pretrain.csv")["epoch"].tolist() == [0, 1, 2]
    assert not (root / "checkpoints/base.partial.ckpt").exists()
    completed = [e for e in read_events(root / "logs/events.jsonl")
                 if e.event_type == EventType.STAGE_COMPLETED and e.stage == "pretrain"]
    assert completed[-1].detail["resumed_from"] == 2
