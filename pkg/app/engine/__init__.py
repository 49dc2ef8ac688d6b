"""Event log, pipeline stages and result rows shared by the run engine, grid and report"""
import json
import logging
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
from pydantic import BaseModel, field_validator

from app.events import Event, EventType, StageEvent, event_from_dict

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2


class Stage(Enum):
    """Pipeline stages with their process exit codes"""
    DATASET = ("dataset", 10)
    PRETRAIN = ("pretrain", 11)
    CLUSTER = ("cluster", 12)
    EXPERTS = ("experts", 13)
    DISTILL = ("distill", 14)
    LINEVAL = ("lineval", 15)
    REPORT = ("report", 16)

    def __init__(self, tag: str, exit_code: int):
        self.tag = tag
        self.exit_code = exit_code


class EventLog:
    """Append-only run event log

    Every event is appended to `path` as one JSON line (when a path is set)
    and kept in memory; opening an existing file replays its history, so a
    resumed run sees the stages completed by earlier invocations.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.events: List[Event] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.events.extend(read_events(self.path))

    def put(self, event: Event) -> None:
        self.events.append(event)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")
        logger.debug(f"Event logged: {event.event_type.value} {getattr(event, 'stage', '')}")

    def executed_epochs(self) -> int:
        return executed_epochs(self.events)


def read_events(path: Union[str, Path]) -> List[Event]:
    path = Path(path)
    if not path.exists():
        return []
    events = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        try:
            event = event_from_dict(json.loads(line))
        except (json.JSONDecodeError, TypeError) as e:
            logger.warning(f"⚠️ Skipping unreadable event line in {path.name}: {e}")
            continue
        if event is not None:
            events.append(event)
    return events


def executed_epochs(events: List[Event]) -> int:
    """Pre-training epochs executed, summed over stages

    A stage that completed more than once in the history (rerun after its
    artifacts were removed) counts with its latest completion.
    """
    latest: Dict[str, int] = {}
    for event in events:
        if event.event_type == EventType.STAGE_COMPLETED and isinstance(event, StageEvent):
            latest[event.stage] = event.epochs
    return sum(latest.values())


class ResultRow(BaseModel):
    """One accuracy-table row"""
    subset: str
    n: int
    method: str
    accuracy: float
    seed: int
    run: str = ""
    epochs: int = 0
    started_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None

    @field_validator("accuracy")
    @classmethod
    def _percent(cls, v):
        if not 0.0 <= v <= 100.0:
            raise ValueError("accuracy must lie in [0, 100]")
        return v


RESULT_COLUMNS = list(ResultRow.model_fields)


def write_results(rows: List[ResultRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([r.model_dump(mode="json") for r in rows], columns=RESULT_COLUMNS)
    frame.to_csv(path, index=False)
    return path


def read_results(path: Union[str, Path]) -> List[ResultRow]:
    frame = pd.read_csv(path, dtype={"subset": str, "method": str, "run": str})
    frame = frame.astype(object).where(frame.notna(), None)
    return [
        ResultRow.model_validate({k: v for k, v in record.items() if v is not None})
        for record in frame.to_dict(orient="records")
    ]


def results_table(rows: List[ResultRow]) -> pd.DataFrame:
    """Mean accuracy keyed (subset, N) × method, one column per method"""
    if not rows:
        return pd.DataFrame()
    frame = pd.DataFrame([r.model_dump() for r in rows])
    return frame.pivot_table(index=["subset", "n"], columns="method", values="accuracy", aggfunc="mean")
