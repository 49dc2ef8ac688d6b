"""Run lifecycle events, persisted one JSON object per line"""
from enum import Enum
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Optional


class EventType(Enum):
    """Event types in a pipeline run"""
    RUN_STARTED = "RUN_STARTED"
    STAGE_STARTED = "STAGE_STARTED"
    STAGE_COMPLETED = "STAGE_COMPLETED"
    STAGE_SKIPPED = "STAGE_SKIPPED"
    STAGE_FAILED = "STAGE_FAILED"
    RUN_COMPLETED = "RUN_COMPLETED"


def _now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class Event:
    """Base event class - all events inherit from this"""
    event_type: EventType
    timestamp: datetime = field(default_factory=_now)
    run: str = ""

    def to_dict(self) -> Dict[str, Any]:
        """Convert event to dict"""
        return {
            "event_type": self.event_type.value,
            "timestamp": self.timestamp.isoformat(),
            "run": self.run,
        }


@dataclass
class RunStartedEvent(Event):
    method: str = ""
    seed: int = 0
    budget: int = 0
    event_type: EventType = field(default=EventType.RUN_STARTED, init=False)

    def to_dict(self) -> Dict[str, Any]:
        return {**super().to_dict(), "method": self.method, "seed": self.seed, "budget": self.budget}


@dataclass
class StageEvent(Event):
    """Stage boundary; `epochs` counts pre-training epochs the stage executed"""
    stage: str = ""
    epochs: int = 0
    detail: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {**super().to_dict(), "stage": self.stage, "epochs": self.epochs, "detail": self.detail}


@dataclass
class StageStartedEvent(StageEvent):
    event_type: EventType = field(default=EventType.STAGE_STARTED, init=False)


@dataclass
class StageCompletedEvent(StageEvent):
    event_type: EventType = field(default=EventType.STAGE_COMPLETED, init=False)


@dataclass
class StageSkippedEvent(StageEvent):
    """Stage artifacts already existed"""
    event_type: EventType = field(default=EventType.STAGE_SKIPPED, init=False)


@dataclass
class StageFailedEvent(StageEvent):
    error: str = ""
    exit_code: int = 1
    event_type: EventType = field(default=EventType.STAGE_FAILED, init=False)

    def to_dict(self) -> Dict[str, Any]:
        return {**super().to_dict(), "error": self.error, "exit_code": self.exit_code}


@dataclass
class RunCompletedEvent(Event):
    accuracy: float = 0.0
    epochs: int = 0
    event_type: EventType = field(default=EventType.RUN_COMPLETED, init=False)

    def to_dict(self) -> Dict[str, Any]:
        return {**super().to_dict(), "accuracy": self.accuracy, "epochs": self.epochs}


_CLASSES = {
    EventType.RUN_STARTED: RunStartedEvent,
    EventType.STAGE_STARTED: StageStartedEvent,
    EventType.STAGE_COMPLETED: StageCompletedEvent,
    EventType.STAGE_SKIPPED: StageSkippedEvent,
    EventType.STAGE_FAILED: StageFailedEvent,
    EventType.RUN_COMPLETED: RunCompletedEvent,
}


def event_from_dict(data: Dict[str, Any]) -> Optional[Event]:
    """Inverse of to_dict; None for unknown event types"""
    try:
        event_type = EventType(data["event_type"])
    except (KeyError, ValueError):
        return None
    fields = {k: v for k, v in data.items() if k != "event_type"}
    if "timestamp" in fields:
        fields["timestamp"] = datetime.fromisoformat(fields["timestamp"])
    return _CLASSES[event_type](**fields)
