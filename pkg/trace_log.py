"""
Episode trace recording.

Each episode owns a ``TraceRecorder``; events are appended in the order the
engine performs them, so two replays with the same seed and the oracle
backend produce identical JSONL files.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from tabulate import tabulate

logger = logging.getLogger(__name__)

EVENT_KINDS = ("created", "classified", "expanded", "labeled", "rewarded", "terminated", "requested")


@dataclass
class TraceEvent:
    """One engine event; ``node`` is None for episode-level events."""
    episode: int
    step: int
    event: str
    node: Optional[str]
    payload: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class TraceRecorder:
    """Ordered event list for one episode."""

    def __init__(self, episode: int = 0):
        self.episode = episode
        self.events: List[TraceEvent] = []

    def add_event(self, step: int, event: str, node: Optional[str] = None, **payload) -> TraceEvent:
        if event not in EVENT_KINDS:
            raise ValueError(f"Unknown trace event kind: {event!r}")
        record = TraceEvent(self.episode, step, event, node, payload)
        self.events.append(record)
        return record

    def get_events(self, event: Optional[str] = None, node: Optional[str] = None) -> List[TraceEvent]:
        return [
            e for e in self.events
            if (event is None or e.event == event) and (node is None or e.node == node)
        ]

    def count(self, event: str) -> int:
        return len(self.get_events(event))

    def export_jsonl(self, output_file, append: bool = False) -> Path:
        path = Path(output_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            with open(path, "a" if append else "w", encoding="utf-8") as f:
                for e in self.events:
                    f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
        except OSError as e:
            logger.error(f"Error exporting trace: {e}")
            raise
        logger.info(f"Trace with {len(self.events)} events exported to {path}")
        return path


def read_trace(path) -> List[TraceEvent]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Trace file not found: {path}")
    events = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                events.append(TraceEvent(**json.loads(line)))
            except (TypeError, ValueError) as e:
                raise ValueError(f"{path}:{line_number}: malformed trace record: {e}") from e
    return events


def _summarize(payload: Dict[str, Any], width: int = 70) -> str:
    text = ", ".join(f"{k}={v}" for k, v in sorted(payload.items()))
    return text if len(text) <= width else text[:width - 3] + "..."


def format_trace(events: List[TraceEvent], include_requests: bool = False) -> str:
    rows = [
        [e.episode, e.step, e.event, e.node or "", _summarize(e.payload)]
        for e in events
        if include_requests or e.event != "requested"
    ]
    return tabulate(rows, headers=["episode", "step", "event", "node", "payload"], tablefmt="simple")


class StepContext:
    """Context manager around one reasoning step.

    A failure inside the step is written to the trace as a ``terminated``
    event carrying the error before the exception propagates.
    """

    def __init__(self, recorder: TraceRecorder, step: int):
        self.recorder = recorder
        self.step = step

    def __enter__(self) -> TraceRecorder:
        logger.debug(f"Episode {self.recorder.episode}: entering step {self.step}")
        return self.recorder

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is not None:
            self.recorder.add_event(
                self.step, "terminated", None,
                outcome="Error", error_type=exc_type.__name__, error_message=str(exc_val),
            )
            logger.error(f"Episode {self.recorder.episode} failed at step {self.step}: {exc_val}")
        return False
