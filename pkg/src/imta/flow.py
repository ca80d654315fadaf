"""Events, flows and the tab-separated flow file format.

A flow file starts with two header lines::

    # imta-flow/1
    # principal=channel direction=down

followed by one ``time_s<TAB>size_bytes<TAB>type_code`` record per event.
``type_code`` is the integer message type (0..4) or ``-`` when unknown.
The ``.obf`` variant adds a fourth ``dummy`` column (0 or 1) and uses the
``imta-flow-obf/1`` version line.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import MessageType

FLOW_FORMAT = "imta-flow/1"
OBF_FLOW_FORMAT = "imta-flow-obf/1"


class PrincipalKind(str, enum.Enum):
    CHANNEL = "channel"
    USER = "user"


class Direction(str, enum.Enum):
    UP = "up"
    DOWN = "down"


class FlowFormatError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = self.path or "<flow>"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True, slots=True)
class Event:
    """One message, or a batch of messages merged into one burst."""

    time: float
    size: int
    type: MessageType | None = None
    dummy: bool = False
    # bytes of ``size`` that are padding, not message content
    padding: int = 0

    def __post_init__(self):
        if not math.isfinite(self.time):
            raise ValueError(f"event time must be finite, got {self.time!r}")
        if self.size <= 0:
            raise ValueError(f"event size must be positive, got {self.size!r}")


@dataclass(frozen=True)
class Flow:
    events: tuple[Event, ...] = ()
    principal: PrincipalKind = PrincipalKind.CHANNEL
    direction: Direction = Direction.DOWN

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.fromiter((e.time for e in self.events), dtype=float, count=len(self.events))

    @property
    def sizes(self) -> np.ndarray:
        return np.fromiter((e.size for e in self.events), dtype=np.int64, count=len(self.events))

    @property
    def total_bytes(self) -> int:
        return sum(e.size for e in self.events)

    @property
    def span(self) -> float:
        if not self.events:
            return 0.0
        return self.events[-1].time - self.events[0].time

    def with_events(self, events: Iterable[Event]) -> "Flow":
        return replace(self, events=tuple(events))

    def shifted(self, offset: float) -> "Flow":
        return self.with_events(replace(e, time=e.time + offset) for e in self.events)

    def real_events(self) -> "Flow":
        """The flow with dummy events removed."""
        return self.with_events(e for e in self.events if not e.dummy)

    def is_sorted(self, strict: bool = False) -> bool:
        t = self.times
        d = np.diff(t)
        return bool(np.all(d > 0) if strict else np.all(d >= 0))


def sort_events(events: Sequence[Event]) -> list[Event]:
    return sorted(events, key=lambda e: e.time)


def merge_close(events: Sequence[Event], threshold: float) -> list[Event]:
    """Collapse runs of events whose gaps are below ``threshold``.

    A merged event takes the time of its last member and the summed size;
    its type is that of the largest member.
    """
    out: list[Event] = []
    batch: list[Event] = []
    for e in events:
        if batch and e.time - batch[-1].time >= threshold:
            out.append(_collapse(batch))
            batch = []
        batch.append(e)
    if batch:
        out.append(_collapse(batch))
    return out


def _collapse(batch: list[Event], time: float | None = None) -> Event:
    if len(batch) == 1 and time is None:
        return batch[0]
    largest = max(batch, key=lambda e: e.size)
    return Event(
        time=batch[-1].time if time is None else time,
        size=sum(e.size for e in batch),
        type=largest.type,
        dummy=all(e.dummy for e in batch),
        padding=sum(e.padding for e in batch),
    )


# -- file IO ----------------------------------------------------------------

def _type_code(t: MessageType | None) -> str:
    return "-" if t is None else str(int(t))


def format_flow(flow: Flow, obfuscated: bool = False) -> str:
    lines = [
        f"# {OBF_FLOW_FORMAT if obfuscated else FLOW_FORMAT}",
        f"# principal={flow.principal.value} direction={flow.direction.value}",
    ]
    for e in flow.events:
        rec = f"{e.time!r}\t{e.size}\t{_type_code(e.type)}"
        if obfuscated:
            rec += f"\t{int(e.dummy)}"
        lines.append(rec)
    return "\n".join(lines) + "\n"


def write_flow(flow: Flow, path: str | Path, obfuscated: bool | None = None) -> None:
    path = Path(path)
    if obfuscated is None:
        obfuscated = path.suffix == ".obf"
    path.write_text(format_flow(flow, obfuscated))


def parse_flow(text: str, path=None) -> Flow:
    lines = text.splitlines()
    if len(lines) < 2:
        raise FlowFormatError("missing two-line header", path, 1)
    version = lines[0].lstrip("#").strip()
    if version not in (FLOW_FORMAT, OBF_FLOW_FORMAT):
        raise FlowFormatError(f"unknown flow format {version!r}", path, 1)
    obfuscated = version == OBF_FLOW_FORMAT
    meta = dict(kv.split("=", 1) for kv in lines[1].lstrip("#").split() if "=" in kv)
    try:
        principal = PrincipalKind(meta.get("principal", "channel"))
        direction = Direction(meta.get("direction", "down"))
    except ValueError as exc:
        raise FlowFormatError(str(exc), path, 2) from None

    ncols = 4 if obfuscated else 3
    events: list[Event] = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != ncols:
            raise FlowFormatError(f"expected {ncols} tab-separated columns, got {len(cols)}", path, lineno)
        try:
            t = float(cols[0])
            size = int(cols[1])
            mtype = None if cols[2] == "-" else MessageType(int(cols[2]))
            dummy = bool(int(cols[3])) if obfuscated else False
            ev = Event(t, size, mtype, dummy)
        except ValueError as exc:
            raise FlowFormatError(str(exc), path, lineno) from None
        if events and t < events[-1].time:
            raise FlowFormatError("event times must be non-decreasing", path, lineno)
        events.append(ev)
    return Flow(tuple(events), principal, direction)


def read_flow(path: str | Path) -> Flow:
    path = Path(path)
    return parse_flow(path.read_text(), path)
