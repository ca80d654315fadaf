"""Packet traces: pcap and line-format readers, rendering and burst extraction.

A line trace has one ``time_s<TAB>size_bytes<TAB>U|D`` record per packet;
lines starting with ``#`` are comments.
"""

from __future__ import annotations

import ipaddress
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .flow import Direction, Event, Flow, PrincipalKind

LINE_TRACE_FORMAT = "imta-trace/1"

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_LINUX_SLL = 113
LINKTYPE_IPV4 = 228
LINKTYPE_IPV6 = 229
SUPPORTED_LINKTYPES = (LINKTYPE_ETHERNET, LINKTYPE_RAW, LINKTYPE_LINUX_SLL, LINKTYPE_IPV4, LINKTYPE_IPV6)

# magic as read little-endian -> (struct byte order, ticks per second)
_MAGICS = {
    0xA1B2C3D4: ("<", 1_000_000),
    0xD4C3B2A1: (">", 1_000_000),
    0xA1B23C4D: ("<", 1_000_000_000),
    0x4D3CB2A1: (">", 1_000_000_000),
}


class TraceFormatError(ValueError):
    def __init__(self, message: str, path=None, offset: int | None = None, line: int | None = None):
        self.path = str(path) if path is not None else None
        self.offset = offset
        self.line = line
        where = self.path or "<trace>"
        if offset is not None:
            where += f" @byte {offset}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True, slots=True)
class PacketRecord:
    timestamp: float
    size: int
    direction: Direction = Direction.DOWN


class PacketTrace:
    """Packets in timestamp order, stored column-wise."""

    def __init__(self, timestamps=(), sizes=(), up=None, link_type: int | None = None,
                 endpoint: str | None = None):
        self.timestamps = np.asarray(timestamps, dtype=float).reshape(-1)
        self.sizes = np.asarray(sizes, dtype=np.int64).reshape(-1)
        if up is None:
            up = np.zeros(self.timestamps.size, dtype=bool)
        self.up = np.asarray(up, dtype=bool).reshape(-1)
        if not (self.timestamps.size == self.sizes.size == self.up.size):
            raise ValueError("timestamps, sizes and directions must have equal length")
        if self.sizes.size and self.sizes.min() < 0:
            raise ValueError("packet sizes must be non-negative")
        if self.timestamps.size > 1 and np.any(np.diff(self.timestamps) < 0):
            raise ValueError("packet timestamps must be non-decreasing")
        self.link_type = link_type
        self.endpoint = endpoint

    @classmethod
    def from_records(cls, records: Iterable[PacketRecord], **meta) -> "PacketTrace":
        recs = list(records)
        return cls([r.timestamp for r in recs], [r.size for r in recs],
                   [r.direction == Direction.UP for r in recs], **meta)

    def __len__(self) -> int:
        return int(self.timestamps.size)

    def __getitem__(self, i: int) -> PacketRecord:
        return PacketRecord(float(self.timestamps[i]), int(self.sizes[i]),
                            Direction.UP if self.up[i] else Direction.DOWN)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def records(self) -> list[PacketRecord]:
        return list(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PacketTrace):
            return NotImplemented
        return (np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.sizes, other.sizes)
                and np.array_equal(self.up, other.up))


# -- pcap ---------------------------------------------------------------------

def _ip_packet(link_type: int, frame: bytes) -> bytes | None:
    """The IP header onwards, or None for non-IP frames."""
    if link_type == LINKTYPE_ETHERNET:
        off = 12
        ethertype = int.from_bytes(frame[off:off + 2], "big") if len(frame) >= 14 else None
        while ethertype in (0x8100, 0x88A8) and len(frame) >= off + 6:
            off += 4
            ethertype = int.from_bytes(frame[off:off + 2], "big")
        if ethertype not in (0x0800, 0x86DD):
            return None
        return frame[off + 2:]
    if link_type == LINKTYPE_LINUX_SLL:
        if len(frame) < 16 or int.from_bytes(frame[14:16], "big") not in (0x0800, 0x86DD):
            return None
        return frame[16:]
    return frame


def _ip_fields(ip: bytes):
    """(ip-layer length, source, destination) or None if the header is short."""
    if not ip:
        return None
    version = ip[0] >> 4
    if version == 4 and len(ip) >= 20:
        return int.from_bytes(ip[2:4], "big"), ipaddress.IPv4Address(ip[12:16]), ipaddress.IPv4Address(ip[16:20])
    if version == 6 and len(ip) >= 40:
        return 40 + int.from_bytes(ip[4:6], "big"), ipaddress.IPv6Address(ip[8:24]), ipaddress.IPv6Address(ip[24:40])
    return None


def read_pcap(path: str | Path, endpoint: str | None = None) -> PacketTrace:
    """Read a classic pcap file.

    With an ``endpoint`` address only packets to or from it are kept, and
    packets it sent are marked upstream. Without one every IP packet is kept
    as downstream. Sizes are IP-layer lengths taken from the IP header, so
    snaplen truncation does not shrink them.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 24:
        raise TraceFormatError("file shorter than the 24-byte pcap header", path, 0)
    magic = struct.unpack("<I", data[:4])[0]
    if magic not in _MAGICS:
        raise TraceFormatError(f"bad pcap magic 0x{magic:08x}", path, 0)
    order, ticks = _MAGICS[magic]
    link_type = struct.unpack(order + "I", data[20:24])[0] & 0x0FFFFFFF
    if link_type not in SUPPORTED_LINKTYPES:
        raise TraceFormatError(f"unsupported link type {link_type}", path, 20)
    ep = ipaddress.ip_address(endpoint) if endpoint is not None else None

    rec_hdr = struct.Struct(order + "IIII")
    ts_list: list[float] = []
    size_list: list[int] = []
    up_list: list[bool] = []
    off = 24
    while off < len(data):
        if off + 16 > len(data):
            raise TraceFormatError("truncated record header", path, off)
        sec, frac, incl, _orig = rec_hdr.unpack_from(data, off)
        if off + 16 + incl > len(data):
            raise TraceFormatError(f"truncated record body ({incl} bytes declared)", path, off)
        frame = data[off + 16:off + 16 + incl]
        rec_off = off
        off += 16 + incl
        ip = _ip_packet(link_type, frame)
        fields = _ip_fields(ip) if ip is not None else None
        if fields is None:
            continue
        length, src, dst = fields
        if ep is not None:
            if src == ep:
                is_up = True
            elif dst == ep:
                is_up = False
            else:
                continue
        else:
            is_up = False
        t = sec + frac / ticks
        if ts_list and t < ts_list[-1]:
            raise TraceFormatError("packet timestamps decrease", path, rec_off)
        ts_list.append(t)
        size_list.append(length)
        up_list.append(is_up)
    return PacketTrace(ts_list, size_list, up_list, link_type=link_type, endpoint=endpoint)


# -- line traces --------------------------------------------------------------

def parse_line_trace(text: str, path=None) -> PacketTrace:
    ts: list[float] = []
    sizes: list[int] = []
    up: list[bool] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 3 or cols[2] not in ("U", "D"):
            raise TraceFormatError("expected time_s<TAB>size_bytes<TAB>U|D", path, line=lineno)
        try:
            t = float(cols[0])
            size = int(cols[1])
        except ValueError as exc:
            raise TraceFormatError(str(exc), path, line=lineno) from None
        if not math.isfinite(t) or size < 0:
            raise TraceFormatError("time must be finite and size non-negative", path, line=lineno)
        if ts and t < ts[-1]:
            raise TraceFormatError("timestamps must be non-decreasing", path, line=lineno)
        ts.append(t)
        sizes.append(size)
        up.append(cols[2] == "U")
    return PacketTrace(ts, sizes, up)


def read_line_trace(path: str | Path) -> PacketTrace:
    path = Path(path)
    return parse_line_trace(path.read_text(), path)


def format_line_trace(trace: PacketTrace) -> str:
    lines = [f"# {LINE_TRACE_FORMAT}"]
    for t, s, u in zip(trace.timestamps.tolist(), trace.sizes.tolist(), trace.up.tolist()):
        lines.append(f"{t!r}\t{s}\t{'U' if u else 'D'}")
    return "\n".join(lines) + "\n"


def write_line_trace(trace: PacketTrace, path: str | Path) -> None:
    Path(path).write_text(format_line_trace(trace))


def read_trace(path: str | Path, endpoint: str | None = None) -> PacketTrace:
    """Read a pcap or line trace, chosen by the file's first four bytes."""
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(4)
    if len(head) == 4 and struct.unpack("<I", head)[0] in _MAGICS:
        return read_pcap(path, endpoint)
    return read_line_trace(path)


# -- bursts -------------------------------------------------------------------

@dataclass(frozen=True)
class BurstConfig:
    t_e: float = 0.5
    min_packet_size: int = 512
    direction: Direction | None = None  # None keeps both directions

    def __post_init__(self):
        if not self.t_e > 0:
            raise ValueError("t_e must be positive")
        if self.min_packet_size < 0:
            raise ValueError("min_packet_size must be non-negative")


def extract_events(trace: PacketTrace, cfg: BurstConfig = BurstConfig()) -> Flow:
    """Group data packets into bursts and emit one event per burst.

    Packets below ``min_packet_size`` are dropped first. A new burst starts
    whenever the gap from the previous retained packet is at least ``t_e``.
    Each event is timed at its burst's last packet and sized as the sum.
    """
    keep = trace.sizes >= cfg.min_packet_size
    if cfg.direction is not None:
        keep &= trace.up if cfg.direction == Direction.UP else ~trace.up
    t = trace.timestamps[keep]
    s = trace.sizes[keep]
    direction = cfg.direction or Direction.DOWN
    if t.size == 0:
        return Flow((), PrincipalKind.USER, direction)
    starts = np.flatnonzero(np.concatenate([[True], np.diff(t) >= cfg.t_e]))
    ends = np.concatenate([starts[1:], [t.size]]) - 1
    totals = np.add.reduceat(s, starts)
    events = tuple(Event(float(t[e]), int(n)) for e, n in zip(ends, totals) if n > 0)
    return Flow(events, PrincipalKind.USER, direction)


def render_packets(flow: Flow, bandwidth: float, mtu: int = 1400,
                   direction: Direction | None = None) -> PacketTrace:
    """Lay each event out as back-to-back packets finishing at the event time.

    The sub-MTU remainder goes first, so the burst always ends on a full
    packet. ``bandwidth`` is in bits/second; ``math.inf`` puts every packet
    of an event at the event time.
    """
    if mtu < 1:
        raise ValueError("mtu must be positive")
    direction = direction or flow.direction
    per_event_t = []
    per_event_s = []
    for ev in flow.events:
        n_full, rem = divmod(ev.size, mtu)
        sizes = np.full(n_full + (rem > 0), mtu, dtype=np.int64)
        if rem:
            sizes[0] = rem
        after = ev.size - np.cumsum(sizes)  # bytes still to send after each packet
        if math.isinf(bandwidth):
            times = np.full(sizes.size, ev.time)
        else:
            times = ev.time - after * 8.0 / bandwidth
        per_event_t.append(times)
        per_event_s.append(sizes)
    if not per_event_t:
        return PacketTrace()
    t = np.concatenate(per_event_t)
    s = np.concatenate(per_event_s)
    order = np.argsort(t, kind="stable")
    up = np.full(t.size, direction == Direction.UP)
    return PacketTrace(t[order], s[order], up)
