"""Offline countermeasures on flows: padding, dummy events and delays."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .flow import Direction, Event, Flow, merge_close
from .model import MessageType, TypeSizes, default_model
from .trace import PacketTrace


@dataclass(frozen=True)
class ObfuscationConfig:
    r_padding: float = 0.0
    p_padding: float = 0.0
    # rate of the exponential per-event delay (1/s); None or inf disables delays
    delay_rate: float | None = None
    dummy_sizes: TypeSizes | None = None  # None: the default model's Photo sizes
    seed: int = 0

    def __post_init__(self):
        if self.r_padding < 0:
            raise ValueError("r_padding must be non-negative")
        if not 0.0 <= self.p_padding <= 1.0:
            raise ValueError("p_padding must lie in [0, 1]")
        if self.delay_rate is not None and not self.delay_rate > 0:
            raise ValueError("delay_rate must be positive when delays are enabled")

    @classmethod
    def with_mean_delay(cls, mean_delay: float, **kw) -> "ObfuscationConfig":
        return cls(delay_rate=None if mean_delay <= 0 else 1.0 / mean_delay, **kw)

    @property
    def delays_enabled(self) -> bool:
        return self.delay_rate is not None and math.isfinite(self.delay_rate)

    @property
    def mean_delay(self) -> float:
        return 1.0 / self.delay_rate if self.delays_enabled else 0.0

    def dummy_size_model(self) -> TypeSizes:
        return self.dummy_sizes if self.dummy_sizes is not None else default_model().sizes[MessageType.PHOTO]

    @property
    def is_identity(self) -> bool:
        return self.r_padding == 0 and self.p_padding == 0 and not self.delays_enabled


@dataclass(frozen=True)
class OverheadReport:
    dummy_bytes: int
    padded_bytes: int
    real_bytes: int
    added_latency: float  # seconds, mean real-event shift
    expected_overhead: float | None = None

    @property
    def overhead(self) -> float:
        if self.real_bytes == 0:
            return 0.0
        return (self.dummy_bytes + self.padded_bytes) / self.real_bytes

    @staticmethod
    def csv_header() -> list[str]:
        return ["dummy_bytes", "padded_bytes", "real_bytes", "overhead", "expected_overhead", "added_latency_s"]

    def csv_row(self) -> list:
        exp = "" if self.expected_overhead is None else repr(self.expected_overhead)
        return [self.dummy_bytes, self.padded_bytes, self.real_bytes, repr(self.overhead), exp, repr(self.added_latency)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()


def pad_events(flow: Flow, cfg: ObfuscationConfig, rng: np.random.Generator) -> Flow:
    """Grow every event by ``u * size`` bytes, ``u ~ U[0, r_padding]``."""
    if cfg.r_padding == 0 or len(flow) == 0:
        return flow
    u = rng.uniform(0.0, cfg.r_padding, size=len(flow))
    out = []
    for e, ui in zip(flow.events, u):
        extra = int(round(ui * e.size))
        out.append(Event(e.time, e.size + extra, e.type, e.dummy, e.padding + extra))
    return flow.with_events(out)


def inject_dummies(flow: Flow, duration: float, cfg: ObfuscationConfig, rng: np.random.Generator,
                   origin: float = 0.0) -> Flow:
    """Add a dummy event to each silent one-second slot with probability ``p_padding``.

    Slots are ``[origin + k, origin + k + 1)`` for ``k < ceil(duration)``; a
    slot is silent when no real event falls in it. A dummy lands uniformly
    inside its slot with a size drawn from the dummy size model.
    """
    if cfg.p_padding == 0 or duration <= 0:
        return flow
    n_slots = int(math.ceil(duration))
    busy = np.zeros(n_slots, dtype=bool)
    slot = np.floor(flow.times - origin).astype(np.int64) if len(flow) else np.zeros(0, dtype=np.int64)
    slot = slot[(slot >= 0) & (slot < n_slots)]
    busy[slot] = True
    hit = (rng.random(n_slots) < cfg.p_padding) & ~busy
    k = np.flatnonzero(hit)
    if k.size == 0:
        return flow
    times = origin + k + rng.random(k.size)
    sizes = np.maximum(1, np.rint(cfg.dummy_size_model().quantile(rng.random(k.size)))).astype(np.int64)
    dummies = [Event(float(t), int(s), MessageType.PHOTO, dummy=True) for t, s in zip(times, sizes)]
    merged = sorted(list(flow.events) + dummies, key=lambda e: e.time)
    return flow.with_events(merged)


def delay_events(flow: Flow, cfg: ObfuscationConfig, rng: np.random.Generator) -> Flow:
    """Delay each downstream event by an independent exponential draw.

    Upstream flows pass through unchanged.
    """
    if not cfg.delays_enabled or flow.direction != Direction.DOWN or len(flow) == 0:
        return flow
    d = rng.exponential(1.0 / cfg.delay_rate, size=len(flow))
    out = [Event(e.time + float(di), e.size, e.type, e.dummy, e.padding) for e, di in zip(flow.events, d)]
    out.sort(key=lambda e: e.time)
    return flow.with_events(out)


def overhead(original: Flow, obfuscated: Flow, length: float | None = None,
             cfg: ObfuscationConfig | None = None) -> OverheadReport:
    """Realized bandwidth and latency cost of an obfuscated flow.

    With ``cfg`` and ``length`` the report also carries the analytical
    expectation ``p_padding * length * mean dummy size / real bytes``.
    """
    real_bytes = original.total_bytes
    dummy = sum(e.size for e in obfuscated.events if e.dummy)
    padded = sum(e.padding for e in obfuscated.events if not e.dummy)
    real_orig = original.times
    real_obf = np.fromiter((e.time for e in obfuscated.events if not e.dummy), dtype=float)
    added = float(real_obf.mean() - real_orig.mean()) if real_orig.size and real_obf.size else 0.0
    expected = None
    if cfg is not None and length is not None:
        expected = expected_dummy_overhead(cfg, length, real_bytes)
    return OverheadReport(int(dummy), int(padded), int(real_bytes), added, expected)


def expected_dummy_overhead(cfg: ObfuscationConfig, length: float, real_bytes: float) -> float:
    if real_bytes <= 0:
        return 0.0
    return cfg.p_padding * length * cfg.dummy_size_model().mean_bytes / real_bytes


def combine_reports(reports) -> OverheadReport:
    """Pool reports over many flows (bytes add, latency averages by flow)."""
    reports = list(reports)
    if not reports:
        return OverheadReport(0, 0, 0, 0.0)
    exp = None
    if all(r.expected_overhead is not None for r in reports):
        real = sum(r.real_bytes for r in reports)
        exp = sum(r.expected_overhead * r.real_bytes for r in reports) / real if real else 0.0
    return OverheadReport(
        sum(r.dummy_bytes for r in reports),
        sum(r.padded_bytes for r in reports),
        sum(r.real_bytes for r in reports),
        float(np.mean([r.added_latency for r in reports])),
        exp,
    )


def obfuscate_flow(flow: Flow, duration: float, cfg: ObfuscationConfig, rng: np.random.Generator,
                   merge_threshold: float | None = None, origin: float = 0.0) -> tuple[Flow, OverheadReport]:
    """Pad, inject dummies and delay, in that order.

    The report is taken before any re-merging. With ``merge_threshold`` the
    returned flow is re-merged as a wire observer would see it, so dummies
    close to real events fold into their bursts.
    """
    out = pad_events(flow, cfg, rng)
    out = inject_dummies(out, duration, cfg, rng, origin)
    out = delay_events(out, cfg, rng)
    report = overhead(flow, out, duration, cfg)
    if merge_threshold is not None:
        out = out.with_events(merge_close(out.events, merge_threshold))
    return out, report


def delay_packets(trace: PacketTrace, cfg: ObfuscationConfig, rng: np.random.Generator) -> PacketTrace:
    """Per-packet exponential delays on downstream packets, order preserved.

    Each downstream packet is held for an independent exponential time but
    cannot overtake the packet before it (a relay forwarding one ordered
    stream), so its release time is ``max(arrival + d, previous release)``.
    Bursts spread out and may split into several events on the wire.
    Upstream packets are untouched.
    """
    if not cfg.delays_enabled or len(trace) == 0:
        return trace
    t = trace.timestamps.copy()
    down = ~trace.up
    if down.any():
        d = rng.exponential(1.0 / cfg.delay_rate, size=int(down.sum()))
        t[down] = np.maximum.accumulate(t[down] + d)
    order = np.argsort(t, kind="stable")
    return PacketTrace(t[order], trace.sizes[order], trace.up[order], trace.link_type, trace.endpoint)
