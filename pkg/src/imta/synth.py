"""Synthetic channel traffic and the matching user-side flows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .flow import Direction, Event, Flow, PrincipalKind, _collapse, merge_close
from .model import (
    LatencyModel,
    MessageType,
    TrafficModel,
    bucket_index,
    sample_imds,
    sample_latencies,
    sample_sizes,
    select_matrix,
)


@dataclass(frozen=True)
class SynthConfig:
    rate_per_day: float
    duration: float
    seed: int = 0
    merge_threshold: float | None = None  # None: the model's t_e

    def __post_init__(self):
        if not self.rate_per_day > 0:
            raise ValueError("rate_per_day must be positive")
        if self.duration < 0:
            raise ValueError("duration must be non-negative")


@dataclass(frozen=True)
class UserSimConfig:
    bandwidth: float = 1e6  # bits/second; math.inf disables transmission time
    latency: LatencyModel | None = None  # None: the model's latency
    merge_threshold: float = 0.5
    seed: int = 0
    role: Literal["admin", "member"] = "admin"
    overhead_factor: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if not self.merge_threshold > 0:
            raise ValueError("merge_threshold must be positive")
        if self.role not in ("admin", "member"):
            raise ValueError(f"role must be 'admin' or 'member', got {self.role!r}")


@dataclass
class SimStats:
    clamped: int = 0
    merged_batches: int = 0
    separated: int = 0  # channel events that stayed a batch of one


def generate_channel(model: TrafficModel, cfg: SynthConfig) -> Flow:
    """Synthesize one channel's message sequence over ``[0, cfg.duration]``.

    IMDs come from the rate-scaled exponential model, types from the
    rate-matched Markov chain, sizes from the per-type CCDFs. Messages closer
    than the merge threshold are collapsed into one event.
    """
    rng = np.random.default_rng(cfg.seed)
    imd = model.imd.for_rate(cfg.rate_per_day)
    t_e = model.imd.merge_threshold if cfg.merge_threshold is None else cfg.merge_threshold
    if cfg.duration <= 0:
        return Flow((), PrincipalKind.CHANNEL, Direction.DOWN)

    expected = cfg.duration / imd.truncated_mean()
    block = int(expected * 1.5 + 4 * math.sqrt(expected) + 16)
    times = np.cumsum(sample_imds(imd, block, rng))
    while times[-1] < cfg.duration:
        more = np.cumsum(sample_imds(imd, block, rng)) + times[-1]
        times = np.concatenate([times, more])
    times = times[times <= cfg.duration]

    chain = select_matrix(model, cfg.rate_per_day)
    types = chain.sample_types(times.size, rng)
    sizes = sample_sizes(model.sizes, types, rng)
    events = [Event(float(t), int(s), MessageType(int(k))) for t, s, k in zip(times, sizes, types)]
    return Flow(tuple(merge_close(events, t_e)), PrincipalKind.CHANNEL, Direction.DOWN)


def simulate_user_flow(channel: Flow, cfg: UserSimConfig, model: TrafficModel | None = None,
                       stats: SimStats | None = None) -> Flow:
    """The flow an admin (or member) of ``channel`` puts on the wire.

    Every event is moved by an independent latency draw (earlier for the
    admin's upstream, later for a member's downstream). Event times are
    burst completion times, so the burst of event ``i+1`` starts
    ``size * 8 / bandwidth`` before its time; when that start is closer than
    the merge threshold to the previous event the two become one event with
    the summed size, timed at the batch's completion.
    """
    if stats is None:
        stats = SimStats()
    latency = cfg.latency
    if latency is None:
        if model is None:
            from .model import default_model
            model = default_model()
        latency = model.latency
    rng = np.random.default_rng(cfg.seed)
    n = len(channel)
    direction = Direction.UP if cfg.role == "admin" else Direction.DOWN
    if n == 0:
        return Flow((), PrincipalKind.USER, direction)

    if latency.b > 0:
        d = sample_latencies(latency, n, rng)
    else:
        d = np.full(n, max(latency.mu, 0.0))
    sign = -1.0 if cfg.role == "admin" else 1.0
    t = channel.times + sign * d
    neg = t < 0
    stats.clamped += int(neg.sum())
    t[neg] = 0.0
    order = np.argsort(t, kind="stable")

    bits_per_byte = 8.0 * cfg.overhead_factor
    inv_bw = 0.0 if math.isinf(cfg.bandwidth) else bits_per_byte / cfg.bandwidth
    out: list[Event] = []
    batch: list[Event] = []
    prev_t = -math.inf
    for idx in order:
        src = channel.events[idx]
        ti = float(t[idx])
        ev = Event(ti, src.size, src.type, src.dummy, src.padding)
        start = ti - src.size * inv_bw
        if batch and start - prev_t >= cfg.merge_threshold:
            out.append(_finish(batch, stats))
            batch = []
        batch.append(ev)
        prev_t = ti
    out.append(_finish(batch, stats))
    return Flow(tuple(out), PrincipalKind.USER, direction)


def _finish(batch: list[Event], stats: SimStats) -> Event:
    if len(batch) == 1:
        stats.separated += 1
        return batch[0]
    stats.merged_batches += 1
    return _collapse(batch, time=max(e.time for e in batch))


@dataclass(frozen=True)
class CorpusConfig:
    duration: float = 86400.0
    seed: int = 0
    rate_per_day: float | None = None  # None: cycle through the five buckets
    user: UserSimConfig = field(default_factory=UserSimConfig)


@dataclass(frozen=True)
class ChannelPair:
    index: int
    bucket: int
    rate_per_day: float
    channel: Flow
    user: Flow


@dataclass(frozen=True)
class Corpus:
    pairs: tuple[ChannelPair, ...]
    bucket_counts: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


def pair_seeds(master_seed: int, index: int) -> tuple[int, int]:
    """Independent (channel, user) seeds for corpus entry ``index``."""
    state = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(2)
    return int(state[0]), int(state[1])


def make_pair(model: TrafficModel, index: int, cfg: CorpusConfig) -> ChannelPair:
    if cfg.rate_per_day is None:
        bucket = index % len(model.buckets)
        rate = model.buckets[bucket].rate_per_day
    else:
        rate = cfg.rate_per_day
        bucket = bucket_index(model, rate)
    ch_seed, user_seed = pair_seeds(cfg.seed, index)
    channel = generate_channel(model, SynthConfig(rate, cfg.duration, ch_seed, model.imd.merge_threshold))
    ucfg = UserSimConfig(cfg.user.bandwidth, cfg.user.latency, cfg.user.merge_threshold,
                         user_seed, cfg.user.role, cfg.user.overhead_factor)
    user = simulate_user_flow(channel, ucfg, model)
    return ChannelPair(index, bucket, rate, channel, user)


def make_pair_corpus(model: TrafficModel, n_channels: int, cfg: CorpusConfig | None = None) -> Corpus:
    """``n_channels`` (channel, user) pairs, seeded per index.

    Without a fixed rate, channel ``i`` goes to rate bucket ``i mod 5`` and is
    generated at that bucket's mean daily rate.
    """
    if n_channels < 1:
        raise ValueError("n_channels must be at least 1")
    cfg = cfg or CorpusConfig()
    pairs = tuple(make_pair(model, i, cfg) for i in range(n_channels))
    counts = [0] * len(model.buckets)
    for p in pairs:
        counts[p.bucket] += 1
    return Corpus(pairs, tuple(counts))
