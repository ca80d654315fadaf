import math

import numpy as np
import pytest

from imta.detect_event import EventMatchConfig, match_events
from imta.flow import Direction, Event, Flow
from imta.model import LatencyModel, MessageType
from imta.synth import (CorpusConfig, SimStats, SynthConfig, UserSimConfig, generate_channel, make_pair_corpus,
                        pair_seeds, simulate_user_flow)


def _oracle_event_count(rate_per_day, duration, cutoff, t_e, rng):
    """Reimplemented IMD chain: rejection-sampled exponential gaps, then merge."""
    lam = rate_per_day / 86400.0
    t, last, count = 0.0, None, 0
    while True:
        g = rng.exponential(1.0 / lam)
        while g > cutoff:
            g = rng.exponential(1.0 / lam)
        t += g
        if t > duration:
            return count
        if last is None or t - last >= t_e:
            count += 1
        last = t


def test_channel_event_count_matches_oracle(model):
    rate, duration = 130.0, 86400.0
    ours = [len(generate_channel(model, SynthConfig(rate, duration, seed=s))) for s in range(200)]
    orng = np.random.default_rng(999)
    ref = [_oracle_event_count(rate, duration, model.imd.long_gap_cutoff, 0.5, orng) for _ in range(200)]
    assert np.mean(ours) == pytest.approx(np.mean(ref), rel=0.10)


def test_channel_zero_duration(model):
    assert len(generate_channel(model, SynthConfig(10.0, 0.0))) == 0


def test_channel_deterministic(model):
    a = generate_channel(model, SynthConfig(39.47, 86400, seed=3))
    b = generate_channel(model, SynthConfig(39.47, 86400, seed=3))
    assert a == b
    assert a.is_sorted()
    assert all(0 <= e.time <= 86400 for e in a)


def test_channel_events_respect_merge_threshold(model):
    f = generate_channel(model, SynthConfig(130.57, 86400, seed=4))
    assert np.all(np.diff(f.times) >= 0.5)


def _chan(times, sizes):
    return Flow(tuple(Event(t, s, MessageType.TEXT) for t, s in zip(times, sizes)))


def test_user_flow_identity():
    ch = _chan([1.0, 5.0, 9.5], [100, 2000, 50])
    u = simulate_user_flow(ch, UserSimConfig(bandwidth=math.inf, latency=LatencyModel(0.0, 0.0)))
    assert [(e.time, e.size) for e in u] == [(e.time, e.size) for e in ch]
    assert u.direction == Direction.UP


def test_user_flow_forced_merge():
    ch = _chan([1.0, 1.4], [100, 200])
    u = simulate_user_flow(ch, UserSimConfig(bandwidth=math.inf, latency=LatencyModel(0.0, 0.0)))
    assert [(e.time, e.size) for e in u] == [(1.4, 300)]


def test_user_flow_transmission_time_merges():
    # second burst takes 8 s at 1 Mbps, so it starts well before the first ends
    ch = _chan([10.0, 15.0], [100, 1_000_000])
    stats = SimStats()
    u = simulate_user_flow(ch, UserSimConfig(bandwidth=1e6, latency=LatencyModel(0.0, 0.0)), stats=stats)
    assert len(u) == 1 and u.events[0].size == 1_000_100
    assert stats.merged_batches == 1


def test_user_flow_clamps_negative_times():
    ch = _chan([0.01, 100.0], [100, 100])
    stats = SimStats()
    u = simulate_user_flow(ch, UserSimConfig(latency=LatencyModel(0.5, 1e-9)), stats=stats)
    assert stats.clamped == 1
    assert u.events[0].time == 0.0


def test_member_role_adds_latency():
    ch = _chan([10.0], [100])
    u = simulate_user_flow(ch, UserSimConfig(role="member", latency=LatencyModel(0.3, 1e-9)))
    assert u.events[0].time == pytest.approx(10.3)
    assert u.direction == Direction.DOWN


def test_p1_calibration_at_1mbps(model):
    # pooled fraction of channel events matched by the associated user flow
    c = make_pair_corpus(model, 100, CorpusConfig(seed=1, user=UserSimConfig(bandwidth=1e6)))
    k = n = 0
    for p in c:
        if len(p.channel):
            r = match_events(p.channel, p.user, EventMatchConfig(skew_window=0))
            k, n = k + r.k, n + r.n
    assert k / n == pytest.approx(0.921, abs=0.03)


def test_p1_grows_with_bandwidth(model):
    vals = []
    for bw in (0.1e6, 10e6):
        c = make_pair_corpus(model, 50, CorpusConfig(seed=2, user=UserSimConfig(bandwidth=bw)))
        k = n = 0
        for p in c:
            if len(p.channel):
                r = match_events(p.channel, p.user, EventMatchConfig(skew_window=0))
                k, n = k + r.k, n + r.n
        vals.append(k / n)
    assert vals[0] < vals[1]


def test_corpus_buckets_and_determinism(model):
    cfg = CorpusConfig(duration=3600, seed=5)
    a = make_pair_corpus(model, 12, cfg)
    b = make_pair_corpus(model, 12, cfg)
    assert a == b
    assert a.bucket_counts == (3, 3, 2, 2, 2)
    assert sum(a.bucket_counts) == len(a) == 12
    assert len(make_pair_corpus(model, 1, cfg)) == 1
    with pytest.raises(ValueError):
        make_pair_corpus(model, 0, cfg)


def test_pair_seeds_independent():
    assert pair_seeds(7, 0) != pair_seeds(7, 1)
    assert pair_seeds(7, 3) == pair_seeds(7, 3)
    assert len(set(pair_seeds(7, 3))) == 2


@pytest.mark.slow
def test_corpus_of_ten_thousand(model):
    c = make_pair_corpus(model, 10_000, CorpusConfig(duration=900, seed=3))
    assert len(c) == 10_000 and sum(c.bucket_counts) == 10_000
