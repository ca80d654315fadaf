"""Event-based correlation: matching, synchronization and error bounds."""

from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import mpmath
import numpy as np

from .flow import Flow

H0 = "H0"
H1 = "H1"

DEFAULT_P0 = 0.002

# measured per-event match probability under H1, by client bandwidth (Mbps)
P1_BY_BANDWIDTH_MBPS = {0.1: 0.824, 0.5: 0.902, 1.0: 0.921, 10.0: 0.974, 100.0: 0.983}


def p1_for_bandwidth(mbps: float) -> float:
    """Tabulated p1 at the nearest listed bandwidth (log scale)."""
    if mbps <= 0:
        raise ValueError("bandwidth must be positive")
    key = min(P1_BY_BANDWIDTH_MBPS, key=lambda b: (abs(math.log(b / mbps)), b))
    return P1_BY_BANDWIDTH_MBPS[key]


@dataclass(frozen=True)
class EventMatchConfig:
    delta: float = 3.0  # seconds
    gamma: float = 10_000.0  # bytes
    eta: float = 0.5
    skew_window: float = 10.0  # seconds; 0 disables synchronization
    skew_step: float = 0.5

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.skew_window < 0:
            raise ValueError("skew_window must be non-negative")
        if self.skew_window > 0 and not self.skew_step > 0:
            raise ValueError("skew_step must be positive")


@dataclass(frozen=True)
class MatchResult:
    k: int
    n: int
    decision: str
    # index of the matched user event per channel event, -1 when unmatched
    assignments: tuple[int, ...] = ()
    offset: float = 0.0

    @property
    def ratio(self) -> float:
        return self.k / self.n

    def csv_row(self, pair_id) -> list:
        return [pair_id, self.n, self.k, repr(self.ratio), repr(self.offset), self.decision]


MATCH_CSV_HEADER = ["pair_id", "n", "k", "r", "offset_s", "decision"]


def format_match_csv(rows: Sequence[tuple[object, MatchResult]], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(MATCH_CSV_HEADER)
    for pair_id, res in rows:
        w.writerow(res.csv_row(pair_id))
    return buf.getvalue()


def decide(ratio: float, eta: float) -> str:
    return H1 if ratio > eta else H0


def greedy_match(ct: Sequence[float], cs: Sequence[float], ut: Sequence[float], us: Sequence[float],
                 delta: float, gamma: float, offset: float = 0.0) -> list[int]:
    """Greedy in-order matching on plain sequences.

    ``ut`` must be sorted. Each channel event takes the earliest unmatched
    user event with ``|t_c - (t_u + offset)| < delta`` and ``|s_c - s_u| < gamma``.
    """
    used = bytearray(len(ut))
    out = [-1] * len(ct)
    m = len(ut)
    lo = 0
    for i in range(len(ct)):
        t = ct[i] - offset
        s = cs[i]
        # user events with t_u > t - delta; ct sorted so lo only advances
        while lo < m and ut[lo] <= t - delta:
            lo += 1
        j = lo
        while j < m and ut[j] < t + delta:
            if not used[j] and abs(s - us[j]) < gamma and abs(ct[i] - (ut[j] + offset)) < delta:
                used[j] = 1
                out[i] = j
                break
            j += 1
    return out


def _columns(flow: Flow) -> tuple[list[float], list[int]]:
    return [e.time for e in flow.events], [e.size for e in flow.events]


def match_events(channel: Flow, user: Flow, cfg: EventMatchConfig = EventMatchConfig(),
                 offset: float = 0.0) -> MatchResult:
    """Match at a fixed ``offset`` (added to every user time)."""
    if len(channel) == 0:
        raise ValueError("channel flow is empty; the detection ratio is undefined")
    ct, cs = _columns(channel)
    ut, us = _columns(user)
    assign = greedy_match(ct, cs, ut, us, cfg.delta, cfg.gamma, offset)
    k = sum(1 for a in assign if a >= 0)
    return MatchResult(k, len(ct), decide(k / len(ct), cfg.eta), tuple(assign), offset)


def offset_grid(window: float, step: float) -> np.ndarray:
    if window <= 0:
        return np.zeros(1)
    m = int(math.floor(window / step + 1e-9))
    return np.arange(-m, m + 1) * step


def best_offset(offsets: np.ndarray, scores: Sequence[float]) -> float:
    """Pick an offset from a scan.

    Among offsets reaching the maximum score, take the contiguous run that
    contains the maximizer nearest zero and return the centre of that run.
    A flat plateau (typical for the tolerance-based match ratio) therefore
    resolves to its middle rather than to an edge.
    """
    scores = np.asarray(scores, dtype=float)
    best = scores.max()
    hit = scores >= best
    idx = np.flatnonzero(hit)
    key = np.lexsort((offsets[idx], np.abs(offsets[idx])))
    i0 = int(idx[key[0]])
    lo = i0
    while lo > 0 and hit[lo - 1]:
        lo -= 1
    hi = i0
    while hi + 1 < hit.size and hit[hi + 1]:
        hi += 1
    mid_lo, mid_hi = (lo + hi) // 2, (lo + hi + 1) // 2
    centre = min((mid_lo, mid_hi), key=lambda i: (abs(offsets[i]), offsets[i]))
    return float(offsets[centre])


def synchronize(channel: Flow, user: Flow, cfg: EventMatchConfig,
                scorer: Callable[[float], float] | None = None) -> float:
    """The user-time offset in ``[-window, +window]`` that maximizes ``scorer``.

    ``scorer(offset)`` defaults to the match ratio at that offset.
    """
    offsets = offset_grid(cfg.skew_window, cfg.skew_step)
    if offsets.size == 1:
        return 0.0
    if scorer is None:
        if len(channel) == 0:
            return 0.0
        ct, cs = _columns(channel)
        ut, us = _columns(user)

        def scorer(o: float) -> float:
            a = greedy_match(ct, cs, ut, us, cfg.delta, cfg.gamma, o)
            return sum(1 for x in a if x >= 0)

    return best_offset(offsets, [scorer(float(o)) for o in offsets])


def correlate_events(channel: Flow, user: Flow, cfg: EventMatchConfig = EventMatchConfig()) -> MatchResult:
    """Synchronize, then match at the chosen offset."""
    return match_events(channel, user, cfg, synchronize(channel, user, cfg))


class EventDetector:
    """Scores (channel, user) pairs by synchronized match ratio."""

    tag = "event"

    def __init__(self, cfg: EventMatchConfig = EventMatchConfig()):
        self.cfg = cfg

    def score(self, channel: Flow, user: Flow, origin: float = 0.0, length: float | None = None) -> tuple[float, float]:
        res = correlate_events(channel, user, self.cfg)
        return res.ratio, res.offset


# -- bounds -------------------------------------------------------------------

@dataclass(frozen=True)
class BoundParams:
    n: int
    eta: float
    p0: float = DEFAULT_P0
    p1: float = 0.921

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if not (0.0 < self.p0 < self.p1 < 1.0):
            raise ValueError("need 0 < p0 < p1 < 1")


def _xlogy_ratio(a: float, b: float) -> float:
    """a * log(a / b), with the 0 log 0 = 0 convention."""
    return 0.0 if a == 0.0 else a * math.log(a / b)


def kl_bernoulli(a: float, b: float) -> float:
    """Relative entropy D(a || b) between Bernoulli(a) and Bernoulli(b)."""
    return _xlogy_ratio(a, b) + _xlogy_ratio(1.0 - a, 1.0 - b)


def log_fp_bound(p: BoundParams) -> float:
    """Natural log of the false-positive bound.

    The false positive event is at least ``eta * n`` matches out of ``n``
    when each matches with probability ``p0``. Its Chernoff bound is
    ``((1-eta)/(1-p0))^(-n(1-eta)) * (eta/p0)^(-n eta)``, which is
    ``exp(-n D(eta || p0))``. At ``eta <= p0`` the bound is trivially 1.
    """
    if p.eta <= p.p0:
        return 0.0
    return -p.n * kl_bernoulli(p.eta, p.p0)


def fp_bound(p: BoundParams) -> float:
    return math.exp(log_fp_bound(p))


def log_fn_bound(p: BoundParams) -> float:
    """Natural log of ``(eta/p1)^(-n eta) * ((1-eta)/(1-p1))^(eta n - n)``."""
    if p.eta >= p.p1:
        raise ValueError(f"fn bound needs eta < p1 (got eta={p.eta}, p1={p.p1})")
    return -p.n * kl_bernoulli(p.eta, p.p1)


def fn_bound(p: BoundParams) -> float:
    return math.exp(log_fn_bound(p))


def binomial_cdf_exact(r: int, m: int, p, dps: int = 60) -> mpmath.mpf:
    """P(X <= r) for X ~ Binomial(m, p), summed term by term in ``dps`` digits."""
    if not 0 <= r <= m:
        raise ValueError("need 0 <= r <= m")
    with mpmath.workdps(dps):
        p = mpmath.mpf(p)
        q = 1 - p
        if q == 0:
            return mpmath.mpf(1 if r == m else 0)
        # term_i = C(m, i) p^i q^(m-i), built up by the ratio of consecutive terms
        ratio = p / q
        term = q**m
        total = term
        for i in range(r):
            term = term * (m - i) / (i + 1) * ratio
            total += term
        return +total


# eta * n is meant as an exact count when it is integral (0.3 * 10 is 3.0000000000000004)
_COUNT_SLACK = 1e-9


def exact_fp(n: int, eta: float, p0: float, dps: int = 60) -> mpmath.mpf:
    """P(at least ceil(eta n) matches) under H0, i.e. F(n - ceil(eta n); n, 1 - p0)."""
    return binomial_cdf_exact(n - math.ceil(eta * n - _COUNT_SLACK), n, mpmath.mpf(1) - mpmath.mpf(p0), dps)


def exact_fn(n: int, eta: float, p1: float, dps: int = 60) -> mpmath.mpf:
    """P(at most floor(eta n) matches) under H1, i.e. F(floor(eta n); n, p1)."""
    return binomial_cdf_exact(math.floor(eta * n + _COUNT_SLACK), n, p1, dps)


def estimate_p0(pairs: Sequence[tuple[Flow, Flow]], cfg: EventMatchConfig = EventMatchConfig(),
                synchronized: bool = True) -> float:
    """Pooled per-event match probability over non-associated pairs."""
    k = n = 0
    for channel, user in pairs:
        if len(channel) == 0:
            continue
        res = correlate_events(channel, user, cfg) if synchronized else match_events(channel, user, cfg)
        k += res.k
        n += res.n
    if n == 0:
        raise ValueError("no channel events to estimate p0 from")
    return k / n
