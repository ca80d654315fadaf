"""ROC evaluation over corpora of associated and non-associated pairs."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .flow import Event, Flow
from .synth import Corpus

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = np.linspace(0.0, 1.0, 512)


class Detector(Protocol):
    tag: str

    def score(self, channel: Flow, user: Flow, origin: float = 0.0,
              length: float | None = None) -> tuple[float, float]: ...


@dataclass(frozen=True)
class LabeledPair:
    pair_id: str
    channel: Flow
    user: Flow
    associated: bool
    bucket: int = -1


@dataclass(frozen=True)
class PairScore:
    pair_id: str
    associated: bool
    score: float
    length: float
    detector: str
    offset: float = 0.0


def associated_pairs(corpus: Corpus) -> list[LabeledPair]:
    return [LabeledPair(f"a{p.index:06d}", p.channel, p.user, True, p.bucket) for p in corpus]


def non_associated_pairs(corpus: Corpus, per_channel: int = 10) -> list[LabeledPair]:
    """Each channel against the users of ``per_channel`` other channels in its bucket.

    Partners are the next channels of the same bucket in index order,
    wrapping around, so the selection is deterministic.
    """
    by_bucket: dict[int, list] = {}
    for p in corpus:
        by_bucket.setdefault(p.bucket, []).append(p)
    out = []
    for members in by_bucket.values():
        m = len(members)
        for pos, p in enumerate(members):
            for k in range(1, min(per_channel, m - 1) + 1):
                q = members[(pos + k) % m]
                out.append(LabeledPair(f"n{p.index:06d}-{q.index:06d}", p.channel, q.user, False, p.bucket))
    out.sort(key=lambda lp: lp.pair_id)
    return out


# -- observation windows ------------------------------------------------------

def active_time(times: np.ndarray, all_times: np.ndarray, cutoff: float, residual: float) -> np.ndarray:
    """Map ``times`` onto an active-time axis.

    Every gap in ``all_times`` (sorted) longer than ``cutoff`` is shortened to
    ``residual`` seconds; later times move earlier accordingly.
    """
    if all_times.size < 2 or not np.isfinite(cutoff):
        return times.astype(float)
    gaps = np.diff(all_times)
    long = gaps > cutoff
    if not long.any():
        return times.astype(float)
    ends = all_times[1:][long]  # first time after each long gap
    removed = np.cumsum(gaps[long] - residual)
    idx = np.searchsorted(ends, times, side="right")
    shift = np.concatenate([[0.0], removed])[idx]
    return times - shift


def observation_window(channel: Flow, user: Flow, length: float, lead: float = 10.0,
                       cutoff: float = 7200.0, residual: float = 10.0) -> tuple[Flow, Flow]:
    """Both flows cut to ``length`` seconds of active time.

    The window opens ``lead`` seconds before the channel's first event; event
    times are returned relative to that opening.
    """
    if len(channel) == 0:
        return channel, user.with_events(())
    ct, ut = channel.times, user.times
    union = np.sort(np.concatenate([ct, ut]))
    ca = active_time(ct, union, cutoff, residual)
    ua = active_time(ut, union, cutoff, residual)
    origin = ca[0] - lead

    def cut(flow: Flow, at: np.ndarray) -> Flow:
        rel = at - origin
        keep = (rel >= 0) & (rel < length)
        evs = [Event(float(r), e.size, e.type, e.dummy, e.padding)
               for r, e, k in zip(rel, flow.events, keep) if k]
        evs.sort(key=lambda e: e.time)
        return flow.with_events(evs)

    return cut(channel, ca), cut(user, ua)


@dataclass(frozen=True)
class WindowConfig:
    lead: float = 10.0
    cutoff: float = 7200.0
    residual: float = 10.0


def score_pair(pair: LabeledPair, detector: Detector, length: float,
               window: WindowConfig = WindowConfig()) -> PairScore:
    ch, us = observation_window(pair.channel, pair.user, length, window.lead, window.cutoff, window.residual)
    if len(ch) == 0:
        score, off = 0.0, 0.0
    else:
        score, off = detector.score(ch, us, 0.0, length)
    return PairScore(pair.pair_id, pair.associated, float(score), float(length), detector.tag, float(off))


def _score_chunk(args) -> list[PairScore]:
    pairs, detector, length, window = args
    return [score_pair(p, detector, length, window) for p in pairs]


def score_corpus(pairs: Sequence[LabeledPair], detector: Detector, length: float, jobs: int = 1,
                 window: WindowConfig = WindowConfig()) -> list[PairScore]:
    """Score every pair on its first ``length`` seconds of active time.

    Results are sorted by pair_id and do not depend on ``jobs``.
    """
    if not pairs:
        raise ValueError("corpus is empty")
    if jobs <= 1:
        out = [score_pair(p, detector, length, window) for p in pairs]
    else:
        size = max(1, len(pairs) // (jobs * 4))
        chunks = [(pairs[i:i + size], detector, length, window) for i in range(0, len(pairs), size)]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = [s for chunk in ex.map(_score_chunk, chunks) for s in chunk]
    out.sort(key=lambda s: s.pair_id)
    return out


# -- ROC ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RocCurve:
    eta: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eta", "tp", "fp"])
        for row in zip(self.eta.tolist(), self.tp.tolist(), self.fp.tolist()):
            w.writerow([repr(v) for v in row])
        return buf.getvalue()


def _split(scores: Iterable[PairScore]) -> tuple[np.ndarray, np.ndarray]:
    scores = list(scores)
    pos = np.array([s.score for s in scores if s.associated], dtype=float)
    neg = np.array([s.score for s in scores if not s.associated], dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise ValueError(f"need associated and non-associated scores (got {pos.size} and {neg.size})")
    return pos, neg


def _rate_above(sorted_scores: np.ndarray, eta: np.ndarray) -> np.ndarray:
    return (sorted_scores.size - np.searchsorted(sorted_scores, eta, side="right")) / sorted_scores.size


def roc(scores: Iterable[PairScore], thresholds: Sequence[float] | None = None) -> RocCurve:
    """TP and FP rates (score strictly above eta) at each threshold."""
    pos, neg = _split(scores)
    eta = np.asarray(DEFAULT_THRESHOLDS if thresholds is None else thresholds, dtype=float)
    eta = np.sort(eta)
    return RocCurve(eta, _rate_above(np.sort(pos), eta), _rate_above(np.sort(neg), eta), int(pos.size), int(neg.size))


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve, closed with the (0,0) and (1,1) corners."""
    fp = np.concatenate([[1.0], curve.fp, [0.0]])
    tp = np.concatenate([[1.0], curve.tp, [0.0]])
    return float(np.sum(-np.diff(fp) * (tp[1:] + tp[:-1]) / 2))


def auc_exact(scores: Iterable[PairScore]) -> float:
    """P(associated score > non-associated score), ties counted one half."""
    pos, neg = _split(scores)
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    tied = np.searchsorted(neg, pos, side="right") - below
    return float((below.sum() + 0.5 * tied.sum()) / (pos.size * neg.size))


def tp_at_fp(curve: RocCurve, max_fp: float) -> tuple[float, float]:
    """(best TP over thresholds with FP <= max_fp, the smallest such eta)."""
    ok = np.flatnonzero(curve.fp <= max_fp)
    if ok.size == 0:
        return 0.0, float("nan")
    best = ok[np.argmax(curve.tp[ok])]
    return float(curve.tp[best]), float(curve.eta[best])


# -- cascade ------------------------------------------------------------------

@dataclass(frozen=True)
class CascadeResult:
    decisions: dict
    survivors: int
    tp: float
    fp: float
    stage1_tp: float
    stage1_fp: float


def cascade(short: Sequence[PairScore], long: Sequence[PairScore], eta_short: float,
            eta_long: float) -> CascadeResult:
    """Flag a pair only if its short score passes and then its long score passes.

    ``eta_long <= 0`` disables the second stage.
    """
    s_map = {s.pair_id: s for s in short}
    l_map = {s.pair_id: s for s in long}
    if s_map.keys() != l_map.keys():
        missing = sorted(s_map.keys() ^ l_map.keys())[:5]
        raise ValueError(f"short and long score sets cover different pairs, e.g. {missing}")
    decisions = {}
    survivors = 0
    n_pos = n_neg = tp = fp = tp1 = fp1 = 0
    for pid in sorted(s_map):
        s, l = s_map[pid], l_map[pid]
        if s.associated != l.associated:
            raise ValueError(f"pair {pid} has inconsistent labels")
        stage1 = s.score > eta_short
        survivors += stage1
        flag = stage1 and (eta_long <= 0 or l.score > eta_long)
        decisions[pid] = flag
        if s.associated:
            n_pos += 1
            tp += flag
            tp1 += stage1
        else:
            n_neg += 1
            fp += flag
            fp1 += stage1

    def rate(a, b):
        return a / b if b else 0.0

    return CascadeResult(decisions, survivors, rate(tp, n_pos), rate(fp, n_neg), rate(tp1, n_pos), rate(fp1, n_neg))


# -- score files --------------------------------------------------------------

SCORE_CSV_HEADER = ["pair_id", "associated", "detector", "length_s", "score"]


def format_scores(scores: Iterable[PairScore], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(SCORE_CSV_HEADER)
    for s in scores:
        w.writerow([s.pair_id, int(s.associated), s.detector, repr(s.length), repr(s.score)])
    return buf.getvalue()


def write_scores(scores: Iterable[PairScore], path: str | Path, append: bool = False) -> None:
    path = Path(path)
    fresh = not (append and path.exists() and path.stat().st_size > 0)
    with path.open("a" if append else "w") as fh:
        fh.write(format_scores(scores, header=fresh))


def parse_scores(text: str, path=None) -> list[PairScore]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != SCORE_CSV_HEADER:
        raise ValueError(f"{path or '<scores>'}: missing header {','.join(SCORE_CSV_HEADER)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if row == SCORE_CSV_HEADER:
            continue
        try:
            pid, assoc, det, length, score = row
            out.append(PairScore(pid, bool(int(assoc)), float(score), float(length), det))
        except ValueError as exc:
            raise ValueError(f"{path or '<scores>'}:{lineno}: {exc}") from None
    return out


def read_scores(path: str | Path) -> list[PairScore]:
    path = Path(path)
    return parse_scores(path.read_text(), path)
