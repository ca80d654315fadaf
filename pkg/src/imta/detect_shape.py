"""Shape-based correlation on bandwidth-normalized traffic shapes.

Every event becomes a rectangular bar ``2 * t_e`` wide, centred on the
event time, whose area is the event size. Bars are rasterized into bins of
width ``t_s`` and two shapes are compared with the normalized inner product
``2 <a, b> / (|a|^2 + |b|^2)``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .detect_event import H0, H1, best_offset, offset_grid
from .flow import Flow


@dataclass(frozen=True)
class ShapeConfig:
    t_e: float = 0.5
    t_s: float = 0.01
    eta: float = 0.5
    skew_window: float = 10.0
    skew_step: float = 0.5

    def __post_init__(self):
        if not self.t_s > 0:
            raise ValueError("t_s must be positive")
        if self.t_e < self.t_s:
            raise ValueError("t_e must be at least t_s")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.skew_window < 0:
            raise ValueError("skew_window must be non-negative")

    @property
    def bar_bins(self) -> int:
        return max(1, int(round(2 * self.t_e / self.t_s)))


@dataclass(frozen=True, eq=False)
class NormalizedShape:
    origin: float
    bin_width: float
    heights: np.ndarray  # bytes/second per bin

    def __len__(self) -> int:
        return int(self.heights.size)

    @property
    def area(self) -> float:
        return float(self.heights.sum() * self.bin_width)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_index", "height"])
        for i, h in enumerate(self.heights.tolist()):
            w.writerow([i, repr(h)])
        return buf.getvalue()


def normalize_shape(flow: Flow, cfg: ShapeConfig = ShapeConfig(), origin: float | None = None,
                    length: float | None = None) -> NormalizedShape:
    """Rasterize ``flow`` into bar heights.

    ``origin`` defaults to the first bar's left edge. With ``length`` the
    vector has exactly ``round(length / t_s)`` bins and bars are clipped to
    it; otherwise it ends with the last bar.
    """
    width = cfg.bar_bins
    if origin is None:
        origin = flow.events[0].time - cfg.t_e if len(flow) else 0.0
    # divide the size over the bins actually used so every bar's area is exact
    starts = [int(round((e.time - cfg.t_e - origin) / cfg.t_s)) for e in flow.events]
    if length is not None:
        nbins = max(0, int(round(length / cfg.t_s)))
    else:
        nbins = max((s + width for s in starts), default=0)
        nbins = max(nbins, 0)
    heights = np.zeros(nbins)
    scale = 1.0 / (width * cfg.t_s)
    for s, e in zip(starts, flow.events):
        a, b = max(s, 0), min(s + width, nbins)
        if a < b:
            heights[a:b] += e.size * scale
    return NormalizedShape(float(origin), cfg.t_s, heights)


def _check_width(a: NormalizedShape, b: NormalizedShape) -> None:
    if not math.isclose(a.bin_width, b.bin_width, rel_tol=1e-12, abs_tol=0.0):
        raise ValueError(f"bin widths differ: {a.bin_width} vs {b.bin_width}")


def _ratio(dot: float, ea: float, eb: float) -> float:
    denom = ea + eb
    if denom <= 0:
        return 0.0
    return min(1.0, max(0.0, 2.0 * dot / denom))


def shape_correlation(a: NormalizedShape, b: NormalizedShape) -> float:
    """Normalized inner product over the first ``min(len(a), len(b))`` bins."""
    _check_width(a, b)
    n = min(len(a), len(b))
    x = a.heights[:n]
    y = b.heights[:n]
    return _ratio(float(x @ y), float(x @ x), float(y @ y))


def shifted_correlation(a: np.ndarray, b: np.ndarray, shift: int) -> float:
    """Correlation of ``a`` with ``b`` moved ``shift`` bins later."""
    n = min(a.size, b.size)
    a = a[:n]
    b = b[:n]
    if shift >= n or -shift >= n:
        return _ratio(0.0, float(a @ a), 0.0)
    if shift >= 0:
        x, y = a[shift:], b[:n - shift]
    else:
        x, y = a[:n + shift], b[-shift:]
    return _ratio(float(x @ y), float(a @ a), float(y @ y))


def shape_decide(corr: float, eta: float) -> str:
    return H1 if corr > eta else H0


def synchronize_shapes(a: NormalizedShape, b: NormalizedShape, cfg: ShapeConfig) -> tuple[float, float]:
    """(best correlation, offset in seconds added to ``b``'s times)."""
    _check_width(a, b)
    offsets = offset_grid(cfg.skew_window, cfg.skew_step)
    shifts = np.rint(offsets / cfg.t_s).astype(int)
    x, y = a.heights, b.heights
    scores = [shifted_correlation(x, y, int(s)) for s in shifts]
    off = best_offset(offsets, scores)
    return scores[int(np.flatnonzero(offsets == off)[0])], off


class ShapeDetector:
    """Scores (channel, user) pairs by synchronized shape correlation."""

    tag = "shape"

    def __init__(self, cfg: ShapeConfig = ShapeConfig()):
        self.cfg = cfg

    def score(self, channel: Flow, user: Flow, origin: float | None = None,
              length: float | None = None) -> tuple[float, float]:
        if origin is None:
            origin = min(f.events[0].time for f in (channel, user) if len(f)) - self.cfg.t_e \
                if (len(channel) or len(user)) else 0.0
        if length is None:
            last = max((f.events[-1].time for f in (channel, user) if len(f)), default=origin)
            length = last + self.cfg.t_e - origin
        a = normalize_shape(channel, self.cfg, origin, length)
        b = normalize_shape(user, self.cfg, origin, length)
        return synchronize_shapes(a, b, self.cfg)
