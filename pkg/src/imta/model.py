"""Statistical model of IM traffic: message types, sizes, IMDs and latency.

Everything is loaded from a single TOML document (``format = "imta-model/1"``);
the bundled default lives in ``imta/data/default_model.toml``. Samplers take
an explicit :class:`numpy.random.Generator` and keep no hidden state.
"""

from __future__ import annotations

import enum
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MODEL_FORMAT = "imta-model/1"
SECONDS_PER_DAY = 86400.0
ROW_SUM_TOLERANCE = 1e-9


class MessageType(enum.IntEnum):
    TEXT = 0
    PHOTO = 1
    VIDEO = 2
    FILE = 3
    AUDIO = 4

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def from_label(cls, label: str) -> "MessageType":
        return cls[label.upper()]


class ModelFormatError(ValueError):
    """A model file is malformed or violates a model invariant."""

    def __init__(self, message: str, path: str | Path | None = None, location: str | None = None):
        self.path = str(path) if path is not None else None
        self.location = location
        where = ":".join(p for p in (self.path, location) if p)
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class TypeSizes:
    """Size distribution of one message type.

    The CCDF is tabulated over sizes normalised by ``max_bytes``; ``survival[k]``
    is P(size > x[k] * max_bytes) and is interpolated linearly in between.
    """

    min_bytes: int
    max_bytes: int
    mean_bytes: float
    x: np.ndarray
    survival: np.ndarray

    def ccdf_mean(self) -> float:
        """Mean size in bytes implied by the tabulated CCDF."""
        if len(self.x) == 1:
            return float(self.x[0] * self.max_bytes)
        x, s = self.x, self.survival
        return float((x[0] + np.sum(np.diff(x) * (s[:-1] + s[1:]) / 2)) * self.max_bytes)

    def quantile(self, u: np.ndarray | float) -> np.ndarray:
        """Inverse CCDF: the size exceeded with probability ``u``."""
        if len(self.x) == 1:
            return np.full(np.shape(u), self.x[0] * self.max_bytes)
        # np.interp needs increasing abscissae
        return np.interp(u, self.survival[::-1], self.x[::-1]) * self.max_bytes


@dataclass(frozen=True)
class SizeModel:
    types: dict[MessageType, TypeSizes]

    def __getitem__(self, mtype: MessageType) -> TypeSizes:
        return self.types[MessageType(mtype)]

    def mean(self, mtype: MessageType) -> float:
        return self[mtype].mean_bytes

    def size_range(self, mtype: MessageType) -> tuple[int, int]:
        t = self[mtype]
        return t.min_bytes, t.max_bytes


@dataclass(frozen=True)
class TypeMarkovChain:
    label: str
    matrix: np.ndarray
    initial: np.ndarray
    rate_per_day: float | None = None

    def next_type(self, current: MessageType, rng: np.random.Generator) -> MessageType:
        return MessageType(int(rng.choice(5, p=self.matrix[current])))

    def sample_types(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """A length-``n`` type sequence started from the initial distribution."""
        out = np.empty(n, dtype=np.int8)
        if n == 0:
            return out
        cum = np.cumsum(self.matrix, axis=1)
        u = rng.random(n)
        state = int(np.searchsorted(np.cumsum(self.initial), u[0], side="right"))
        out[0] = min(state, 4)
        for i in range(1, n):
            state = int(np.searchsorted(cum[state], u[i], side="right"))
            state = min(state, 4)
            out[i] = state
        return out


@dataclass(frozen=True)
class ImdModel:
    rate_per_day: float
    rate_per_second: float
    merge_threshold: float = 0.5
    long_gap_cutoff: float = 7200.0

    def for_rate(self, rate_per_day: float) -> "ImdModel":
        """The same fitted shape rescaled to another daily message rate."""
        scale = rate_per_day / self.rate_per_day
        return ImdModel(rate_per_day, self.rate_per_second * scale,
                        self.merge_threshold, self.long_gap_cutoff)

    def truncated_mean(self) -> float:
        """E[IMD | IMD <= long_gap_cutoff], in seconds."""
        lam, c = self.rate_per_second, self.long_gap_cutoff
        if math.isinf(c):
            return 1.0 / lam
        return 1.0 / lam - c / math.expm1(lam * c)


@dataclass(frozen=True)
class LatencyModel:
    mu: float = 0.2
    b: float = 0.1


@dataclass(frozen=True)
class TrafficModel:
    sizes: SizeModel
    imd: ImdModel
    latency: LatencyModel
    aggregate: TypeMarkovChain
    buckets: tuple[TypeMarkovChain, ...]
    source: str = field(default="", compare=False)

    @property
    def bucket_rates(self) -> tuple[float, ...]:
        return tuple(b.rate_per_day for b in self.buckets)


def select_matrix(model: TrafficModel, rate_per_day: float) -> TypeMarkovChain:
    """The bucket matrix whose mean rate is nearest on a log scale.

    Ties go to the lower-rate bucket.
    """
    if not rate_per_day > 0:
        raise ValueError(f"rate_per_day must be positive, got {rate_per_day!r}")
    target = math.log(rate_per_day)
    best = None
    best_dist = math.inf
    for chain in model.buckets:
        dist = abs(math.log(chain.rate_per_day) - target)
        if dist < best_dist:
            best, best_dist = chain, dist
    return best


def bucket_index(model: TrafficModel, rate_per_day: float) -> int:
    return model.buckets.index(select_matrix(model, rate_per_day))


def sample_imd(model: ImdModel, rng: np.random.Generator) -> float:
    """One inter-message delay; draws above the long-gap cutoff are redrawn."""
    scale = 1.0 / model.rate_per_second
    while True:
        x = rng.exponential(scale)
        if x <= model.long_gap_cutoff:
            return float(x)


def sample_imds(model: ImdModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`sample_imd`: ``n`` draws, same distribution."""
    scale = 1.0 / model.rate_per_second
    out = np.empty(0)
    while out.size < n:
        block = rng.exponential(scale, size=max(16, 2 * (n - out.size)))
        out = np.concatenate([out, block[block <= model.long_gap_cutoff]])
    return out[:n]


def sample_size(model: SizeModel, mtype: MessageType, rng: np.random.Generator) -> int:
    """Inverse-CCDF draw for one message of type ``mtype``, in bytes."""
    t = model[mtype]
    size = float(t.quantile(rng.random()))
    return int(min(max(round(size), t.min_bytes), t.max_bytes))


def sample_sizes(model: SizeModel, types: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    types = np.asarray(types)
    u = rng.random(types.size)
    out = np.empty(types.size, dtype=np.int64)
    for mtype in MessageType:
        mask = types == mtype
        if mask.any():
            t = model[mtype]
            out[mask] = np.clip(np.rint(t.quantile(u[mask])), t.min_bytes, t.max_bytes)
    return out


def sample_latency(model: LatencyModel, rng: np.random.Generator) -> float:
    """Laplace(mu, b) restricted to non-negative values by rejection."""
    while True:
        x = rng.laplace(model.mu, model.b)
        if x >= 0:
            return float(x)


def sample_latencies(model: LatencyModel, n: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty(0)
    while out.size < n:
        block = rng.laplace(model.mu, model.b, size=max(16, 2 * (n - out.size)))
        out = np.concatenate([out, block[block >= 0]])
    return out[:n]


# -- loading ----------------------------------------------------------------

def _require(table: dict, key: str, path, location: str):
    if key not in table:
        raise ModelFormatError(f"missing key {key!r}", path, location)
    return table[key]


def _positive(value, path, location: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ModelFormatError(f"expected a number, got {value!r}", path, location) from None
    if not v > 0:
        raise ModelFormatError(f"must be strictly positive, got {v!r}", path, location)
    return v


def _load_sizes(doc: dict, path) -> SizeModel:
    sizes = _require(doc, "sizes", path, "sizes")
    types = {}
    for mtype in MessageType:
        loc = f"sizes.{mtype.label}"
        entry = _require(sizes, mtype.label, path, loc)
        lo = int(_positive(_require(entry, "min_bytes", path, loc), path, loc + ".min_bytes"))
        hi = int(_positive(_require(entry, "max_bytes", path, loc), path, loc + ".max_bytes"))
        mean = _positive(_require(entry, "mean_bytes", path, loc), path, loc + ".mean_bytes")
        if not lo <= mean <= hi:
            raise ModelFormatError(f"need min <= mean <= max, got {lo}, {mean}, {hi}", path, loc)
        table = np.asarray(_require(entry, "ccdf", path, loc), dtype=float)
        if table.ndim != 2 or table.shape[1] != 2 or len(table) == 0:
            raise ModelFormatError("ccdf must be a non-empty list of [x, survival] pairs", path, loc + ".ccdf")
        x, s = table[:, 0].copy(), table[:, 1].copy()
        if np.any(x < 0) or np.any(x > 1) or np.any(s < 0) or np.any(s > 1):
            raise ModelFormatError("ccdf breakpoints must lie in [0, 1]", path, loc + ".ccdf")
        if len(x) > 1:
            if np.any(np.diff(x) <= 0):
                k = int(np.argmax(np.diff(x) <= 0)) + 1
                raise ModelFormatError(f"ccdf sizes not increasing at breakpoint {k}", path, loc + ".ccdf")
            if np.any(np.diff(s) > 0):
                k = int(np.argmax(np.diff(s) > 0)) + 1
                raise ModelFormatError(f"ccdf not monotone non-increasing at breakpoint {k}", path, loc + ".ccdf")
            if s[0] != 1.0 or s[-1] != 0.0:
                raise ModelFormatError("ccdf must run from survival 1 to survival 0", path, loc + ".ccdf")
        x.flags.writeable = False
        s.flags.writeable = False
        types[mtype] = TypeSizes(lo, hi, mean, x, s)
    return SizeModel(types)


def _load_chain(entry: dict, initial: np.ndarray, path, loc: str) -> TypeMarkovChain:
    label = str(_require(entry, "label", path, loc))
    loc = f"matrices[{label}]"
    rows = np.asarray(_require(entry, "rows", path, loc), dtype=float)
    if rows.shape != (5, 5):
        raise ModelFormatError(f"transition matrix must be 5x5, got shape {rows.shape}", path, loc)
    if np.any(rows < 0) or np.any(rows > 1):
        raise ModelFormatError("transition probabilities must lie in [0, 1]", path, loc)
    for i, row in enumerate(rows):
        total = float(row.sum())
        if abs(total - 1.0) > ROW_SUM_TOLERANCE:
            raise ModelFormatError(
                f"row {i} ({MessageType(i).label}) sums to {total!r}", path, f"{loc}.rows[{i}]")
    rate = entry.get("rate_per_day")
    if rate is not None:
        rate = _positive(rate, path, loc + ".rate_per_day")
    rows.flags.writeable = False
    return TypeMarkovChain(label, rows, initial, rate)


def parse_model(doc: dict, path: str | Path | None = None) -> TrafficModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ModelFormatError(f"unsupported format {doc.get('format')!r} (want {MODEL_FORMAT!r})", path, "format")
    types = _require(doc, "types", path, "types")
    order = _require(types, "order", path, "types")
    if [MessageType.from_label(o) for o in order] != list(MessageType):
        raise ModelFormatError(f"type order must be Text, Photo, Video, File, Audio; got {order}", path, "types.order")
    initial = np.asarray(_require(types, "initial", path, "types"), dtype=float)
    if initial.shape != (5,) or np.any(initial < 0) or abs(initial.sum() - 1.0) > ROW_SUM_TOLERANCE:
        raise ModelFormatError("initial distribution must be 5 non-negative values summing to 1", path, "types.initial")
    initial.flags.writeable = False

    imd_t = _require(doc, "imd", path, "imd")
    imd = ImdModel(
        rate_per_day=_positive(_require(imd_t, "rate_per_day", path, "imd"), path, "imd.rate_per_day"),
        rate_per_second=_positive(_require(imd_t, "rate_per_second", path, "imd"), path, "imd.rate_per_second"),
        merge_threshold=_positive(imd_t.get("merge_threshold", 0.5), path, "imd.merge_threshold"),
        long_gap_cutoff=_positive(imd_t.get("long_gap_cutoff", 7200.0), path, "imd.long_gap_cutoff"),
    )
    if not imd.merge_threshold < imd.long_gap_cutoff:
        raise ModelFormatError("merge_threshold must be below long_gap_cutoff", path, "imd")

    lat_t = _require(doc, "latency", path, "latency")
    latency = LatencyModel(float(_require(lat_t, "mu", path, "latency")),
                           _positive(_require(lat_t, "b", path, "latency"), path, "latency.b"))

    chains = [_load_chain(e, initial, path, f"matrices[{i}]")
              for i, e in enumerate(_require(doc, "matrices", path, "matrices"))]
    aggregate = [c for c in chains if c.rate_per_day is None]
    buckets = sorted((c for c in chains if c.rate_per_day is not None), key=lambda c: c.rate_per_day)
    if len(aggregate) != 1:
        raise ModelFormatError("need exactly one aggregate matrix (no rate_per_day)", path, "matrices")
    if len(buckets) != 5:
        raise ModelFormatError(f"need five rate-bucket matrices, got {len(buckets)}", path, "matrices")

    return TrafficModel(_load_sizes(doc, path), imd, latency, aggregate[0], tuple(buckets),
                        source=str(path) if path else "")


def load_model(path: str | Path) -> TrafficModel:
    """Read and validate a model file."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ModelFormatError(str(exc), path) from None
    return parse_model(doc, path)


_DEFAULT: TrafficModel | None = None


def default_model_path() -> Path:
    return Path(str(resources.files("imta") / "data" / "default_model.toml"))


def default_model() -> TrafficModel:
    """The bundled model, loaded once."""
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_model(default_model_path())
    return _DEFAULT
