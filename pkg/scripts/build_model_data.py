#!/usr/bin/env python3
"""Regenerate ``src/imta/data/default_model.toml``.

Size CCDFs are tabulated from a log-normal shape truncated to each type's
observed range; the location parameter is solved so that the tabulated
(piecewise-linear) CCDF has exactly the published average size. The shape
parameters below are the only free choices and are documented in README.md.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy import optimize, stats

KB = 1024
MB = 1024 * KB
GB = 1024 * MB

TYPES = ["Text", "Photo", "Video", "File", "Audio"]

# (min bytes, max bytes, mean bytes, log-normal sigma)
SIZE_TABLE = {
    "Text": (1, 4095, 306.61, 1.2),
    "Photo": (2.40 * KB, 378.68 * KB, 91.33 * KB, 0.8),
    "Video": (10.16 * KB, 1.56 * GB, 35.49 * MB, 0.5),
    "File": (2.54 * KB, 1.88 * MB, 52.56 * KB, 1.3),
    "Audio": (2.83 * KB, 98.07 * MB, 4.44 * MB, 1.9),
}

# message-type frequencies (Text, Photo, Video, File, Audio)
INITIAL = [0.294, 0.480, 0.154, 0.021, 0.051]

MATRICES = {
    "aggregate": (None, [
        [0.40, 0.47, 0.10, 0.01, 0.02],
        [0.29, 0.53, 0.11, 0.02, 0.05],
        [0.19, 0.36, 0.40, 0.02, 0.03],
        [0.17, 0.59, 0.13, 0.09, 0.02],
        [0.14, 0.40, 0.10, 0.01, 0.35],
    ]),
    "P1": (2.31, [
        [0.48, 0.41, 0.07, 0.00, 0.04],
        [0.28, 0.52, 0.11, 0.01, 0.08],
        [0.12, 0.32, 0.49, 0.00, 0.07],
        [0.14, 0.43, 0.14, 0.00, 0.29],
        [0.13, 0.44, 0.06, 0.00, 0.38],
    ]),
    "P2": (7.68, [
        [0.55, 0.28, 0.10, 0.02, 0.05],
        [0.18, 0.59, 0.11, 0.01, 0.12],
        [0.13, 0.35, 0.45, 0.01, 0.07],
        [0.17, 0.36, 0.14, 0.33, 0.00],
        [0.19, 0.34, 0.10, 0.03, 0.33],
    ]),
    "P3": (18.34, [
        [0.45, 0.38, 0.12, 0.02, 0.04],
        [0.22, 0.55, 0.13, 0.03, 0.07],
        [0.15, 0.35, 0.42, 0.04, 0.05],
        # published row reads 0.51 in the File column (sum 1.46)
        [0.15, 0.54, 0.20, 0.05, 0.06],
        [0.13, 0.31, 0.10, 0.03, 0.43],
    ]),
    "P4": (39.47, [
        [0.38, 0.44, 0.14, 0.02, 0.02],
        [0.24, 0.50, 0.15, 0.03, 0.09],
        [0.17, 0.35, 0.43, 0.03, 0.03],
        [0.20, 0.55, 0.15, 0.09, 0.01],
        [0.09, 0.46, 0.11, 0.01, 0.33],
    ]),
    "P5": (130.57, [
        [0.40, 0.48, 0.09, 0.01, 0.01],
        [0.32, 0.53, 0.10, 0.02, 0.04],
        [0.21, 0.37, 0.39, 0.02, 0.02],
        [0.16, 0.63, 0.11, 0.08, 0.01],
        [0.16, 0.41, 0.10, 0.01, 0.32],
    ]),
}

N_BREAKPOINTS = 40


def trapezoid_mean(x: np.ndarray, s: np.ndarray) -> float:
    return float(x[0] + np.sum(np.diff(x) * (s[:-1] + s[1:]) / 2))


def ccdf_table(lo: float, hi: float, mean: float, sigma: float):
    y = np.geomspace(lo, hi, N_BREAKPOINTS)
    x = y / hi
    x[-1] = 1.0

    def table(mu: float) -> np.ndarray:
        dist = stats.lognorm(s=sigma, scale=math.exp(mu))
        f_lo, f_hi = dist.cdf(lo), dist.cdf(hi)
        s = (f_hi - dist.cdf(y)) / (f_hi - f_lo)
        s[0], s[-1] = 1.0, 0.0
        return np.clip(s, 0.0, 1.0)

    target = mean / hi
    mu = optimize.brentq(
        lambda m: trapezoid_mean(x, table(m)) - target,
        math.log(lo) - 5 * sigma,
        math.log(hi) + 5 * sigma,
        xtol=1e-12,
    )
    s = table(mu)
    return x, s, math.exp(mu)


def fmt_row(row) -> str:
    return "[" + ", ".join(repr(float(v)) for v in row) + "]"


def main() -> None:
    out = [
        "# IM traffic model. Regenerate with scripts/build_model_data.py.",
        'format = "imta-model/1"',
        "",
        "[types]",
        'order = ["Text", "Photo", "Video", "File", "Audio"]',
        f"initial = {fmt_row(INITIAL)}",
        "",
        "[imd]",
        "# digitized exponential fit for channels at 130 messages/day",
        "rate_per_day = 130.0",
        f"rate_per_second = {130.0 / 86400.0!r}",
        "merge_threshold = 0.5",
        "long_gap_cutoff = 7200.0",
        "",
        "[latency]",
        "# not published; defaults",
        "mu = 0.2",
        "b = 0.1",
        "",
    ]
    for name in TYPES:
        lo, hi, mean, sigma = SIZE_TABLE[name]
        x, s, median = ccdf_table(lo, hi, mean, sigma)
        out += [
            f"[sizes.{name}]",
            f"# log-normal shape sigma={sigma}, untruncated median {median:.0f} B",
            f"min_bytes = {round(lo)}",
            f"max_bytes = {round(hi)}",
            f"mean_bytes = {mean!r}",
            "ccdf = [",
        ]
        out += [f"  [{xi!r}, {si!r}]," for xi, si in zip(x.tolist(), s.tolist())]
        out += ["]", ""]
    for label, (rate, rows) in MATRICES.items():
        m = np.asarray(rows, dtype=float)
        m = m / m.sum(axis=1, keepdims=True)
        out += ["[[matrices]]", f'label = "{label}"']
        if rate is not None:
            out.append(f"rate_per_day = {rate!r}")
        out.append("rows = [")
        out += ["  " + fmt_row(r) + "," for r in m]
        out += ["]", ""]
    path = Path(__file__).resolve().parents[1] / "src" / "imta" / "data" / "default_model.toml"
    path.write_text("\n".join(out))
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
