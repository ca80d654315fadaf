import math
from pathlib import Path

import mpmath
import numpy as np
import pytest

from imta.model import (ImdModel, LatencyModel, MessageType, ModelFormatError, TypeSizes, default_model_path,
                        load_model, parse_model, sample_imd, sample_imds, sample_latencies, sample_latency,
                        sample_size, sample_sizes, select_matrix)

KB = 1024

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


def _doc():
    return tomllib.loads(default_model_path().read_text())


def test_message_type_codes():
    assert [t.value for t in MessageType] == [0, 1, 2, 3, 4]
    assert [t.label for t in MessageType] == ["Text", "Photo", "Video", "File", "Audio"]
    assert MessageType.from_label("Photo") is MessageType.PHOTO


def test_bundled_aggregate_text_to_photo(model):
    # 0.47 as published; the row already sums to 1 so renormalizing leaves it alone
    assert model.aggregate.matrix[MessageType.TEXT, MessageType.PHOTO] == pytest.approx(0.47, abs=1e-12)


def test_bundled_photo_mean(model):
    assert model.sizes.mean(MessageType.PHOTO) == pytest.approx(91.33 * KB)
    assert model.sizes[MessageType.PHOTO].ccdf_mean() == pytest.approx(91.33 * KB, rel=1e-6)


def test_rows_sum_to_one(model):
    for chain in (model.aggregate, *model.buckets):
        np.testing.assert_allclose(chain.matrix.sum(axis=1), 1.0, atol=1e-9)
        assert (chain.matrix >= 0).all()


def test_bucket_rates(model):
    assert model.bucket_rates == (2.31, 7.68, 18.34, 39.47, 130.57)


def test_row_sum_violation_names_row():
    doc = _doc()
    doc["matrices"][2]["rows"][3] = [0.1, 0.2, 0.3, 0.2, 0.1]
    with pytest.raises(ModelFormatError, match=r"row 3"):
        parse_model(doc, "bad.toml")


def test_non_monotone_ccdf_rejected():
    doc = _doc()
    ccdf = doc["sizes"]["Photo"]["ccdf"]
    ccdf[5][1], ccdf[6][1] = ccdf[6][1], ccdf[5][1] + 0.1
    with pytest.raises(ModelFormatError, match="Photo"):
        parse_model(doc, "bad.toml")


def test_load_model_malformed_file(tmp_path):
    p = tmp_path / "m.toml"
    p.write_text("format = [unclosed\n")
    with pytest.raises(ModelFormatError):
        load_model(p)


def test_wrong_version_rejected():
    doc = _doc()
    doc["format"] = "imta-model/9"
    with pytest.raises(ModelFormatError):
        parse_model(doc)


@pytest.mark.parametrize("rate,label", [(130, "P5"), (2.31, "P1"), (1e6, "P5"), (1e-3, "P1"), (18.34, "P3")])
def test_select_matrix(model, rate, label):
    assert select_matrix(model, rate).label == label


def test_select_matrix_tie_goes_low(model):
    mid = math.sqrt(2.31 * 7.68)  # log-scale midpoint
    assert select_matrix(model, mid).label == "P1"


def test_select_matrix_rejects_nonpositive(model):
    with pytest.raises(ValueError):
        select_matrix(model, 0.0)


def _truncated_exp_mean(rate: float, cutoff: float) -> float:
    """E[X | X <= c] by numeric integration."""
    f = lambda x: rate * mpmath.e ** (-rate * x)
    num = mpmath.quad(lambda x: x * f(x), [0, cutoff])
    den = mpmath.quad(f, [0, cutoff])
    return float(num / den)


def test_imd_mean_against_integration_oracle(model):
    imd = model.imd.for_rate(130.0)
    draws = sample_imds(imd, 1_000_000, np.random.default_rng(1))
    oracle = _truncated_exp_mean(imd.rate_per_second, imd.long_gap_cutoff)
    assert draws.max() <= imd.long_gap_cutoff
    assert draws.mean() == pytest.approx(oracle, rel=0.03)
    assert imd.truncated_mean() == pytest.approx(oracle, rel=1e-9)


def test_imd_without_cutoff_is_exponential():
    imd = ImdModel(130.0, 130.0 / 86400, 0.5, math.inf)
    draws = sample_imds(imd, 200_000, np.random.default_rng(2))
    assert draws.mean() == pytest.approx(86400 / 130, rel=0.01)


def test_imd_deterministic(model):
    a = [sample_imd(model.imd, np.random.default_rng(5)) for _ in range(3)]
    b = [sample_imd(model.imd, np.random.default_rng(5)) for _ in range(3)]
    assert a == b
    np.testing.assert_array_equal(sample_imds(model.imd, 50, np.random.default_rng(9)),
                                  sample_imds(model.imd, 50, np.random.default_rng(9)))


def test_text_sizes_in_range(model, rng):
    sizes = sample_sizes(model.sizes, np.zeros(100_000, dtype=int), rng)
    assert sizes.min() >= 1 and sizes.max() <= 4095
    assert 1 <= sample_size(model.sizes, MessageType.TEXT, rng) <= 4095


def test_all_types_within_range(model, rng):
    types = rng.integers(0, 5, size=50_000)
    sizes = sample_sizes(model.sizes, types, rng)
    for t in MessageType:
        lo, hi = model.sizes.size_range(t)
        s = sizes[types == t]
        assert s.min() >= lo and s.max() <= hi


def test_point_mass_ccdf(rng):
    ts = TypeSizes(1000, 1000, 1000.0, np.array([1.0]), np.array([1.0]))
    assert np.all(ts.quantile(rng.random(100)) == 1000.0)


def _piecewise_linear_mean(x, s, scale):
    # integral of the CCDF, summed segment by segment
    total = x[0]
    for i in range(len(x) - 1):
        total += (x[i + 1] - x[i]) * (s[i] + s[i + 1]) / 2
    return total * scale


def test_photo_sample_mean_matches_ccdf(model):
    t = model.sizes[MessageType.PHOTO]
    draws = sample_sizes(model.sizes, np.full(1_000_000, MessageType.PHOTO), np.random.default_rng(3))
    oracle = _piecewise_linear_mean(t.x.tolist(), t.survival.tolist(), t.max_bytes)
    assert draws.mean() == pytest.approx(oracle, rel=0.05)


def test_latency_non_negative(model):
    d = sample_latencies(model.latency, 1_000_000, np.random.default_rng(4))
    assert d.min() >= 0
    assert sample_latency(model.latency, np.random.default_rng(4)) >= 0


def test_latency_degenerate_scale():
    d = sample_latencies(LatencyModel(0.2, 1e-9), 1000, np.random.default_rng(0))
    np.testing.assert_allclose(d, 0.2, atol=1e-6)


def test_latency_median_against_inverse_cdf():
    mu, b = 0.2, 0.1
    # Laplace CDF below the mode is exp((x-mu)/b)/2; condition on x >= 0
    l0 = 0.5 * math.exp(-mu / b)
    target = l0 + (1 - l0) / 2
    oracle = mu - b * math.log(2 * (1 - target)) if target > 0.5 else mu + b * math.log(2 * target)
    d = sample_latencies(LatencyModel(mu, b), 1_000_000, np.random.default_rng(6))
    assert np.median(d) == pytest.approx(oracle, rel=0.02)


def test_model_files_round_trip(tmp_path):
    p = tmp_path / "copy.toml"
    p.write_text(default_model_path().read_text())
    m = load_model(p)
    assert m.imd.merge_threshold == 0.5
    assert m.imd.long_gap_cutoff == 7200.0
    assert m.latency == LatencyModel(0.2, 0.1)
    np.testing.assert_allclose(m.aggregate.initial, [0.294, 0.48, 0.154, 0.021, 0.051], atol=1e-12)
