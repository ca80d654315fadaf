import numpy as np
import pytest

from imta.detect_event import EventDetector
from imta.detect_shape import ShapeDetector
from imta.evaluation import (DEFAULT_THRESHOLDS, LabeledPair, PairScore, active_time, associated_pairs, auc,
                             auc_exact, cascade, format_scores, non_associated_pairs, observation_window,
                             parse_scores, read_scores, roc, score_corpus, tp_at_fp, write_scores)
from imta.flow import Event, Flow
from imta.synth import CorpusConfig, make_pair_corpus


@pytest.fixture(scope="module")
def corpus(model):
    return make_pair_corpus(model, 60, CorpusConfig(duration=6 * 3600, seed=31))


def _scores(pos, neg):
    return ([PairScore(f"a{i:06d}", True, s, 900, "x") for i, s in enumerate(pos)]
            + [PairScore(f"n{i:06d}", False, s, 900, "x") for i, s in enumerate(neg)])


def test_pair_construction(corpus):
    pos = associated_pairs(corpus)
    neg = non_associated_pairs(corpus, 10)
    assert len(pos) == 60 and all(p.associated for p in pos)
    assert len(neg) == 600
    ids = [p.pair_id for p in neg]
    assert ids == sorted(ids) and len(set(ids)) == len(ids)
    for p in neg:
        a, b = p.pair_id[1:].split("-")
        assert a != b and int(a) % 5 == int(b) % 5  # same bucket


def test_non_associated_small_bucket(model):
    c = make_pair_corpus(model, 3, CorpusConfig(duration=600))
    assert non_associated_pairs(c, 10) == []


def test_active_time_compresses_long_gaps():
    all_t = np.array([0.0, 10.0, 10_010.0, 10_020.0])
    np.testing.assert_allclose(active_time(all_t, all_t, 7200, 10), [0, 10, 20, 30])
    np.testing.assert_allclose(active_time(np.array([5.0]), all_t, 7200, 10), [5.0])


def test_observation_window():
    ch = Flow(tuple(Event(t, 100) for t in (100.0, 200.0, 2000.0)))
    us = Flow(tuple(Event(t, 100) for t in (99.0, 201.0, 5.0 + 2000)))
    c, u = observation_window(ch, us, 900)
    assert c.times.tolist() == [10.0, 110.0]
    assert u.times.tolist() == [9.0, 111.0]


def test_identical_pairs_score_one(corpus):
    same = [LabeledPair(f"a{p.index:06d}", p.channel, p.channel, True) for p in corpus]
    for det in (EventDetector(), ShapeDetector()):
        s = score_corpus(same, det, 900)
        assert all(x.score == pytest.approx(1.0) for x in s)


def test_longer_windows_do_not_hurt(corpus):
    pairs = associated_pairs(corpus) + non_associated_pairs(corpus, 5)
    a = [auc_exact(score_corpus(pairs, EventDetector(), L)) for L in (900, 3600)]
    assert a[1] >= a[0]


def test_score_files_deterministic(corpus, tmp_path):
    pairs = associated_pairs(corpus)[:10] + non_associated_pairs(corpus, 2)[:20]
    for name in ("s1.csv", "s2.csv"):
        write_scores(score_corpus(pairs, ShapeDetector(), 180), tmp_path / name)
    assert (tmp_path / "s1.csv").read_bytes() == (tmp_path / "s2.csv").read_bytes()


def test_parallel_matches_serial(corpus):
    pairs = associated_pairs(corpus)[:6] + non_associated_pairs(corpus, 1)[:6]
    assert score_corpus(pairs, EventDetector(), 900, jobs=2) == score_corpus(pairs, EventDetector(), 900)


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        score_corpus([], EventDetector(), 900)


def test_roc_separable():
    c = roc(_scores([1.0] * 5, [0.0] * 7), [0.5])
    assert c.tp.tolist() == [1.0] and c.fp.tolist() == [0.0]
    assert auc(roc(_scores([1.0] * 5, [0.0] * 7))) == pytest.approx(1.0)


def test_roc_identical_scores():
    c = roc(_scores([0.4] * 5, [0.4] * 9))
    np.testing.assert_array_equal(c.tp, c.fp)
    assert auc(c) == pytest.approx(0.5)
    assert auc_exact(_scores([0.4] * 5, [0.4] * 9)) == 0.5


def test_roc_degenerate():
    with pytest.raises(ValueError):
        roc(_scores([1.0], []))


def test_default_grid():
    assert DEFAULT_THRESHOLDS.size == 512 and DEFAULT_THRESHOLDS[0] == 0 and DEFAULT_THRESHOLDS[-1] == 1


def test_auc_exact_against_pairwise_oracle(rng):
    pos = rng.integers(0, 20, 40) / 20
    neg = rng.integers(0, 20, 60) / 20
    ref = np.mean([[1.0 if p > n else 0.5 if p == n else 0.0 for n in neg] for p in pos])
    assert auc_exact(_scores(pos, neg)) == pytest.approx(ref)


def test_tp_at_fp():
    c = roc(_scores([0.9, 0.8, 0.3], [0.1, 0.2, 0.85]), [0.0, 0.25, 0.5, 0.86])
    assert tp_at_fp(c, 0.0) == (pytest.approx(1 / 3), 0.86)
    assert tp_at_fp(c, 0.34) == (1.0, 0.25)
    assert tp_at_fp(roc(_scores([0.5], [0.9]), [0.0]), 0.5)[0] == 0.0


def test_cascade_disabled_second_stage():
    short = _scores([0.9, 0.2], [0.7, 0.1])
    long = _scores([0.1, 0.1], [0.1, 0.1])
    r = cascade(short, long, 0.5, 0.0)
    assert (r.tp, r.fp) == (r.stage1_tp, r.stage1_fp) == (0.5, 0.5)
    assert r.survivors == 2


def test_cascade_mismatch():
    with pytest.raises(ValueError):
        cascade(_scores([0.9], [0.1]), _scores([0.9, 0.8], [0.1]), 0.5, 0.5)


def test_cascade_on_corpus(corpus):
    pairs = associated_pairs(corpus) + non_associated_pairs(corpus, 10)
    short = score_corpus(pairs, EventDetector(), 180)
    long = score_corpus(pairs, EventDetector(), 3600)
    r = cascade(short, long, 0.0, 0.3)
    assert r.fp <= min(r.stage1_fp, np.mean([s.score > 0.3 for s in long if not s.associated]))
    assert r.fp < r.stage1_fp
    assert r.tp >= r.stage1_tp - 0.05


def test_score_csv_round_trip(tmp_path):
    s = _scores([0.25, 1.0], [0.0])
    p = tmp_path / "s.csv"
    write_scores(s[:2], p)
    write_scores(s[2:], p, append=True)
    back = read_scores(p)
    assert [(x.pair_id, x.associated, x.score) for x in back] == [(x.pair_id, x.associated, x.score) for x in s]
    assert format_scores(s).splitlines()[0] == "pair_id,associated,detector,length_s,score"
    with pytest.raises(ValueError):
        parse_scores("nope\n")
