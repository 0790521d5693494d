import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aem.evaluation import (MetricError, ScoredSegment, build_report, default_grid, eda,
                            format_table, frame_auc, precision, random_baseline, rank_auc,
                            read_scores, run_ablation, write_report, write_scores)


def segs(pairs, T=1):
    return [ScoredSegment(f"s{i}", T if np.isscalar(T) else T[i], y, s)
            for i, (y, s) in enumerate(pairs)]


def brute_force_auc(segments):
    pos = [x.score for x in segments for _ in range(x.T) if x.label == 1]
    neg = [x.score for x in segments for _ in range(x.T) if x.label == 0]
    twice_wins = sum(2 * (p > n) + (p == n) for p in pos for n in neg)
    return float(Fraction(100 * twice_wins, 2 * len(pos) * len(neg)))


def test_auc_examples():
    assert frame_auc([ScoredSegment("a", 2, 1, 0.9), ScoredSegment("b", 3, 0, 0.1)]) == 100.0
    assert frame_auc(segs([(1, 0.4), (0, 0.4), (0, 0.4)])) == 50.0
    with pytest.raises(MetricError):
        frame_auc(segs([(1, 0.4), (1, 0.5)]))


def test_auc_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 6, size=n) / 5.0  # coarse values force ties
        T = rng.integers(1, 5, size=n)
        s = [ScoredSegment(str(i), int(T[i]), int(labels[i]), float(scores[i])) for i in range(n)]
        assert frame_auc(s) == brute_force_auc(s)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    y = np.r_[0, 1, rng.integers(0, 2, size=20)]
    s = rng.uniform(size=22)
    assert rank_auc(s, y) == rank_auc(np.exp(3 * s) - 7, y)


def test_eda_examples():
    assert eda(segs([(1, 0.6), (0, 0.4)]), [0.25, 0.5, 0.75]) == pytest.approx(200 / 3)
    assert eda(segs([(1, 1.0), (0, 0.0)])) == 100.0
    assert eda(segs([(1, 1.0), (1, 1.0)])) == 100.0
    with pytest.raises(MetricError):
        eda(segs([(1, 1.0)]), [0.0, 0.5])
    with pytest.raises(MetricError):
        eda(segs([(1, 1.0)]), [])


def test_precision_examples():
    assert precision(segs([(1, 0.9), (0, 0.9), (1, 0.1)]), [0.5]) == 50.0
    assert precision(segs([(1, 1.0), (0, 0.0)])) == 100.0
    with pytest.raises(MetricError):
        precision(segs([(1, 0.1), (0, 0.1)]), [0.5])


def test_random_baseline():
    rng = np.random.default_rng(1)
    s = [ScoredSegment(str(i), 1, int(rng.integers(0, 2)), 0.0) for i in range(10_000)]
    rep = random_baseline(s, seed=3)
    assert abs(rep["auc"] - 50) <= 2 and abs(rep["eda"] - 50) <= 2
    assert random_baseline(s, seed=3) == rep


def test_report_and_files(tmp_path):
    s = segs([(1, 0.9), (0, 0.2), (0, 0.3)], T=[2, 3, 1])
    rep = build_report(s, variant="full", seed=0, config_hash="abc")
    assert 0 <= rep["auc"] <= 100 and 0 <= rep["eda"] <= 100 and rep["num_frames"] == 6
    assert len(rep["curve"]["thresholds"]) == len(default_grid())
    write_report(rep, tmp_path)
    assert json.loads((tmp_path / "report.json").read_text())["auc"] == rep["auc"]
    assert (tmp_path / "report.csv").read_text().splitlines()[0].startswith("variant,seed")
    assert len((tmp_path / "curve.csv").read_text().splitlines()) == 50


def test_scores_round_trip(tmp_path):
    s = segs([(1, 0.9), (0, 0.25)], T=[2, 3])
    for x in s:
        x.action = "cut cucumber"
        x.extra = {"marginal": 0.5}
    write_scores(s, tmp_path / "scores.csv", extra_columns=["marginal"])
    head = (tmp_path / "scores.csv").read_text().splitlines()[0]
    assert head.startswith("segment_id,action,label,score")
    back = read_scores(tmp_path / "scores.csv")
    assert [(x.segment_id, x.T, x.label, x.score, x.extra) for x in back] == \
           [(x.segment_id, x.T, x.label, x.score, x.extra) for x in s]


def test_scores_out_of_range_rejected(tmp_path):
    p = tmp_path / "scores.csv"
    p.write_text("segment_id,action,label,score\na,cut,1,1.5\n")
    with pytest.raises(MetricError):
        read_scores(p)


def test_ablation_needs_two_seeds(tiny_dataset):
    with pytest.raises(MetricError):
        run_ablation(tiny_dataset, ["full"], [0])


def test_format_table():
    res = {"table": [{"variant": "full", "auc_mean": 80.0, "auc_std": 1.0, "eda_mean": 60.0,
                      "eda_std": 2.0}],
           "comparisons": [{"better": "full", "worse": "no_effect", "component": "x",
                            "auc_diff": 6.0, "holds": True}]}
    out = format_table(res)
    assert "full" in out and "+6.00" in out
