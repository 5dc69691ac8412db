import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_eer, count_apcer, count_bpcer
from padkit.metrics import (
    ATTACK,
    GENUINE,
    ScoreRecord,
    UndefinedMetricError,
    apcer,
    bpcer,
    compute_report,
    eer,
    read_report,
    read_scores,
    roc_points,
    write_report,
    write_scores,
)


def recs(genuine, attacks):
    out = [ScoreRecord(f"g{i}", p, GENUINE) for i, p in enumerate(genuine)]
    out += [ScoreRecord(f"a{i}", p, ATTACK, attack_type=1) for i, p in enumerate(attacks)]
    return out


def test_apcer_examples():
    assert apcer(recs([0.2], [0.9, 0.8, 0.1]), 0.5) == pytest.approx(1 / 3)
    assert apcer(recs([0.2], [0.9, 0.8]), 0.5) == 0.0
    with pytest.raises(UndefinedMetricError):
        apcer(recs([0.1], []), 0.5)


def test_bpcer_examples():
    assert bpcer(recs([0.1, 0.6], [0.9]), 0.5) == 0.5
    assert bpcer(recs([0.1, 0.4], [0.9]), 0.5) == 0.0
    assert bpcer(recs([0.1, 0.4], [0.9]), 0.0) == 1.0
    with pytest.raises(UndefinedMetricError):
        bpcer(recs([], [0.3]), 0.5)


def test_threshold_ties_count_as_attack():
    assert apcer(recs([0.1], [0.5]), 0.5) == 0.0
    assert bpcer(recs([0.5], [0.9]), 0.5) == 1.0


def test_eer_examples():
    assert eer(recs([0.1] * 4, [0.9] * 4))[0] == 0.0
    assert eer(recs([0.1, 0.4, 0.6], [0.3, 0.7, 0.8]))[0] == pytest.approx(1 / 3)
    with pytest.raises(UndefinedMetricError):
        eer(recs([0.1, 0.2], []))


def test_eer_reflection_symmetry():
    rng = np.random.default_rng(3)
    for _ in range(200):
        g = np.round(rng.random(rng.integers(1, 30)), 2)
        a = np.round(rng.random(rng.integers(1, 30)), 2)
        e1 = eer(recs(g, a))[0]
        e2 = eer(recs(1 - a, 1 - g))[0]
        assert e1 == pytest.approx(e2, abs=1e-12)


def test_roc_points_counting_and_endpoints():
    g, a = [0.1, 0.4, 0.6], [0.3, 0.7, 0.8]
    pts = roc_points(recs(g, a))
    assert len(pts) == 6 + 2
    assert pts[0][1:] == (1.0, 0.0)
    assert pts[-1][1:] == (0.0, 1.0)
    ts = [p[0] for p in pts]
    assert all(x > y for x, y in zip(ts, ts[1:]))


def test_roc_matches_per_threshold_calls():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = rng.integers(2, 40)
        probs = np.round(rng.random(n), rng.integers(1, 4))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = recs(probs[labels == 0], probs[labels == 1])
        att, gen = probs[labels == 1], probs[labels == 0]
        for t, ap, bp in roc_points(scores):
            assert ap == count_apcer(att, t)
            assert bp == count_bpcer(gen, t)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=60),
    st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=60),
)
def test_heavy_ties(gen, att):
    e, t = eer(recs(gen, att))
    ref, _ = brute_eer(att, gen)
    assert 0.0 <= e <= 1.0
    assert e == pytest.approx(ref, abs=1e-9)
    pts = roc_points(recs(gen, att))
    assert len(pts) == len(set(gen + att)) + 2


def test_monotone_rates():
    rng = np.random.default_rng(5)
    s = recs(rng.random(50), rng.random(50))
    ts = np.linspace(-0.1, 1.1, 101)
    a = [apcer(s, t) for t in ts]
    b = [bpcer(s, t) for t in ts]
    assert all(y >= x for x, y in zip(a, a[1:]))
    assert all(y <= x for x, y in zip(b, b[1:]))


def test_random_scores_eer_near_half():
    rng = np.random.default_rng(0)
    probs = rng.random(10000)
    labels = rng.permutation(np.repeat([0, 1], 5000))
    e, _ = eer((probs, labels))
    assert abs(e - 0.5) <= 0.1


def test_score_and_report_files_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    s = recs(rng.random(7), rng.random(5))
    write_scores(s, tmp_path / "s.csv")
    assert read_scores(tmp_path / "s.csv") == s
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "id,subject_id,attack_type,true_label,attack_prob"
    rep = compute_report(s, mode="per_video_dfs")
    write_report(rep, tmp_path / "r.json")
    assert read_report(tmp_path / "r.json") == rep
    assert rep.roc[0]["bpcer"] == 0.0 and rep.roc[-1]["tpr"] == 1.0
