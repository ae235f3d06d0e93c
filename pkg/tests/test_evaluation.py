import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcacseg.evaluation import (ChallengeWeights, MetricsReport, challenge_score, dice,
                                evaluate_masks, jaccard, read_report, seg_score, write_report)

masks = arrays(np.uint8, (6, 7), elements=st.integers(0, 1))


def test_dice_examples():
    m = np.zeros((4, 4), np.uint8)
    m[:2] = 1
    assert dice(m, m) == 1.0
    assert dice(m, 1 - m) == 0.0
    p = np.zeros((4, 4), np.uint8)
    p[0] = 1
    assert dice(p, m) == pytest.approx(8 / 12, abs=1e-15)


def test_jaccard_examples():
    m = np.zeros((4, 4), np.uint8)
    m[:2] = 1
    p = np.zeros((4, 4), np.uint8)
    p[0] = 1
    assert jaccard(m, m) == 1.0
    assert jaccard(p, m) == 0.5


def test_seg_score_examples():
    m = np.zeros((4, 4), np.uint8)
    m[:2] = 1
    p = np.zeros((4, 4), np.uint8)
    p[0] = 1
    assert seg_score(m, m) == 1.0
    assert seg_score(p, m) == pytest.approx(0.58333, abs=1e-5)
    empty = np.zeros((3, 3), np.uint8)
    assert seg_score(empty, empty) == 1.0 and dice(empty, empty) == 1.0 and jaccard(empty, empty) == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=100, deadline=None)
@given(masks, masks)
def test_metric_properties(p, g):
    d, j = dice(p, g), jaccard(p, g)
    assert 0 <= d <= 1 and 0 <= j <= 1
    assert d == dice(g, p) and j == jaccard(g, p)
    assert j == pytest.approx(d / (2 - d), abs=1e-12)
    perm = np.random.default_rng(0).permutation(p.size)
    assert dice(p.ravel()[perm], g.ravel()[perm]) == d


def test_challenge_score():
    assert challenge_score(0.7776, 0.8020) == pytest.approx(0.79712, abs=1e-12)
    assert challenge_score(0.8858, 0.8527) == pytest.approx(0.85932, abs=1e-12)
    assert challenge_score(0.42, 0.42) == pytest.approx(0.42, abs=1e-15)
    with pytest.raises(ValueError):
        challenge_score(1.2, 0.5)
    with pytest.raises(ValueError):
        ChallengeWeights(0.3, 0.8)


def test_empty_report(tmp_path):
    csv_p, json_p = write_report(MetricsReport(), tmp_path / "r")
    assert csv_p.read_text().strip() == "image_id,domain,dice,jaccard,seg_score"
    assert read_report(tmp_path / "r").summary()["count"] == 0


def test_single_row_report(tmp_path):
    p = np.eye(4, dtype=np.uint8)
    g = np.tril(np.ones((4, 4), np.uint8))
    rep = evaluate_masks([("a", "d0", p, g)])
    write_report(rep, tmp_path / "r")
    back = read_report(tmp_path / "r")
    assert len(back.results) == 1
    assert back.summary()["mean"]["seg_score"] == seg_score(p, g)


def test_report_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pairs = [(f"img{i}", f"d{i % 3}", rng.integers(0, 2, (9, 9)), rng.integers(0, 2, (9, 9)))
             for i in range(12)]
    rep = evaluate_masks(pairs, metadata={"experiment": "test"})
    write_report(rep, tmp_path / "r")
    back = read_report(tmp_path / "r")
    for a, b in zip(rep.results, back.results):
        assert a.image_id == b.image_id and a.domain == b.domain
        for k in ("dice", "jaccard", "seg_score"):
            assert abs(getattr(a, k) - getattr(b, k)) <= 1e-12
    assert back.metadata == {"experiment": "test"}


def test_pooled_mode():
    a = np.zeros((2, 2), np.uint8)
    b = np.ones((2, 2), np.uint8)
    rep = evaluate_masks([("x", "d", a, a), ("y", "d", b, b)], pooled=True)
    assert rep.summary()["mean"]["dice"] == 1.0
    rep = evaluate_masks([("x", "d", b, a), ("y", "d", b, b)], pooled=True)
    assert rep.summary()["mean"]["dice"] == pytest.approx(8 / 12)
