import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instada.filtration import (
    CategoryScoreTable,
    DegenerateCentroidError,
    DualThresholds,
    ImageQualityEntry,
    Verdict,
    category_centroid,
    cosine,
    dual_similarity_verdict,
    image_quality_score,
    nearest_rank_percentile,
    percentile_score,
    proportional_select,
    proportional_threshold,
    score_batch,
)
from oracles import ref_batch, ref_percentile, ref_select


def test_verdict_quadrants():
    t = DualThresholds()
    assert (t.tau_text, t.tau_image) == (0.21, 0.6)
    assert dual_similarity_verdict(0.3, 0.7) == Verdict.KEEP
    assert dual_similarity_verdict(0.1, 0.7) == Verdict.REJECT_TEXT
    assert dual_similarity_verdict(0.3, 0.5) == Verdict.REJECT_IMAGE
    assert dual_similarity_verdict(0.1, 0.5) == Verdict.REJECT_BOTH
    assert dual_similarity_verdict(0.21, 0.61) == Verdict.REJECT_TEXT
    assert dual_similarity_verdict(0.22, 0.6) == Verdict.REJECT_IMAGE


def test_thresholds_range_checked():
    with pytest.raises(ValueError):
        DualThresholds(1.5, 0.6)


def test_cosine_and_centroid():
    assert cosine([1, 0], [0, 1]) == 0.0
    with pytest.raises(ValueError):
        cosine([1, 0], [1, 0, 0])
    c = category_centroid([[1, 0], [0, 1]])
    assert np.allclose(c, [2**-0.5, 2**-0.5])
    with pytest.raises(DegenerateCentroidError):
        category_centroid([[1, 0], [-1, 0]])
    with pytest.raises(ValueError):
        category_centroid([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 5).map(float), min_size=1, max_size=30), st.integers(0, 5).map(float))
def test_percentile_score_matches_count(scores, s):
    assert percentile_score(s, scores) == ref_percentile(s, scores)
    t = CategoryScoreTable()
    for v in scores:
        t.add("c", v)
    assert t.seal().percentile("c", s) == ref_percentile(s, scores)


def test_score_table_lifecycle():
    t = CategoryScoreTable()
    with pytest.raises(ValueError):
        t.add("a", float("nan"))
    t.add("a", 1.0)
    other = CategoryScoreTable()
    other.add("a", 2.0)
    t.merge(other)
    with pytest.raises(RuntimeError):
        t.percentile("a", 1.0)
    t.seal()
    assert t.percentile("a", 1.0) == 50.0
    with pytest.raises(RuntimeError):
        t.add("a", 3.0)
    with pytest.raises(ValueError):
        t.percentile("b", 1.0)


def test_image_quality_score():
    assert image_quality_score([10, 20, 60]) == 30
    with pytest.raises(ValueError):
        image_quality_score([])


@pytest.mark.parametrize(
    "q,expected",
    [(0, 1), (10, 1), (10.0001, 2), (80, 8), (80.5, 9), (100, 10)],
)
def test_nearest_rank(q, expected):
    assert nearest_rank_percentile(list(range(1, 11)), q) == expected


def test_fixture_ten_images_k20_keeps_three():
    entries = [ImageQualityEntry(i, (float(v),), float(v)) for i, v in enumerate(range(10, 101, 10))]
    assert proportional_threshold([e.p_bar for e in entries], 20) == 80
    assert proportional_select(entries, 20) == frozenset({7, 8, 9})
    assert len(proportional_select(entries, 100)) == 10


def test_select_rejects_bad_k():
    e = [ImageQualityEntry(1, (1.0,), 1.0)]
    for k in (0, -1, 101):
        with pytest.raises(ValueError):
            proportional_select(e, k)


def test_ties_are_all_retained():
    entries = [ImageQualityEntry(i, (50.0,), 50.0) for i in range(10)]
    assert len(proportional_select(entries, 20)) == 10


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([5, 20, 50, 100]))
def test_batch_scoring_matches_oracle(seed, k):
    rng = np.random.default_rng(seed)
    batch = {}
    for i in range(int(rng.integers(1, 30))):
        n = int(rng.integers(0, 4))
        batch[i] = [(j, int(rng.integers(0, 3)), float(rng.integers(0, 6)) / 5) for j in range(n)]
    per_image, entries = score_batch(batch)
    ref_pi, ref_means = ref_batch(batch)
    assert per_image.keys() == ref_pi.keys()
    for iid in batch:
        assert per_image[iid] == pytest.approx(ref_pi[iid], abs=1e-9)
    assert {e.image_id: e.p_bar for e in entries} == pytest.approx(ref_means, abs=1e-9)
    if entries:
        kept, _ = ref_select({e.image_id: e.p_bar for e in entries}, k)
        assert proportional_select(entries, k) == kept


def test_equal_exact_means_tie_exactly():
    # 100/3 and 200/3 are inexact in binary, yet their mean must equal the exact 50 of image "b"
    batch = {
        "a": [("a0", 0, 0.1), ("a1", 0, 0.2)],
        "b": [("b0", 1, 0.1)],
        "c": [("c0", 0, 0.3), ("c1", 1, 0.2)],
    }
    _, entries = score_batch(batch)
    p = {e.image_id: e.p_bar for e in entries}
    assert p["a"] == p["b"] == 50.0 and p["c"] == 100.0
    assert proportional_select(entries, 100 * 2 / 3) == {"a", "b", "c"}
