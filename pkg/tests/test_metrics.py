import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salmap.metrics import (
    BinaryMask,
    aggregate,
    auc,
    evaluate_sample,
    pointing_game,
    relevance_mass_accuracy,
    relevance_rank_accuracy,
    render_report,
    sparseness,
    top_k_intersection,
    write_aggregate_json,
    write_per_sample_csv,
)


def mask(rows):
    return BinaryMask(np.array(rows, dtype=bool))


def test_pointing_game_hit_and_miss():
    s = np.array([[0.1, 0.9], [0.3, 0.2]])
    assert pointing_game(s, mask([[0, 1], [0, 0]])) == 1.0
    assert pointing_game(s, mask([[1, 0], [0, 1]])) == 0.0


def test_pointing_game_any_argmax_counts():
    # two global maxima; a hit on either one scores
    s = np.array([[0.9, 0.9], [0.0, 0.0]])
    assert pointing_game(s, mask([[0, 1], [0, 0]])) == 1.0
    assert pointing_game(s, mask([[1, 0], [1, 0]])) == 1.0
    assert pointing_game(s, mask([[0, 0], [1, 1]])) == 0.0


def test_sparseness_fixtures():
    assert sparseness(np.array([0.0, 0.0, 1.0, 1.0])) == pytest.approx(0.5, abs=1e-12)
    assert sparseness(np.array([0.0, 0.0, 0.0, 1.0])) == pytest.approx(0.75, abs=1e-12)
    assert sparseness(np.full(16, 0.37)) == pytest.approx(0.0, abs=1e-12)
    assert sparseness(np.zeros(8)) == 0.0


def test_sparseness_is_scale_invariant_and_monotone():
    v = np.array([0.1, 0.2, 0.3, 0.4])
    assert sparseness(v) == pytest.approx(sparseness(10 * v), abs=1e-12)
    spread_out = np.array([0.25, 0.25, 0.25, 0.25])
    concentrated = np.array([0.0, 0.0, 0.0, 1.0])
    assert sparseness(concentrated) > sparseness(spread_out)


def test_relevance_mass_fixture():
    s = np.array([[0.5, 0.25], [0.25, 0.0]])
    m = mask([[1, 0], [0, 0]])
    assert relevance_mass_accuracy(s, m) == pytest.approx(0.5, abs=1e-15)
    assert relevance_mass_accuracy(np.zeros((2, 2)), m) == 0.0


def test_relevance_rank_fixture():
    s = np.array([[0.9, 0.8], [0.1, 0.2]])
    m = mask([[1, 1], [0, 0]])
    assert relevance_rank_accuracy(s, m) == 1.0
    m2 = mask([[1, 0], [1, 0]])
    # top-2 cells are the first row; only one of them is in the mask
    assert relevance_rank_accuracy(s, m2) == 0.5


def test_top_k_exact_values():
    s = np.array([[0.9, 0.8], [0.7, 0.1]])
    m = mask([[1, 1], [0, 0]])
    assert top_k_intersection(s, m, k=2) == 1.0
    assert top_k_intersection(s, m, k=3) == pytest.approx(2.0 / 3.0)
    with pytest.raises(ValueError):
        top_k_intersection(s, m, k=0)
    with pytest.raises(ValueError):
        top_k_intersection(s, m, k=5)


def test_top_k_breaks_ties_by_row_major_index():
    s = np.array([[0.5, 0.5], [0.5, 0.1]])
    # k=1 must pick cell (0,0), the first of the tied maxima
    assert top_k_intersection(s, mask([[1, 0], [0, 0]]), k=1) == 1.0
    assert top_k_intersection(s, mask([[0, 1], [0, 0]]), k=1) == 0.0
    # k=2 picks (0,0) then (0,1)
    assert top_k_intersection(s, mask([[0, 1], [1, 0]]), k=2) == 0.5


def test_auc_perfect_and_inverted():
    s = np.array([[0.9, 0.8], [0.2, 0.1]])
    m = mask([[1, 1], [0, 0]])
    assert auc(s, m) == 1.0
    assert auc(1.0 - s, m) == 0.0
    # positives {0.9, 0.2} vs negatives {0.8, 0.1}: 3 of 4 pairs ordered
    assert auc(s, mask([[1, 0], [1, 0]])) == 0.75


def test_auc_handles_ties_with_average_ranks():
    s = np.array([0.5, 0.5, 0.5, 0.5]).reshape(2, 2)
    assert auc(s, mask([[1, 0], [0, 1]])) == 0.5


def test_auc_matches_pairwise_counting():
    rng = np.random.default_rng(0)
    for trial in range(200):
        s = rng.integers(0, 6, size=(4, 4)).astype(float) / 5.0
        m = rng.random((4, 4)) < 0.4
        if not m.any() or m.all():
            continue
        pos = s[m].ravel()
        neg = s[~m].ravel()
        wins = sum((pos_v > neg_v) + 0.5 * (pos_v == neg_v) for pos_v in pos for neg_v in neg)
        want = wins / (pos.size * neg.size)
        assert auc(s, BinaryMask(m)) == pytest.approx(want, abs=1e-12)


def test_metrics_reject_empty_or_full_masks_where_undefined():
    s = np.array([[0.1, 0.2], [0.3, 0.4]])
    with pytest.raises(ValueError):
        auc(s, mask([[0, 0], [0, 0]]))
    with pytest.raises(ValueError):
        auc(s, mask([[1, 1], [1, 1]]))
    with pytest.raises(ValueError):
        pointing_game(s, mask([[0, 0], [0, 0]]))


def test_metrics_reject_shape_mismatch():
    with pytest.raises(ValueError):
        pointing_game(np.zeros((2, 2)), mask([[1, 0, 0], [0, 0, 0]]))


def test_evaluate_sample_returns_all_six():
    rng = np.random.default_rng(1)
    s = rng.random((8, 8))
    m = BinaryMask(rng.random((8, 8)) < 0.3)
    row = evaluate_sample_like(s, m)
    assert sorted(row) == sorted(
        ["pointing_game", "sparseness", "relevance_mass", "relevance_rank", "top_k", "auc"]
    )
    assert all(0.0 <= v <= 1.0 for v in row.values())


def evaluate_sample_like(s, m):
    from salmap.tensors import SaliencyMap

    lo, hi = s.min(), s.max()
    normalized = (s - lo) / (hi - lo)
    return evaluate_sample(SaliencyMap(normalized), m, k=10)


def test_evaluate_sample_clamps_top_k():
    from salmap.tensors import SaliencyMap

    s = SaliencyMap(np.array([[0.0, 1.0], [0.5, 0.25]]))
    row = evaluate_sample(s, mask([[0, 1], [0, 0]]), k=10_000)
    assert row["top_k"] == 0.25  # k clamped to 4, one masked cell


def test_aggregate_scales_by_100_and_formats_two_decimals():
    rows = [
        {"pointing_game": 1.0, "sparseness": 0.5, "relevance_mass": 0.25,
         "relevance_rank": 0.75, "top_k": 0.5, "auc": 1.0},
        {"pointing_game": 0.0, "sparseness": 0.25, "relevance_mass": 0.25,
         "relevance_rank": 0.25, "top_k": 0.0, "auc": 0.5},
    ]
    report = aggregate(rows)
    assert report.count == 2
    assert report.aggregates["pointing_game"] == pytest.approx(50.0)
    assert report.aggregates["auc"] == pytest.approx(75.0)
    formatted = report.formatted()
    assert formatted["pointing_game"] == "50.00"
    assert formatted["sparseness"] == "37.50"


def test_csv_and_json_writers_are_deterministic(tmp_path):
    rows = [
        {"pointing_game": 1.0, "sparseness": 1 / 3, "relevance_mass": 0.2,
         "relevance_rank": 0.4, "top_k": 0.6, "auc": 0.8},
    ]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_per_sample_csv(a, "lafam", ["s0"], rows)
    write_per_sample_csv(b, "lafam", ["s0"], rows)
    assert a.read_bytes() == b.read_bytes()
    header = a.read_text().splitlines()[0]
    assert header == "sample_id,method,pointing_game,sparseness,relevance_mass,relevance_rank,top_k,auc"

    ja, jb = tmp_path / "a.json", tmp_path / "b.json"
    write_aggregate_json(ja, "lafam", aggregate(rows))
    write_aggregate_json(jb, "lafam", aggregate(rows))
    assert ja.read_bytes() == jb.read_bytes()


def test_render_report_layout():
    rows = [{"pointing_game": 0.5, "sparseness": 0.5, "relevance_mass": 0.5,
             "relevance_rank": 0.5, "top_k": 0.5, "auc": 0.5}]
    report = aggregate(rows)
    docs = []
    for method in ("lafam", "gradcam"):
        docs.append({"method": method, "samples": 1,
                     "metrics": report.aggregates, "formatted": report.formatted()})
    csv_text, plain = render_report(docs)
    lines = csv_text.strip().splitlines()
    assert lines[0] == "metric,lafam,gradcam"
    assert len(lines) == 7  # header + six metrics
    assert "50.00" in lines[1]
    assert "Pointing-Game" in plain
    assert "higher values are better" in plain
    assert plain.count("50.00") == 12


MONOTONE = (lambda s: s * s, lambda s: 0.5 * s + 0.1)


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_rank_metrics_invariant_under_monotone_maps(seed):
    rng = np.random.default_rng(seed)
    s = rng.random((6, 6))
    m = rng.random((6, 6)) < 0.35
    if not m.any() or m.all():
        return
    bm = BinaryMask(m)
    for fn in MONOTONE:
        t = fn(s)
        assert pointing_game(s, bm) == pointing_game(t, bm)
        assert top_k_intersection(s, bm, k=7) == top_k_intersection(t, bm, k=7)
        assert relevance_rank_accuracy(s, bm) == relevance_rank_accuracy(t, bm)
        assert auc(s, bm) == auc(t, bm)


@given(st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_sparseness_always_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    v = rng.random(rng.integers(2, 50))
    g = sparseness(v)
    assert 0.0 <= g < 1.0
