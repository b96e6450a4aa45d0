import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from advseg.data import CONTOUR, NUCLEUS
from advseg.evaluation import (
    InstanceMap,
    MatchResult,
    aggregate,
    compute_metrics,
    evaluate_labels,
    extract_instances,
    f_measure,
    jaccard,
    match_instances,
    probmap_to_classes,
    read_metrics_csv,
    summary_json,
    touching_pairs_separated,
    write_metrics_csv,
)


def brute_force_match(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    """Every pred x gt pair as Python pixel sets; TP pairs are those above 0.5."""
    def sets(ids):
        out = {}
        for (y, x), v in np.ndenumerate(ids):
            if v:
                out.setdefault(int(v), set()).add((y, x))
        return out

    ps, gs = sets(pred), sets(gt)
    hits = [(p, g) for p, a in ps.items() for g, b in gs.items() if len(a & b) / len(a | b) > 0.5]
    tp_pred = {p for p, _ in hits}
    tp_gt = {g for _, g in hits}
    assert len(tp_pred) == len(tp_gt) == len(hits)
    return len(hits), len(ps) - len(tp_pred), len(gs) - len(tp_gt)


def random_label(rng, size=32) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.normal(size=(size, size)), rng.uniform(1.0, 2.5))
    label = np.zeros((size, size), dtype=np.uint8)
    label[field > np.quantile(field, rng.uniform(0.4, 0.7))] = NUCLEUS
    label[(rng.random((size, size)) < rng.uniform(0.0, 0.2)) & (label == NUCLEUS)] = CONTOUR
    return label


# ------------------------------------------------------------ class maps


def test_probmap_argmax_and_ties():
    p = np.array([[[0.2, 0.7, 0.1], [1 / 3, 1 / 3, 1 / 3]]])
    np.testing.assert_array_equal(probmap_to_classes(p), [[1, 0]])


def test_one_hot_map_is_inverted():
    label = np.random.default_rng(0).integers(0, 3, size=(5, 6))
    np.testing.assert_array_equal(probmap_to_classes(np.eye(3)[label]), label)


@pytest.mark.parametrize("bad", [np.full((2, 2, 3), 0.5), np.zeros((2, 2, 2)), np.full((1, 1, 3), np.nan)])
def test_malformed_probabilities(bad):
    with pytest.raises(ValueError):
        probmap_to_classes(bad)


# -------------------------------------------------------------- instances


def test_contour_line_separates_instances():
    label = np.full((5, 7), NUCLEUS, dtype=np.uint8)
    label[:, 3] = CONTOUR
    assert extract_instances(label).count == 2
    label[:, 3] = NUCLEUS
    assert extract_instances(label).count == 1


def test_empty_map_has_no_instances():
    assert extract_instances(np.zeros((8, 8), dtype=np.uint8)).count == 0


def test_diagonal_pixels_are_separate_instances():
    label = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    assert extract_instances(label).count == 2


def test_instance_ids_follow_raster_order():
    label = np.zeros((4, 6), dtype=np.uint8)
    label[3, 0] = NUCLEUS
    label[0, 5] = NUCLEUS
    ids = extract_instances(label).ids
    assert ids[0, 5] == 1 and ids[3, 0] == 2


# ---------------------------------------------------------------- jaccard


def test_jaccard_examples():
    a = {(0, 0), (0, 1), (0, 2), (0, 3)}
    assert jaccard(a, set(a)) == 1.0
    assert jaccard(a, {(5, 5)}) == 0.0
    assert jaccard(a, {(0, 0), (0, 1), (0, 2), (1, 0)}) == pytest.approx(3 / 5)
    mask = np.zeros((3, 3), bool)
    mask[0] = True
    assert jaccard(mask, mask) == 1.0


def test_jaccard_of_empties_is_an_error():
    with pytest.raises(ValueError):
        jaccard(set(), set())
    with pytest.raises(ValueError):
        jaccard(np.zeros(4, bool), np.zeros(4, bool))


# --------------------------------------------------------------- matching


def _ids(arr):
    arr = np.asarray(arr, dtype=np.int32)
    return InstanceMap(arr, int(arr.max()))


def test_identical_maps_match_fully():
    gt = _ids([[1, 1, 0, 2], [1, 1, 0, 2], [0, 0, 0, 0], [3, 3, 3, 0]])
    m = match_instances(gt, gt)
    assert (m.tp, m.fp, m.fn) == (3, 0, 0)
    assert m.jaccards == [1.0, 1.0, 1.0]


def test_split_in_equal_halves_is_not_a_match():
    gt = _ids([[1, 1, 1, 1]])
    pred = _ids([[1, 1, 2, 2]])
    m = match_instances(pred, gt)
    assert (m.tp, m.fp, m.fn) == (0, 2, 1)


def test_partial_cover_plus_spurious_blob():
    gt = _ids([[1, 1, 1, 1, 1, 0, 0, 0]])
    pred = _ids([[1, 1, 1, 0, 0, 0, 2, 2]])
    m = match_instances(pred, gt)
    assert m.jaccards == [pytest.approx(0.6)]
    assert (m.tp, m.fp, m.fn) == (1, 1, 0)


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="differ"):
        match_instances(_ids(np.zeros((3, 3))), _ids(np.zeros((3, 4))))


def test_matches_brute_force_on_random_maps():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        pred, gt = extract_instances(random_label(rng)), extract_instances(random_label(rng))
        m = match_instances(pred, gt)
        assert (m.tp, m.fp, m.fn) == brute_force_match(pred.ids, gt.ids)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_swapping_roles_swaps_fp_and_fn(seed):
    rng = np.random.default_rng(seed)
    a, b = random_label(rng), random_label(rng)
    ab, ba = evaluate_labels(a, b), evaluate_labels(b, a)
    assert ab.tp == ba.tp and ab.fp == ba.fn and ab.fn == ba.fp
    assert all(0.5 < j <= 1.0 for j in ab.jaccards)


# ---------------------------------------------------------------- metrics


@pytest.mark.parametrize("p,r,f", [(0.858, 0.865, 0.861), (0.812, 0.802, 0.807)])
def test_published_f_values(p, r, f):
    assert abs(f_measure(p, r) - f) <= 0.0005


def test_degenerate_counts_give_zero_metrics():
    m = compute_metrics(MatchResult(0, 0, 0))
    assert (m.precision, m.recall, m.f_measure, m.mean_jaccard) == (0.0, 0.0, 0.0, 0.0)


def test_metrics_from_counts():
    m = compute_metrics(MatchResult(3, 1, 2, pairs=[(1, 1), (2, 2), (3, 3)], jaccards=[0.6, 0.8, 1.0]))
    assert m.precision == 0.75 and m.recall == 0.6
    assert m.f_measure == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    assert m.mean_jaccard == pytest.approx(0.8)


@given(st.floats(0, 1), st.floats(0, 1))
def test_f_is_between_precision_and_recall(p, r):
    f = f_measure(p, r)
    if p + r > 0:
        assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12
    else:
        assert f == 0.0


def test_aggregate_pools_counts():
    a = MatchResult(2, 0, 1, jaccards=[0.9, 0.7])
    b = MatchResult(1, 3, 0, jaccards=[0.6])
    m = aggregate([a, b])
    assert (m.tp, m.fp, m.fn) == (3, 3, 1)
    assert m.mean_jaccard == pytest.approx(0.7333333333333)


def test_touching_pair_separation():
    cells = np.zeros((5, 10), dtype=np.int32)
    cells[:, :5] = 1
    cells[:, 5:] = 2
    gt = np.full((5, 10), NUCLEUS, dtype=np.uint8)
    gt[:, 4:6] = CONTOUR
    assert touching_pairs_separated(gt, gt, cells, [(1, 2)]) == [True]
    merged = np.full((5, 10), NUCLEUS, dtype=np.uint8)
    assert touching_pairs_separated(merged, gt, cells, [(1, 2)]) == [False]
    missing = np.zeros((5, 10), dtype=np.uint8)
    assert touching_pairs_separated(missing, gt, cells, [(1, 2)]) == [False]


# -------------------------------------------------------------------- I/O


def test_metrics_csv_round_trip(tmp_path):
    rows = [("f0", compute_metrics(MatchResult(2, 1, 0, jaccards=[0.7, 0.9]))), ("f1", compute_metrics(MatchResult(0, 0, 0)))]
    write_metrics_csv(tmp_path / "m.csv", rows)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "frame,tp,fp,fn,precision,recall,f,mean_jaccard"
    assert read_metrics_csv(tmp_path / "m.csv") == rows


def test_malformed_metrics_csv(tmp_path):
    (tmp_path / "m.csv").write_text("frame,tp,fp,fn,precision,recall,f,mean_jaccard\nf0,1,2\n")
    with pytest.raises(ValueError, match=":2:"):
        read_metrics_csv(tmp_path / "m.csv")
    (tmp_path / "h.csv").write_text("a,b\n")
    with pytest.raises(ValueError, match=":1:"):
        read_metrics_csv(tmp_path / "h.csv")


def test_summary_json():
    doc = json.loads(summary_json(compute_metrics(MatchResult(1, 0, 0, jaccards=[0.8])), frames=1))
    assert doc["frames"] == 1 and doc["f_measure"] == 1.0 and math.isclose(doc["mean_jaccard"], 0.8)
