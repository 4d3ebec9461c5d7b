import csv
import io
import json
import random
from functools import lru_cache

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from legend_forge.dataset import LegendPair, LegendSheet, load_manifest
from legend_forge.errors import MapMismatch, ValidationError
from legend_forge.evaluation import (
    ClassMetrics,
    EvalReport,
    evaluate_dataset,
    iou_matrix,
    match_boxes,
    render_table,
    reports_csv,
    reports_json,
    score,
)
from legend_forge.geometry import BBox, Frame
from legend_forge.parsing import PredictionSet
from legend_forge.pipeline import predictions_from_sheets

from conftest import FIXTURES

METRIC88 = FIXTURES / "metric88"


def brute_force_cardinality(ious, threshold):
    """Largest one-to-one matching with IoU >= threshold, by exhaustive search."""
    n, m = ious.shape

    @lru_cache(maxsize=None)
    def best(i, used):
        if i == n:
            return 0
        top = best(i + 1, used)
        for j in range(m):
            if not used >> j & 1 and ious[i, j] >= threshold:
                top = max(top, 1 + best(i + 1, used | 1 << j))
        return top

    return best(0, 0)


def test_single_exact_match():
    r = score(match_boxes([BBox(0, 0, 10, 10)], [BBox(0, 0, 10, 10)]))
    assert (r.tp, r.fp, r.fn) == (1, 0, 0)
    assert r.precision == r.recall == r.f1 == r.mean_iou == 1.0


def test_below_threshold_is_fp_and_fn():
    r = score(match_boxes([BBox(0, 0, 10, 10)], [BBox(5, 5, 15, 15)]))
    assert (r.tp, r.fp, r.fn) == (0, 1, 1)
    assert r.f1 == 0.0


def test_two_predictions_one_truth():
    gt = [BBox(0, 0, 10, 10)]
    res = match_boxes([BBox(0, 0, 10, 10), BBox(0.5, 0, 10.5, 10)], gt)
    r = score(res)
    assert (r.tp, r.fp, r.fn) == (1, 1, 0)
    assert res.matches[0][:2] == (0, 0)  # the better-overlapping prediction wins


def test_threshold_boundary_inclusive():
    # IoU exactly 0.5
    res = match_boxes([BBox(0, 0, 10, 10)], [BBox(0, 0, 10, 20)])
    assert len(res.matches) == 1
    assert res.matches[0][2] == 0.5


def test_empty_sides():
    r = score(match_boxes([], []))
    assert (r.tp, r.fp, r.fn, r.f1) == (0, 0, 0, 0.0)
    r = score(match_boxes([BBox(0, 0, 1, 1)], []))
    assert (r.tp, r.fp, r.fn, r.precision) == (0, 1, 0, 0.0)


def test_invalid_threshold_and_strategy():
    with pytest.raises(ValidationError):
        match_boxes([], [], threshold=0)
    with pytest.raises(ValidationError):
        match_boxes([], [], strategy="hungarian-ish")


def test_greedy_is_not_cardinality_optimal():
    g1, g2 = BBox(0, 0, 10, 10), BBox(1, 0, 11, 10)
    p1, p2 = BBox(0.4, 0, 10.4, 10), BBox(0, 0, 6, 10)
    greedy = match_boxes([p1, p2], [g1, g2], strategy="greedy")
    optimal = match_boxes([p1, p2], [g1, g2])
    assert len(greedy.matches) == 1
    assert len(optimal.matches) == 2 == brute_force_cardinality(iou_matrix([p1, p2], [g1, g2]), 0.5)


def _random_instance(rng):
    def box(extent):
        x, y = rng.uniform(0, extent - 5), rng.uniform(0, extent - 5)
        return BBox(x, y, x + rng.uniform(2, extent / 2), y + rng.uniform(2, extent / 2))

    gt = [box(40) for _ in range(rng.randint(0, 8))]
    preds = [box(40) for _ in range(rng.randint(0, 8))]
    return preds, gt


def test_optimal_matches_brute_force_on_random_instances():
    rng = random.Random(11)
    for _ in range(300):
        preds, gt = _random_instance(rng)
        res = match_boxes(preds, gt)
        assert len(res.matches) == brute_force_cardinality(iou_matrix(preds, gt), 0.5)


@settings(max_examples=100)
@given(st.randoms(use_true_random=False))
def test_matching_is_one_to_one(rnd):
    preds, gt = _random_instance(rnd)
    for strategy in ("optimal", "greedy"):
        res = match_boxes(preds, gt, strategy=strategy)
        ps = [i for i, _, _ in res.matches]
        gs = [j for _, j, _ in res.matches]
        assert len(set(ps)) == len(ps) and len(set(gs)) == len(gs)
        assert all(v >= 0.5 for _, _, v in res.matches)
        assert len(res.matches) + len(res.unmatched_predictions) == len(preds)
        assert len(res.matches) + len(res.unmatched_ground_truth) == len(gt)


@settings(max_examples=100)
@given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
def test_metric_ranges(tp, fp, fn):
    m = ClassMetrics.from_counts(tp, fp, fn, 0.8 * tp)
    for v in (m.precision, m.recall, m.f1, m.mean_iou, m.penalized_iou):
        assert 0.0 <= v <= 1.0
    if tp:
        assert min(m.precision, m.recall) <= m.f1 <= max(m.precision, m.recall)


def test_mean_and_penalized_iou():
    gt = [BBox(0, 0, 10, 10), BBox(50, 50, 60, 60)]
    preds = [BBox(0, 0, 10, 8)]  # IoU 0.8 with the first box
    r = score(match_boxes(preds, gt))
    assert r.mean_iou == pytest.approx(0.8)
    assert r.penalized_iou == pytest.approx(0.4)


# -- dataset level ----------------------------------------------------------------------

FRAME = Frame(0, 0, 1000, 1000)


def _sheet(map_id, pairs, raster):
    return LegendSheet(map_id, raster, FRAME, tuple(pairs))


def _pairs(n, start=0):
    return [LegendPair(BBox(10, 60 * i, 50, 60 * i + 40), BBox(70, 60 * i, 300, 60 * i + 40), f"p{i}") for i in range(start, start + n)]


def test_metric88_fixture_counts():
    truth = load_manifest(METRIC88 / "truth.json").sheets
    preds = predictions_from_sheets(load_manifest(METRIC88 / "predictions.json").sheets)
    report = evaluate_dataset(preds, truth)
    for cls in ("legend_item", "description"):
        m = report.aggregate[cls]
        assert (m.tp, m.fp, m.fn) == (44, 6, 6)
        assert m.precision == pytest.approx(0.88, abs=1e-9)
        assert m.f1 == pytest.approx(0.88, abs=1e-9)


def test_micro_versus_macro(tmp_path):
    raster = tmp_path / "r.png"
    raster.touch()
    # map a: 1 of 1 found; map b: 1 of 3 found
    truth = [_sheet("a", _pairs(1), raster), _sheet("b", _pairs(3), raster)]
    preds = {
        "a": PredictionSet("a", tuple(_pairs(1)), FRAME),
        "b": PredictionSet("b", tuple(_pairs(1)), FRAME),
    }
    micro = evaluate_dataset(preds, truth).aggregate["legend_item"]
    macro = evaluate_dataset(preds, truth, averaging="macro").aggregate["legend_item"]
    assert micro.recall == pytest.approx(2 / 4)
    assert macro.recall == pytest.approx((1 + 1 / 3) / 2)
    with pytest.raises(ValidationError):
        evaluate_dataset(preds, truth, averaging="weighted")


def test_unknown_map_raises_and_missing_map_unscored(tmp_path):
    raster = tmp_path / "r.png"
    raster.touch()
    truth = [_sheet("a", _pairs(2), raster), _sheet("b", _pairs(2), raster)]
    with pytest.raises(MapMismatch, match="zzz"):
        evaluate_dataset({"zzz": PredictionSet("zzz", (), FRAME)}, truth)
    report = evaluate_dataset({"a": PredictionSet("a", tuple(_pairs(2)), FRAME)}, truth)
    assert report.unscored_maps == ("b",)
    assert report.aggregate["legend_item"].f1 == 1.0


def test_frame_mismatch_rejected(tmp_path):
    raster = tmp_path / "r.png"
    raster.touch()
    truth = [_sheet("a", _pairs(1), raster)]
    with pytest.raises(ValidationError, match="frame"):
        evaluate_dataset({"a": PredictionSet("a", tuple(_pairs(1)), Frame(0, 0, 900, 900))}, truth)


def test_symbol_only_pairs_count_only_as_items(tmp_path):
    raster = tmp_path / "r.png"
    raster.touch()
    gt = [LegendPair(BBox(10, 10, 50, 50), None, "s")]
    report = evaluate_dataset({"a": PredictionSet("a", tuple(gt), FRAME)}, [_sheet("a", gt, raster)])
    assert report.aggregate["legend_item"].tp == 1
    d = report.aggregate["description"]
    assert (d.tp, d.fp, d.fn) == (0, 0, 0)


# -- rendering ---------------------------------------------------------------------------


def _report(k, item_f1_tp):
    m = ClassMetrics.from_counts(item_f1_tp, 10 - item_f1_tp, 10 - item_f1_tp, 0.7 * item_f1_tp)
    return EvalReport({"legend_item": m, "description": m}, {"x": {"legend_item": m, "description": m}}, k=k)


def test_table_marks_best_and_is_aligned():
    reports = [_report(5, 6), _report(10, 9), _report(15, 7)]
    text = render_table(reports)
    lines = text.splitlines()
    assert "Legend Item" in lines[0] and "Description" in lines[0]
    assert lines[1].startswith("# Examples") and lines[1].count("IoU") == 2 and lines[1].count("F1") == 2
    rows = [l for l in lines if l.split("|")[0].strip() in {"5", "10", "15"}]
    assert len(rows) == 3
    assert len({tuple(i for i, ch in enumerate(r) if ch == "|") for r in rows + lines[:2]}) == 1
    # IoU ties across all rows, so only the F1 stars single out k=10
    assert [r.count("*") for r in rows] == [2, 4, 2]
    assert lines[-1] == "* best value in column"


def test_single_report_has_no_stars():
    assert "*" not in render_table([_report(15, 8)])


def test_csv_and_json_round_trip():
    reports = [_report(5, 6), _report(10, 9)]
    rows = list(csv.DictReader(io.StringIO(reports_csv(reports))))
    assert len(rows) == 2 * 2 * 2  # reports x (aggregate + 1 map) x classes
    assert {r["row"] for r in rows} == {"5", "10"}
    doc = json.loads(reports_json(reports))
    assert [d["k"] for d in doc] == [5, 10]
    assert doc[1]["aggregate"]["legend_item"]["tp"] == 9
