"""Detection scoring at an IoU threshold, per class, plus report rendering.

Legend items and descriptions are scored as two independent classes. A
prediction is a true positive when it is matched one-to-one to a ground
truth box with IoU >= threshold (0.5 by default).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dataset import LegendSheet
from .errors import MapMismatch, ValidationError
from .geometry import BBox, iou
from .parsing import PredictionSet

CLASSES = ("legend_item", "description")
CLASS_TITLES = {"legend_item": "Legend Item", "description": "Description"}
DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class MatchResult:
    matches: tuple[tuple[int, int, float], ...]
    unmatched_predictions: tuple[int, ...]
    unmatched_ground_truth: tuple[int, ...]
    threshold: float


@dataclass(frozen=True)
class ClassMetrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    mean_iou: float
    # Matched IoU summed over *all* ground truth (unmatched count as 0).
    penalized_iou: float
    iou_sum: float = 0.0

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, iou_sum: float) -> "ClassMetrics":
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        # count form of 2PR/(P+R); avoids the rounding of the ratio form
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        return cls(
            tp=tp,
            fp=fp,
            fn=fn,
            precision=precision,
            recall=recall,
            f1=f1,
            mean_iou=iou_sum / tp if tp else 0.0,
            penalized_iou=iou_sum / (tp + fn) if tp + fn else 0.0,
            iou_sum=iou_sum,
        )

    def to_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "mean_iou": self.mean_iou,
            "penalized_iou": self.penalized_iou,
        }


@dataclass(frozen=True)
class EvalReport:
    aggregate: dict[str, ClassMetrics]
    per_map: dict[str, dict[str, ClassMetrics]]
    threshold: float = DEFAULT_THRESHOLD
    averaging: str = "micro"
    k: Optional[int] = None
    label: str = ""
    unscored_maps: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "k": self.k,
            "threshold": self.threshold,
            "averaging": self.averaging,
            "aggregate": {c: self.aggregate[c].to_dict() for c in CLASSES},
            "per_map": {
                m: {c: rows[c].to_dict() for c in CLASSES} for m, rows in sorted(self.per_map.items())
            },
            "unscored_maps": list(self.unscored_maps),
        }


# -- matching -------------------------------------------------------------------


def iou_matrix(predictions: Sequence[BBox], ground_truth: Sequence[BBox]) -> np.ndarray:
    m = np.zeros((len(predictions), len(ground_truth)))
    for i, p in enumerate(predictions):
        for j, g in enumerate(ground_truth):
            m[i, j] = iou(p, g)
    return m


def _greedy(ious: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    edges = [
        (-ious[i, j], i, j)
        for i in range(ious.shape[0])
        for j in range(ious.shape[1])
        if ious[i, j] >= threshold
    ]
    edges.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    chosen = []
    for _, i, j in edges:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            chosen.append((i, j))
    return chosen


def _optimal(ious: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    eligible = ious >= threshold
    if not eligible.any():
        return []
    # Each eligible edge is worth more than any possible IoU total, so the
    # assignment maximises match count first and summed IoU second.
    bonus = float(min(ious.shape)) + 1.0
    weights = np.where(eligible, bonus + ious, 0.0)
    rows, cols = linear_sum_assignment(weights, maximize=True)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if eligible[i, j]]


def match_boxes(
    predictions: Sequence[BBox],
    ground_truth: Sequence[BBox],
    threshold: float = DEFAULT_THRESHOLD,
    strategy: str = "optimal",
) -> MatchResult:
    """One-to-one matching of predictions to ground truth at ``threshold``.

    ``strategy="optimal"`` maximises the number of matches, then their summed
    IoU. ``strategy="greedy"`` takes edges by descending IoU (ties to lower
    prediction, then lower ground-truth index); it can miss matches when
    ground-truth boxes overlap each other heavily.
    """
    if not 0 < threshold <= 1:
        raise ValidationError(f"threshold must be in (0, 1], got {threshold}")
    ious = iou_matrix(predictions, ground_truth)
    if strategy == "optimal":
        pairs = _optimal(ious, threshold)
    elif strategy == "greedy":
        pairs = _greedy(ious, threshold)
    else:
        raise ValidationError(f"unknown matching strategy {strategy!r}")
    pairs.sort()
    mp = {i for i, _ in pairs}
    mg = {j for _, j in pairs}
    return MatchResult(
        matches=tuple((i, j, float(ious[i, j])) for i, j in pairs),
        unmatched_predictions=tuple(i for i in range(len(predictions)) if i not in mp),
        unmatched_ground_truth=tuple(j for j in range(len(ground_truth)) if j not in mg),
        threshold=threshold,
    )


def score(match: MatchResult) -> ClassMetrics:
    return ClassMetrics.from_counts(
        tp=len(match.matches),
        fp=len(match.unmatched_predictions),
        fn=len(match.unmatched_ground_truth),
        iou_sum=sum(m[2] for m in match.matches),
    )


# -- dataset evaluation ----------------------------------------------------------


def _class_boxes(pairs, cls: str) -> list[BBox]:
    if cls == "legend_item":
        return [p.item for p in pairs]
    return [p.description for p in pairs if p.description is not None]


def _macro(rows: Iterable[ClassMetrics]) -> ClassMetrics:
    rows = list(rows)
    if not rows:
        return ClassMetrics.from_counts(0, 0, 0, 0.0)
    n = len(rows)
    return ClassMetrics(
        tp=sum(r.tp for r in rows),
        fp=sum(r.fp for r in rows),
        fn=sum(r.fn for r in rows),
        precision=sum(r.precision for r in rows) / n,
        recall=sum(r.recall for r in rows) / n,
        f1=sum(r.f1 for r in rows) / n,
        mean_iou=sum(r.mean_iou for r in rows) / n,
        penalized_iou=sum(r.penalized_iou for r in rows) / n,
        iou_sum=sum(r.iou_sum for r in rows),
    )


def evaluate_dataset(
    predictions: Mapping[str, PredictionSet] | Iterable[PredictionSet],
    truth: Iterable[LegendSheet],
    threshold: float = DEFAULT_THRESHOLD,
    averaging: str = "micro",
    k: Optional[int] = None,
    label: str = "",
    strategy: str = "optimal",
) -> EvalReport:
    """Score every predicted map against its ground-truth sheet.

    Maps present in ``truth`` but absent from ``predictions`` are listed as
    unscored rather than counted as misses.
    """
    if averaging not in ("micro", "macro"):
        raise ValidationError(f"averaging must be 'micro' or 'macro', got {averaging!r}")
    if not isinstance(predictions, Mapping):
        predictions = {p.target_map_id: p for p in predictions}
    truth_by_id = {s.map_id: s for s in truth}
    unknown = sorted(set(predictions) - set(truth_by_id))
    if unknown:
        raise MapMismatch(f"predictions for map(s) not in ground truth: {unknown}")

    per_map: dict[str, dict[str, ClassMetrics]] = {}
    for map_id in sorted(predictions):
        pset, sheet = predictions[map_id], truth_by_id[map_id]
        if pset.frame != sheet.crop_frame:
            raise ValidationError(
                f"map {map_id!r}: predictions are in frame {pset.frame.as_dict()}, "
                f"ground truth in {sheet.crop_frame.as_dict()}"
            )
        per_map[map_id] = {
            cls: score(
                match_boxes(
                    _class_boxes(pset.pairs, cls), _class_boxes(sheet.pairs, cls), threshold, strategy
                )
            )
            for cls in CLASSES
        }

    aggregate = {}
    for cls in CLASSES:
        rows = [per_map[m][cls] for m in per_map]
        if averaging == "micro":
            aggregate[cls] = ClassMetrics.from_counts(
                sum(r.tp for r in rows),
                sum(r.fp for r in rows),
                sum(r.fn for r in rows),
                sum(r.iou_sum for r in rows),
            )
        else:
            aggregate[cls] = _macro(rows)
    return EvalReport(
        aggregate=aggregate,
        per_map=per_map,
        threshold=threshold,
        averaging=averaging,
        k=k,
        label=label,
        unscored_maps=tuple(sorted(set(truth_by_id) - set(predictions))),
    )


# -- rendering -------------------------------------------------------------------

COLUMNS = tuple((cls, metric) for cls in CLASSES for metric in ("mean_iou", "f1"))


def _row_label(report: EvalReport) -> str:
    if report.label:
        return report.label
    return str(report.k) if report.k is not None else "all"


def best_cells(reports: Sequence[EvalReport]) -> set[tuple[int, str, str]]:
    best = set()
    for cls, metric in COLUMNS:
        # compare at printed precision so equal-looking cells are starred alike
        values = [float(f"{getattr(r.aggregate[cls], metric):.2f}") for r in reports]
        if not values:
            continue
        top = max(values)
        best.update((i, cls, metric) for i, v in enumerate(values) if v == top)
    return best


def render_table(reports: Sequence[EvalReport], row_header: str = "# Examples") -> str:
    """Aligned text table: one row per report, IoU / F1 per class, best cell starred."""
    best = best_cells(reports) if len(reports) > 1 else set()
    labels = [_row_label(r) for r in reports]
    w0 = max([len(row_header)] + [len(s) for s in labels])
    cell = 7
    group = 2 * cell + 1
    head1 = f"{'':<{w0}} | " + " | ".join(f"{CLASS_TITLES[c]:^{group}}" for c in CLASSES)
    head2 = f"{row_header:<{w0}} | " + " | ".join(f"{'IoU':>{cell}} {'F1':>{cell}}" for _ in CLASSES)
    lines = [head1, head2, "-" * len(head2)]
    for i, (report, label) in enumerate(zip(reports, labels)):
        groups = []
        for cls in CLASSES:
            cells = []
            for metric in ("mean_iou", "f1"):
                mark = "*" if (i, cls, metric) in best else " "
                cells.append(f"{getattr(report.aggregate[cls], metric):.2f}{mark}".rjust(cell))
            groups.append(" ".join(cells))
        lines.append(f"{label:<{w0}} | " + " | ".join(groups))
    if best:
        lines.append("* best value in column")
    return "\n".join(line.rstrip() for line in lines) + "\n"


def reports_json(reports: Sequence[EvalReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"


def reports_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    fields = ("tp", "fp", "fn", "precision", "recall", "f1", "mean_iou", "penalized_iou")
    writer.writerow(["row", "scope", "class", *fields])
    for report in reports:
        label = _row_label(report)
        scopes = [("aggregate", report.aggregate)] + sorted(report.per_map.items())
        for scope, rows in scopes:
            for cls in CLASSES:
                d = rows[cls].to_dict()
                writer.writerow([label, scope, cls, *(d[f] for f in fields)])
    return buf.getvalue()
