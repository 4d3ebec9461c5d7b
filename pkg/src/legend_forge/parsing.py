"""Turn raw model text into validated legend pair predictions.

Repairs run in a fixed order and each one that changes the text is recorded:
code fences, ``//`` line comments, trailing commas, then (only if nothing
parses) closing a truncated object. The first JSON object holding a key
that starts with ``"predictions for"`` wins.
"""

from __future__ import annotations

import json
import math
import re
import statistics
from dataclasses import dataclass, field, replace
from typing import Any, Iterator, Optional

from .dataset import LegendPair
from .errors import LegendForgeError, NoPredictionsFound
from .geometry import BBox, Frame, area, gap

PREDICTIONS_PREFIX = "predictions for"

# Overshoot beyond the frame up to this fraction of the box's own extent is
# clamped; anything further out means the box is not anchored to the image.
CLAMP_FRACTION = 0.25
OVERSIZED_FRACTION = 0.60
SUSPECT_GAP_FACTOR = 1.5

FENCE_RE = re.compile(r"```[A-Za-z0-9_+-]*")


@dataclass(frozen=True)
class PredictionSet:
    target_map_id: str
    pairs: tuple[LegendPair, ...]
    frame: Frame
    repairs_applied: tuple[str, ...] = ()
    rejected_entries: int = 0
    flags: dict[str, tuple[str, ...]] = field(default_factory=dict)
    predictions_key: str = ""

    def flagged(self, flag: str) -> list[str]:
        return [pid for pid, fl in sorted(self.flags.items()) if flag in fl]


# -- text repairs -------------------------------------------------------------


def strip_code_fences(text: str) -> str:
    return FENCE_RE.sub("", text)


def _scan(text: str) -> Iterator[tuple[int, str, bool]]:
    """Yield (index, char, inside_string) with JSON string/escape tracking."""
    in_string = False
    escaped = False
    for i, ch in enumerate(text):
        if in_string:
            yield i, ch, True
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
        else:
            if ch == '"':
                in_string = True
                yield i, ch, True
            else:
                yield i, ch, False


def strip_line_comments(text: str) -> str:
    """Drop ``//`` to end-of-line, leaving string literals alone."""
    out = []
    skip_until_newline = False
    prev_slash = -2
    for i, ch, in_str in _scan(text):
        if skip_until_newline:
            if ch == "\n":
                skip_until_newline = False
                out.append(ch)
            continue
        if not in_str and ch == "/":
            if prev_slash == i - 1:
                out.pop()
                skip_until_newline = True
                prev_slash = -2
                continue
            prev_slash = i
        out.append(ch)
    return "".join(out)


def remove_trailing_commas(text: str) -> str:
    out: list[str] = []
    pending_comma: Optional[int] = None
    for _, ch, in_str in _scan(text):
        if not in_str and ch in "]}" and pending_comma is not None:
            del out[pending_comma]
        if not in_str and ch == ",":
            pending_comma = len(out)
        elif in_str or not ch.isspace():
            pending_comma = None
        out.append(ch)
    return "".join(out)


def close_truncated(text: str) -> str:
    """Cut after the last complete entry and close whatever brackets remain open."""
    start = text.find("{")
    if start < 0:
        return text
    body = text[start:]
    last = body.rfind("}")
    if last <= 0:
        return text
    body = body[: last + 1]
    stack = []
    for _, ch, in_str in _scan(body):
        if in_str:
            continue
        if ch in "[{":
            stack.append("]" if ch == "[" else "}")
        elif ch in "]}" and stack:
            stack.pop()
    return text[:start] + body + "".join(reversed(stack))


def _find_predictions(obj: Any) -> Optional[tuple[str, Any]]:
    todo = [obj]
    while todo:
        node = todo.pop(0)
        if isinstance(node, dict):
            for key, value in node.items():
                if isinstance(key, str) and key.strip().lower().startswith(PREDICTIONS_PREFIX):
                    return key, value
            todo.extend(v for v in node.values() if isinstance(v, (dict, list)))
        elif isinstance(node, list):
            todo.extend(v for v in node if isinstance(v, (dict, list)))
    return None


def locate_predictions(text: str) -> Optional[tuple[str, Any]]:
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos >= 0:
        try:
            obj, end = decoder.raw_decode(text, pos)
        except (json.JSONDecodeError, RecursionError):
            pos = text.find("{", pos + 1)
            continue
        found = _find_predictions(obj)
        if found is not None:
            return found
        pos = text.find("{", end)
    return None


# -- box coercion --------------------------------------------------------------


def _numbers(raw: Any) -> Optional[list[float]]:
    if not isinstance(raw, list) or len(raw) != 4:
        return None
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in raw):
        return None
    vals = [float(v) for v in raw]
    if not all(math.isfinite(v) for v in vals):
        return None
    return vals


def coerce_box(coords: list[float], frame: Frame) -> tuple[Optional[BBox], bool]:
    """Clamp a slightly protruding box into ``frame``; None if unusable.

    ``frame`` is interpreted as a region in the boxes' coordinate system.
    Returns (box, clamped).
    """
    x1, y1, x2, y2 = coords
    if x1 >= x2 or y1 >= y2:
        return None, False
    w, h = x2 - x1, y2 - y1
    over = (
        (frame.origin_x - x1) / w,
        (x2 - frame.x2) / w,
        (frame.origin_y - y1) / h,
        (y2 - frame.y2) / h,
    )
    if max(over) > CLAMP_FRACTION:
        return None, False
    clamped = max(over) > 0
    if clamped:
        x1, x2 = max(x1, frame.origin_x), min(x2, frame.x2)
        y1, y2 = max(y1, frame.origin_y), min(y2, frame.y2)
    # Boxes thinner than the two-decimal wire precision cannot round-trip.
    if round(x1, 2) >= round(x2, 2) or round(y1, 2) >= round(y2, 2):
        return None, False
    return BBox(x1, y1, x2, y2), clamped


def _entry_pair(entry: Any, index: int, frame: Frame) -> tuple[Optional[LegendPair], bool]:
    if not isinstance(entry, dict):
        return None, False
    item_raw = _numbers(entry.get("legend_item"))
    desc_raw = _numbers(entry.get("description"))
    if item_raw is None or desc_raw is None:
        return None, False
    item, c1 = coerce_box(item_raw, frame)
    desc, c2 = coerce_box(desc_raw, frame)
    if item is None or desc is None:
        return None, False
    try:
        pair = LegendPair(item=item, description=desc, pair_id=f"pred-{index + 1:03d}")
    except LegendForgeError:
        return None, False
    return pair, c1 or c2


def parse_response(text: str, frame: Frame, target_map_id: str = "") -> PredictionSet:
    """Extract, repair and coerce the model's prediction entries.

    Raises NoPredictionsFound when no object with a "predictions for" key
    can be recovered from ``text``.
    """
    repairs: list[str] = []
    steps = (
        ("strip-code-fences", strip_code_fences),
        ("strip-comments", strip_line_comments),
        ("trailing-commas", remove_trailing_commas),
    )
    for tag, fix in steps:
        fixed = fix(text)
        if fixed != text:
            repairs.append(tag)
            text = fixed

    found = locate_predictions(text)
    if found is None and PREDICTIONS_PREFIX in text.lower():
        closed = remove_trailing_commas(close_truncated(text))
        found = locate_predictions(closed)
        if found is not None:
            repairs.append("close-truncated")
    if found is None:
        raise NoPredictionsFound("no JSON object with a 'predictions for' key in response")

    key, entries = found
    if not isinstance(entries, list):
        entries = [entries]
    pairs: list[LegendPair] = []
    flags: dict[str, tuple[str, ...]] = {}
    rejected = 0
    for i, entry in enumerate(entries):
        pair, clamped = _entry_pair(entry, i, frame)
        if pair is None:
            rejected += 1
            continue
        pairs.append(pair)
        if clamped:
            flags[pair.pair_id] = ("clamped",)
    if flags:
        repairs.append("clamp")
    return PredictionSet(
        target_map_id=target_map_id,
        pairs=tuple(pairs),
        frame=frame,
        repairs_applied=tuple(repairs),
        rejected_entries=rejected,
        flags=flags,
        predictions_key=key,
    )


# -- validation ----------------------------------------------------------------


def validate_pairs(pset: PredictionSet, frame: Frame) -> PredictionSet:
    """Clamp or drop boxes against ``frame`` and attach diagnostic flags.

    Flags: "clamped", "oversized" (a box covers more than 60% of the frame),
    "suspect-link" (item and description disjoint and further apart than
    1.5x the median item-description gap). Never raises.
    """
    kept: list[LegendPair] = []
    flags: dict[str, set[str]] = {}
    rejected = pset.rejected_entries
    for pair in pset.pairs:
        prior = set(pset.flags.get(pair.pair_id, ()))
        item, c1 = coerce_box(pair.item.as_list(), frame)
        desc, c2 = (None, False)
        if pair.description is not None:
            desc, c2 = coerce_box(pair.description.as_list(), frame)
        if item is None or (pair.description is not None and desc is None):
            rejected += 1
            continue
        try:
            new_pair = LegendPair(item, desc, pair.pair_id)
        except LegendForgeError:
            rejected += 1
            continue
        kept.append(new_pair)
        fl = prior & {"clamped"}
        if c1 or c2:
            fl.add("clamped")
        if any(area(b) > OVERSIZED_FRACTION * frame.area for b in new_pair.boxes()):
            fl.add("oversized")
        flags[pair.pair_id] = fl

    gaps = {p.pair_id: gap(p.item, p.description) for p in kept if p.description is not None}
    if gaps:
        median = statistics.median(gaps.values())
        for pid, g in gaps.items():
            if g > 0 and g > SUSPECT_GAP_FACTOR * median:
                flags[pid].add("suspect-link")

    repairs = list(pset.repairs_applied)
    if any("clamped" in fl for fl in flags.values()) and "clamp" not in repairs:
        repairs.append("clamp")
    return replace(
        pset,
        pairs=tuple(kept),
        frame=frame,
        repairs_applied=tuple(repairs),
        rejected_entries=rejected,
        flags={pid: tuple(sorted(fl)) for pid, fl in sorted(flags.items()) if fl},
    )
