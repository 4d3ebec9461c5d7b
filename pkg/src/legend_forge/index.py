"""Searchable legend metadata: dominant swatch color, description text, provenance.

Index file format: UTF-8, one JSON object per line. The first line is the
header ``{"kind": "legend-index", "schema_version": 1}``; each following line
is one entry, ordered by (map_id, pair_id).
"""

from __future__ import annotations

import enum
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .dataset import LegendSheet, Raster
from .errors import DuplicateEntry, EmptyRegion, IndexFormatError, ValidationError
from .geometry import BBox, translate

SCHEMA_VERSION = 1
HEADER = {"kind": "legend-index", "schema_version": SCHEMA_VERSION}
BORDER_PX = 2
QUANT_BITS = 5
_SHIFT = 8 - QUANT_BITS

RGB = tuple[int, int, int]


class EntrySource(str, enum.Enum):
    GROUND_TRUTH = "GroundTruth"
    PREDICTED = "Predicted"


@dataclass(frozen=True)
class LegendEntry:
    map_id: str
    pair_id: str
    item_bbox: BBox
    description_bbox: Optional[BBox]
    dominant_color: RGB
    description_text: Optional[str] = None
    source: EntrySource = EntrySource.GROUND_TRUTH

    def __post_init__(self) -> None:
        color = tuple(self.dominant_color)
        if len(color) != 3 or any(
            isinstance(c, bool) or not isinstance(c, (int, np.integer)) or not 0 <= c <= 255
            for c in color
        ):
            raise ValidationError(f"dominant_color must be three ints in [0, 255], got {color!r}")
        object.__setattr__(self, "dominant_color", tuple(int(c) for c in color))
        object.__setattr__(self, "source", EntrySource(self.source))

    @property
    def key(self) -> tuple[str, str]:
        return (self.map_id, self.pair_id)

    def to_dict(self) -> dict:
        return {
            "map_id": self.map_id,
            "pair_id": self.pair_id,
            "item_bbox": self.item_bbox.as_list(),
            "description_bbox": None if self.description_bbox is None else self.description_bbox.as_list(),
            "dominant_color": list(self.dominant_color),
            "description_text": self.description_text,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LegendEntry":
        desc = doc.get("description_bbox")
        return cls(
            map_id=doc["map_id"],
            pair_id=doc["pair_id"],
            item_bbox=BBox.from_seq(doc["item_bbox"]),
            description_bbox=None if desc is None else BBox.from_seq(desc),
            dominant_color=tuple(doc["dominant_color"]),
            description_text=doc.get("description_text"),
            source=doc.get("source", EntrySource.GROUND_TRUTH.value),
        )


@dataclass(frozen=True)
class Query:
    text_terms: tuple[str, ...] = ()
    color: Optional[RGB] = None
    max_distance: float = 0.0
    map_filter: Optional[frozenset[str]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "text_terms", tuple(t for t in self.text_terms if t))
        if self.map_filter is not None:
            object.__setattr__(self, "map_filter", frozenset(self.map_filter))
        if not self.text_terms and self.color is None and self.map_filter is None:
            raise ValidationError("a query needs text terms, a color or a map filter")
        if self.color is not None and self.max_distance < 0:
            raise ValidationError("max_distance must be non-negative")


# -- dominant color ----------------------------------------------------------------


def interior_pixels(raster: Raster, item: BBox, border: int = BORDER_PX) -> np.ndarray:
    """Pixels covered by ``item`` (crop-local coordinates) minus a border ring."""
    c0 = max(math.floor(item.x1), 0) + border
    r0 = max(math.floor(item.y1), 0) + border
    c1 = min(math.ceil(item.x2), raster.width) - border
    r1 = min(math.ceil(item.y2), raster.height) - border
    if c0 >= c1 or r0 >= r1:
        raise EmptyRegion(f"box {item.as_list()} has no interior after a {border} px border")
    return raster.pixels[r0:r1, c0:c1].reshape(-1, 3)


def bin_center(packed: int) -> RGB:
    mask = (1 << QUANT_BITS) - 1
    half = (1 << _SHIFT) // 2 - 1
    parts = (packed >> (2 * QUANT_BITS), (packed >> QUANT_BITS) & mask, packed & mask)
    return tuple(int((p << _SHIFT) + half) for p in parts)


def color_bin(rgb: Sequence[int]) -> int:
    r, g, b = (int(c) >> _SHIFT for c in rgb)
    return (r << (2 * QUANT_BITS)) | (g << QUANT_BITS) | b


def dominant_color(raster: Raster, item: BBox) -> RGB:
    """Center of the modal 5-bit/channel color bin inside the swatch.

    Ties go to the lower packed bin index.
    """
    px = interior_pixels(raster, item).astype(np.int64) >> _SHIFT
    packed = (px[:, 0] << (2 * QUANT_BITS)) | (px[:, 1] << QUANT_BITS) | px[:, 2]
    counts = np.bincount(packed, minlength=1 << (3 * QUANT_BITS))
    return bin_center(int(np.argmax(counts)))


def entries_for_sheet(
    sheet: LegendSheet,
    raster: Raster,
    source: EntrySource = EntrySource.GROUND_TRUTH,
    transcripts: Optional[dict[str, str]] = None,
) -> list[LegendEntry]:
    """Index entries for every pair of ``sheet`` (boxes in full-map coordinates)."""
    transcripts = transcripts or {}
    out = []
    for pair in sheet.pairs:
        local = translate(pair.item, sheet.map_frame, sheet.crop_frame)
        out.append(
            LegendEntry(
                map_id=sheet.map_id,
                pair_id=pair.pair_id,
                item_bbox=pair.item,
                description_bbox=pair.description,
                dominant_color=dominant_color(raster, local),
                description_text=transcripts.get(pair.pair_id),
                source=source,
            )
        )
    return out


# -- persistence -----------------------------------------------------------------


def _canonical(entries: Iterable[LegendEntry]) -> list[LegendEntry]:
    ordered = sorted(entries, key=lambda e: e.key)
    for a, b in zip(ordered, ordered[1:]):
        if a.key == b.key:
            raise DuplicateEntry(f"duplicate index entry map_id={a.map_id!r} pair_id={a.pair_id!r}")
    return ordered


def index_text(entries: Iterable[LegendEntry]) -> str:
    lines = [json.dumps(HEADER, sort_keys=True)]
    lines += [json.dumps(e.to_dict(), sort_keys=True, ensure_ascii=False) for e in _canonical(entries)]
    return "\n".join(lines) + "\n"


def index_build(entries: Iterable[LegendEntry], path: Path | str) -> Path:
    """Write the index atomically (temp file + rename)."""
    path = Path(path)
    text = index_text(entries)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-index-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def index_load(path: Path | str) -> list[LegendEntry]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").split("\n")
    except FileNotFoundError as exc:
        raise IndexFormatError(f"index {path} not found") from exc
    if not lines[0].strip():
        raise IndexFormatError(f"index {path} is empty (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise IndexFormatError(f"index {path}: bad header line: {exc}") from exc
    if header != HEADER:
        raise IndexFormatError(f"index {path}: unsupported header {header!r}")
    entries = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            entries.append(LegendEntry.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, ValidationError) as exc:
            raise IndexFormatError(f"index {path} line {n}: {exc}") from exc
    return _canonical(entries)


# -- search -----------------------------------------------------------------------


def color_distance(a: Sequence[int], b: Sequence[int]) -> float:
    return math.sqrt(sum((int(x) - int(y)) ** 2 for x, y in zip(a, b)))


def matches(entry: LegendEntry, q: Query) -> bool:
    if q.map_filter is not None and entry.map_id not in q.map_filter:
        return False
    if q.text_terms:
        text = (entry.description_text or "").casefold()
        if entry.description_text is None or not all(t.casefold() in text for t in q.text_terms):
            return False
    if q.color is not None and color_distance(entry.dominant_color, q.color) > q.max_distance:
        return False
    return True


def search(index: Iterable[LegendEntry], q: Query) -> list[LegendEntry]:
    """Entries meeting every criterion of ``q``.

    Ranked by color distance when a color is given, otherwise by (map_id, pair_id).
    """
    hits = [e for e in index if matches(e, q)]
    if q.color is not None:
        return sorted(hits, key=lambda e: (color_distance(e.dominant_color, q.color), e.key))
    return sorted(hits, key=lambda e: e.key)


def parse_hex_color(text: str) -> RGB:
    s = text.strip().lstrip("#")
    if len(s) != 6:
        raise ValidationError(f"color must be RRGGBB hex, got {text!r}")
    try:
        return tuple(int(s[i : i + 2], 16) for i in (0, 2, 4))
    except ValueError as exc:
        raise ValidationError(f"color must be RRGGBB hex, got {text!r}") from exc
