"""Legend sheets, annotation manifests and raster access.

Manifest layout (UTF-8 JSON, coordinates in full-map pixels)::

    {"dataset": "usgs-sample",
     "maps": [{"map_id": "m1", "raster": "m1_legend.png",
               "crop_frame": {"origin_x": .., "origin_y": .., "width": .., "height": ..},
               "pairs": [{"pair_id": "1", "legend_item": [x1, y1, x2, y2],
                          "description": [x1, y1, x2, y2]}]}]}

Canonical manifests (sorted keys, two-decimal floats, LF endings) survive a
load/save round trip byte for byte.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import jsonfmt
from .errors import (
    DecodeError,
    DimensionMismatch,
    InvalidBox,
    MissingRaster,
    ParseError,
    ValidationError,
)
from .geometry import BBox, Frame, area, intersection_area

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
READING_BAND_PX = 50.0
# An item and its description may touch or overlap a little, never coincide.
MAX_SELF_OVERLAP = 0.95


@dataclass(frozen=True)
class LegendPair:
    item: BBox
    description: Optional[BBox]
    pair_id: str

    def __post_init__(self) -> None:
        if self.description is not None:
            overlap = intersection_area(self.item, self.description)
            ratio = overlap / min(area(self.item), area(self.description))
            if ratio >= MAX_SELF_OVERLAP:
                raise ValidationError(
                    f"pair {self.pair_id!r}: legend item and description are the same box "
                    f"(overlap ratio {ratio:.3f})"
                )

    def boxes(self) -> tuple[BBox, ...]:
        return (self.item,) if self.description is None else (self.item, self.description)


@dataclass(frozen=True)
class LegendSheet:
    map_id: str
    raster_path: Path
    crop_frame: Frame
    pairs: tuple[LegendPair, ...] = ()
    provenance: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(self, "raster_path", Path(self.raster_path))
        seen: set[str] = set()
        for pair in self.pairs:
            if pair.pair_id in seen:
                raise ValidationError(f"map {self.map_id!r}: duplicate pair_id {pair.pair_id!r}")
            seen.add(pair.pair_id)
            for box in pair.boxes():
                if not self.crop_frame.contains(box):
                    raise ValidationError(
                        f"map {self.map_id!r}, pair {pair.pair_id!r}: box {box.as_list()} "
                        f"lies outside crop frame {self.crop_frame.as_dict()}"
                    )

    @property
    def map_frame(self) -> Frame:
        """Full-map frame (origin 0) large enough to hold the crop."""
        return self.crop_frame.enclosing()

    @property
    def raster_name(self) -> str:
        return self.raster_path.name


@dataclass(frozen=True)
class Manifest:
    name: str
    sheets: tuple[LegendSheet, ...] = field(default_factory=tuple)

    def by_id(self) -> dict[str, LegendSheet]:
        return {s.map_id: s for s in self.sheets}

    def get(self, map_id: str) -> LegendSheet:
        for sheet in self.sheets:
            if sheet.map_id == map_id:
                return sheet
        raise ValidationError(f"map {map_id!r} is not in dataset {self.name!r}")


@dataclass(frozen=True)
class Raster:
    """Decoded 8-bit RGB pixels, shape (height, width, 3), row-major."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = self.pixels
        if px.dtype != np.uint8 or px.shape != (self.height, self.width, 3):
            raise DecodeError(
                f"raster pixels must be uint8 of shape {(self.height, self.width, 3)}, "
                f"got {px.dtype} {px.shape}"
            )
        px.setflags(write=False)


# -- manifest I/O -----------------------------------------------------------


def _manifest_file(path: Path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def _box(raw, where: str) -> BBox:
    if not isinstance(raw, list) or len(raw) != 4:
        raise ParseError(f"{where}: expected a list of 4 numbers, got {raw!r}")
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in raw):
        raise ParseError(f"{where}: non-numeric coordinate in {raw!r}")
    try:
        return BBox.from_seq(raw)
    except InvalidBox as exc:
        raise ValidationError(f"{where}: {exc}") from exc


def _frame(raw, where: str) -> Frame:
    keys = ("origin_x", "origin_y", "width", "height")
    if not isinstance(raw, dict) or any(k not in raw for k in keys):
        raise ParseError(f"{where}: crop_frame needs keys {keys}")
    vals = [raw[k] for k in keys]
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in vals):
        raise ParseError(f"{where}: non-numeric crop_frame value")
    return Frame(*vals)


def _parse_sheet(raw, base_dir: Path, check_rasters: bool) -> LegendSheet:
    if not isinstance(raw, dict):
        raise ParseError(f"map entry must be an object, got {type(raw).__name__}")
    map_id = raw.get("map_id")
    if not isinstance(map_id, str) or not map_id:
        raise ParseError(f"map entry without a string map_id: {raw!r:.80}")
    raster = raw.get("raster")
    if not isinstance(raster, str) or not raster:
        raise ParseError(f"map {map_id!r}: missing raster path")
    raster_path = (base_dir / raster).resolve()
    if check_rasters and not raster_path.is_file():
        raise MissingRaster(f"map {map_id!r}: raster {raster_path} does not exist")
    frame = _frame(raw.get("crop_frame"), f"map {map_id!r}")

    raw_pairs = raw.get("pairs", [])
    if not isinstance(raw_pairs, list):
        raise ParseError(f"map {map_id!r}: pairs must be a list")
    pairs = []
    for i, rp in enumerate(raw_pairs):
        if not isinstance(rp, dict):
            raise ParseError(f"map {map_id!r}: pair #{i} must be an object")
        pair_id = rp.get("pair_id")
        if not isinstance(pair_id, str) or not pair_id:
            raise ParseError(f"map {map_id!r}: pair #{i} lacks a string pair_id")
        where = f"map {map_id!r}, pair {pair_id!r}"
        if "legend_item" not in rp:
            raise ParseError(f"{where}: missing legend_item")
        item = _box(rp["legend_item"], where)
        desc = _box(rp["description"], where) if rp.get("description") is not None else None
        pairs.append(LegendPair(item=item, description=desc, pair_id=pair_id))

    provenance = raw.get("provenance", "")
    if not isinstance(provenance, str):
        raise ParseError(f"map {map_id!r}: provenance must be a string")
    return LegendSheet(map_id, raster_path, frame, tuple(pairs), provenance)


def load_manifest(path: Path | str, check_rasters: bool = True) -> Manifest:
    file = _manifest_file(Path(path))
    try:
        doc = json.loads(file.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ParseError(f"manifest {file} not found") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"manifest {file} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("maps"), list):
        raise ParseError(f"manifest {file} must be an object with a 'maps' list")
    name = doc.get("dataset", "")
    if not isinstance(name, str):
        raise ParseError(f"manifest {file}: dataset name must be a string")

    base = file.parent.resolve()
    sheets = [_parse_sheet(raw, base, check_rasters) for raw in doc["maps"]]
    ids = [s.map_id for s in sheets]
    dupes = sorted({m for m in ids if ids.count(m) > 1})
    if dupes:
        raise ValidationError(f"manifest {file}: duplicate map_id(s) {dupes}")
    sheets.sort(key=lambda s: s.map_id)
    log.debug("loaded %d sheets from %s", len(sheets), file)
    return Manifest(name=name, sheets=tuple(sheets))


def load_annotations(path: Path | str) -> list[LegendSheet]:
    """Load every sheet of an annotation manifest, ordered by map_id."""
    return list(load_manifest(path).sheets)


def _pair_doc(pair: LegendPair) -> dict:
    doc = {"pair_id": pair.pair_id, "legend_item": pair.item.as_list()}
    if pair.description is not None:
        doc["description"] = pair.description.as_list()
    return doc


def manifest_text(name: str, sheets: Iterable[LegendSheet], base_dir: Path | str) -> str:
    base_dir = Path(base_dir).resolve()
    maps = []
    for sheet in sorted(sheets, key=lambda s: s.map_id):
        rel = Path(os.path.relpath(Path(sheet.raster_path).resolve(), base_dir)).as_posix()
        entry = {
            "map_id": sheet.map_id,
            "raster": rel,
            "crop_frame": sheet.crop_frame.as_dict(),
            "pairs": [_pair_doc(p) for p in sheet.pairs],
        }
        if sheet.provenance:
            entry["provenance"] = sheet.provenance
        maps.append(entry)
    return jsonfmt.dumps({"dataset": name, "maps": maps}, sort_keys=True) + "\n"


def save_manifest(path: Path | str, name: str, sheets: Iterable[LegendSheet]) -> Path:
    file = Path(path)
    if file.is_dir():
        file = file / MANIFEST_NAME
    file.parent.mkdir(parents=True, exist_ok=True)
    text = manifest_text(name, sheets, file.parent)
    with open(file, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return file


# -- rasters ----------------------------------------------------------------


def _to_rgb8(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint16:
        arr = (arr >> 8).astype(np.uint8)
    elif arr.dtype != np.uint8:
        raise DecodeError(f"unsupported sample type {arr.dtype}")
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    elif arr.ndim == 3 and arr.shape[2] in (3, 4):
        arr = arr[:, :, :3]
    elif arr.ndim == 3 and arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    else:
        raise DecodeError(f"unsupported raster shape {arr.shape}")
    return np.ascontiguousarray(arr)


def decode_image(path: Path | str) -> np.ndarray:
    """Decode a PNG or TIFF into a uint8 (H, W, 3) array.

    16-bit samples keep their high byte.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingRaster(f"raster {path} does not exist")
    try:
        with Image.open(path) as im:
            fmt = im.format
            if fmt not in ("PNG", "TIFF"):
                raise DecodeError(f"{path}: unsupported raster format {fmt}")
            bits = im.tag_v2.get(258) if fmt == "TIFF" else None
            wide_tiff = bits is not None and max(np.atleast_1d(bits)) > 8
            if not wide_tiff:
                if im.mode.startswith("I;16"):
                    return _to_rgb8(np.asarray(im).astype(np.uint16))
                return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"{path}: cannot decode raster: {exc}") from exc

    import tifffile

    try:
        arr = tifffile.imread(path)
    except Exception as exc:  # tifffile raises a zoo of codec errors
        raise DecodeError(f"{path}: cannot decode TIFF: {exc}") from exc
    return _to_rgb8(np.asarray(arr))


def load_raster(sheet: LegendSheet) -> Raster:
    arr = decode_image(sheet.raster_path)
    h, w = arr.shape[:2]
    if float(w) != sheet.crop_frame.width or float(h) != sheet.crop_frame.height:
        raise DimensionMismatch(
            f"map {sheet.map_id!r}: raster is {w}x{h} but crop_frame says "
            f"{sheet.crop_frame.width:g}x{sheet.crop_frame.height:g}"
        )
    return Raster(width=w, height=h, pixels=arr)


# -- ordering ---------------------------------------------------------------


def _reading_key(pair: LegendPair):
    band = math.floor(pair.item.y1 / READING_BAND_PX)
    return (band, pair.item.x1, pair.item.y1, pair.item.x2, pair.item.y2, pair.pair_id)


def reading_order(pairs: Sequence[LegendPair]) -> list[LegendPair]:
    """Top-to-bottom in 50 px bands, left-to-right within a band."""
    return sorted(pairs, key=_reading_key)
