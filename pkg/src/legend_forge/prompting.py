"""Three-part in-context prompt: example legend image, JSON block, target image.

The JSON block carries the task string, ``k`` annotated example pairs keyed
by the example raster's file name, and one placeholder prediction entry
whose eight coordinates are the string ``"??"``::

    {
      "task": "Given a scanned map legend area, detect legend items and their descriptions coordinates",
      "examples from example_map_legend.tiff": [
        {
          "legend_item": [6630.85, 472.34, 6779.79, 560.64],
          "description": [6214.89, 572.34, 7186.17, 621.28]
        }
      ],
      "predictions for target_map_legend.tiff": [
        {"legend_item": ["??", "??", "??", "??"], "description": ["??", "??", "??", "??"]}
      ]
    }

(rendered with ``json.dumps(indent=2)`` layout and two-decimal floats).
"""

from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from PIL import Image, UnidentifiedImageError

from . import jsonfmt
from .dataset import LegendPair, LegendSheet, reading_order
from .errors import MissingRaster, NotEnoughExamples, RasterError, ValidationError
from .geometry import BBox, translate

TASK = "Given a scanned map legend area, detect legend items and their descriptions coordinates"
EXAMPLES_KEY_PREFIX = "examples from "
PREDICTIONS_KEY_PREFIX = "predictions for "
PLACEHOLDER = "??"
ABLATION_K = (5, 10, 15, 20)

DEFAULT_IMAGE_TOKENS = 800


class CoordinateFrame(str, enum.Enum):
    FULL_MAP = "full-map"
    CROP_LOCAL = "crop-local"


@dataclass(frozen=True)
class RequestSettings:
    model_name: str = "gpt-4o"
    temperature: float = 0.0
    # ~0.6k output tokens observed per query, so 2048 leaves 3x headroom.
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        if not (0.0 <= self.temperature <= 2.0):
            raise ValidationError(f"temperature {self.temperature} out of range")
        if self.max_output_tokens < 1:
            raise ValidationError("max_output_tokens must be positive")


@dataclass(frozen=True)
class PromptSpec:
    example_sheet: LegendSheet
    target_sheet: LegendSheet
    k: int
    coordinate_frame: CoordinateFrame = CoordinateFrame.FULL_MAP
    settings: RequestSettings = field(default_factory=RequestSettings)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValidationError(f"k must be at least 1, got {self.k}")
        object.__setattr__(self, "coordinate_frame", CoordinateFrame(self.coordinate_frame))


@dataclass(frozen=True)
class ImageAttachment:
    filename: str
    data: bytes
    media_type: str

    @classmethod
    def from_file(cls, path: Path | str) -> "ImageAttachment":
        path = Path(path)
        try:
            data = path.read_bytes()
        except FileNotFoundError as exc:
            raise MissingRaster(f"raster {path} does not exist") from exc
        except OSError as exc:
            raise RasterError(f"cannot read raster {path}: {exc}") from exc
        try:
            with Image.open(io.BytesIO(data)) as im:
                fmt = im.format
        except (UnidentifiedImageError, OSError) as exc:
            raise RasterError(f"{path} is not a readable image: {exc}") from exc
        media = {"PNG": "image/png", "TIFF": "image/tiff"}.get(fmt)
        if media is None:
            raise RasterError(f"{path}: unsupported image format {fmt}")
        return cls(filename=path.name, data=data, media_type=media)


@dataclass(frozen=True)
class PromptBundle:
    example_image: Optional[ImageAttachment]
    target_image: Optional[ImageAttachment]
    json_block: str
    request_settings: RequestSettings = field(default_factory=RequestSettings)

    @property
    def images(self) -> tuple[ImageAttachment, ...]:
        return tuple(im for im in (self.example_image, self.target_image) if im is not None)


def select_examples(sheet: LegendSheet, k: int) -> list[LegendPair]:
    """First ``k`` fully annotated pairs of ``sheet`` in reading order.

    Symbol-only pairs (no description) never serve as examples.
    """
    usable = [p for p in sheet.pairs if p.description is not None]
    if k < 1 or k > len(usable):
        raise NotEnoughExamples(
            f"example map {sheet.map_id!r} has {len(usable)} annotated pairs, k={k} requested"
        )
    return reading_order(usable)[:k]


def placeholder_entry() -> dict:
    return {"legend_item": [PLACEHOLDER] * 4, "description": [PLACEHOLDER] * 4}


def render_json_block(
    examples: Sequence[tuple[BBox, BBox]], example_name: str, target_name: str
) -> str:
    doc = {
        "task": TASK,
        EXAMPLES_KEY_PREFIX + example_name: [
            {"legend_item": item.as_list(), "description": desc.as_list()}
            for item, desc in examples
        ],
        PREDICTIONS_KEY_PREFIX + target_name: [placeholder_entry()],
    }
    return jsonfmt.dumps(doc)


def example_boxes(spec: PromptSpec) -> list[tuple[BBox, BBox]]:
    pairs = select_examples(spec.example_sheet, spec.k)
    boxes = [(p.item, p.description) for p in pairs]
    if spec.coordinate_frame is CoordinateFrame.CROP_LOCAL:
        sheet = spec.example_sheet
        boxes = [
            (
                translate(item, sheet.map_frame, sheet.crop_frame),
                translate(desc, sheet.map_frame, sheet.crop_frame),
            )
            for item, desc in boxes
        ]
    return boxes


def build_prompt(spec: PromptSpec) -> PromptBundle:
    block = render_json_block(
        example_boxes(spec), spec.example_sheet.raster_name, spec.target_sheet.raster_name
    )
    return PromptBundle(
        example_image=ImageAttachment.from_file(spec.example_sheet.raster_path),
        target_image=ImageAttachment.from_file(spec.target_sheet.raster_path),
        json_block=block,
        request_settings=spec.settings,
    )


def estimate_text_tokens(json_block: str) -> int:
    return math.ceil(len(json_block.encode("utf-8")) / 4)


def estimate_tokens(bundle: PromptBundle, per_image: int = DEFAULT_IMAGE_TOKENS) -> int:
    """Rough input-token count: 4 bytes of JSON per token plus a flat per-image charge."""
    return estimate_text_tokens(bundle.json_block) + per_image * len(bundle.images)
