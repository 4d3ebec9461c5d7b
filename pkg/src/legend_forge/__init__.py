"""Legend item / description extraction for historical map legends.

Prompts a vision LLM with one annotated example legend, parses and repairs
its bounding-box answers, scores them against ground truth and indexes the
resulting legend entries for search.
"""

from .dataset import (
    LegendPair,
    LegendSheet,
    Manifest,
    Raster,
    load_annotations,
    load_manifest,
    load_raster,
    reading_order,
    save_manifest,
)
from .evaluation import EvalReport, MatchResult, evaluate_dataset, match_boxes, score
from .gateway import (
    Exchange,
    GatewayConfig,
    LiveGateway,
    ReplayGateway,
    record,
    replay,
    request_digest,
    send,
)
from .geometry import BBox, Frame, area, iou, translate
from .index import LegendEntry, Query, dominant_color, index_build, index_load, search
from .parsing import PredictionSet, parse_response, validate_pairs
from .pipeline import ablate, extract
from .prompting import (
    CoordinateFrame,
    PromptBundle,
    PromptSpec,
    RequestSettings,
    build_prompt,
    estimate_tokens,
    select_examples,
)

__version__ = "0.1.0"
