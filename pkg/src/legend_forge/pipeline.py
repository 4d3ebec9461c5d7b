"""Extraction runs: prompt -> model -> parse -> validate for every target map."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from .dataset import LegendPair, LegendSheet, Manifest
from .errors import LegendForgeError
from .evaluation import DEFAULT_THRESHOLD, EvalReport, evaluate_dataset
from .gateway import Gateway
from .geometry import translate
from .parsing import PredictionSet, parse_response, validate_pairs
from .prompting import (
    CoordinateFrame,
    PromptSpec,
    RequestSettings,
    build_prompt,
    estimate_tokens,
    select_examples,
)

log = logging.getLogger(__name__)


@dataclass
class MapOutcome:
    map_id: str
    status: str = "ok"
    request_digest: str = ""
    input_tokens: int = 0
    output_tokens: int = 0
    estimated_input_tokens: int = 0
    latency_ms: int = 0
    pairs: int = 0
    repairs_applied: list[str] = field(default_factory=list)
    rejected_entries: int = 0
    flags: dict[str, list[str]] = field(default_factory=dict)
    error_type: str = ""
    error: str = ""
    exit_code: int = 0


@dataclass
class RunManifest:
    run_id: str
    timestamp: str
    config: dict
    outcomes: list[MapOutcome]

    @property
    def failed(self) -> list[MapOutcome]:
        return [o for o in self.outcomes if o.status != "ok"]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "timestamp": self.timestamp,
            "config": self.config,
            "outcomes": [vars(o) for o in self.outcomes],
        }


@dataclass
class ExtractionResult:
    predictions: dict[str, PredictionSet]
    run: RunManifest

    def prediction_sheets(self, truth: Manifest) -> list[LegendSheet]:
        """Predictions as sheets in the annotation manifest schema."""
        out = []
        for map_id, pset in sorted(self.predictions.items()):
            target = truth.get(map_id)
            out.append(
                LegendSheet(
                    map_id=map_id,
                    raster_path=target.raster_path,
                    crop_frame=target.crop_frame,
                    pairs=pset.pairs,
                    provenance=f"predicted k={self.run.config['k']} model={self.run.config['model_name']}",
                )
            )
        return out


def _to_full_map(pset: PredictionSet, sheet: LegendSheet) -> PredictionSet:
    pairs = tuple(
        LegendPair(
            item=translate(p.item, sheet.crop_frame, sheet.map_frame),
            description=None
            if p.description is None
            else translate(p.description, sheet.crop_frame, sheet.map_frame),
            pair_id=p.pair_id,
        )
        for p in pset.pairs
    )
    return PredictionSet(
        target_map_id=pset.target_map_id,
        pairs=pairs,
        frame=sheet.crop_frame,
        repairs_applied=pset.repairs_applied,
        rejected_entries=pset.rejected_entries,
        flags=pset.flags,
        predictions_key=pset.predictions_key,
    )


def predict_map(
    example: LegendSheet,
    target: LegendSheet,
    k: int,
    gateway: Gateway,
    coordinate_frame: CoordinateFrame = CoordinateFrame.FULL_MAP,
    settings: RequestSettings = RequestSettings(),
) -> tuple[PredictionSet, MapOutcome]:
    spec = PromptSpec(example, target, k, coordinate_frame, settings)
    bundle = build_prompt(spec)
    exchange = gateway.send(bundle)
    if spec.coordinate_frame is CoordinateFrame.CROP_LOCAL:
        frame = target.crop_frame.local()
    else:
        frame = target.crop_frame
    pset = validate_pairs(parse_response(exchange.response_text, frame, target.map_id), frame)
    if spec.coordinate_frame is CoordinateFrame.CROP_LOCAL:
        pset = _to_full_map(pset, target)
    outcome = MapOutcome(
        map_id=target.map_id,
        request_digest=exchange.request_digest,
        input_tokens=exchange.input_tokens,
        output_tokens=exchange.output_tokens,
        estimated_input_tokens=estimate_tokens(bundle),
        latency_ms=exchange.latency_ms,
        pairs=len(pset.pairs),
        repairs_applied=list(pset.repairs_applied),
        rejected_entries=pset.rejected_entries,
        flags={pid: list(fl) for pid, fl in pset.flags.items()},
    )
    return pset, outcome


def predictions_from_sheets(sheets: Sequence[LegendSheet]) -> dict[str, PredictionSet]:
    """Wrap sheets loaded from a predictions manifest for evaluation."""
    return {
        s.map_id: PredictionSet(target_map_id=s.map_id, pairs=s.pairs, frame=s.crop_frame)
        for s in sheets
    }


def _run_id(config: dict, outcomes: Sequence[MapOutcome]) -> str:
    h = hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8"))
    for o in outcomes:
        h.update(f"{o.map_id}:{o.status}:{o.request_digest}".encode("utf-8"))
    return h.hexdigest()[:16]


def extract(
    manifest: Manifest,
    example_map_id: str,
    k: int,
    gateway: Gateway,
    coordinate_frame: CoordinateFrame = CoordinateFrame.FULL_MAP,
    settings: RequestSettings = RequestSettings(),
    extra_config: Optional[dict] = None,
) -> ExtractionResult:
    """Predict every map of ``manifest`` except the example map.

    Problems with the example map itself (unknown id, too few pairs) raise
    before any request; per-target failures are recorded in the run
    manifest and that map is left out of the predictions.
    """
    coordinate_frame = CoordinateFrame(coordinate_frame)
    example = manifest.get(example_map_id)
    select_examples(example, k)
    targets = [s for s in manifest.sheets if s.map_id != example_map_id]

    def work(target: LegendSheet):
        try:
            return predict_map(example, target, k, gateway, coordinate_frame, settings)
        except LegendForgeError as exc:
            log.error("map %s failed: %s", target.map_id, exc)
            return None, MapOutcome(
                map_id=target.map_id,
                status="error",
                error_type=type(exc).__name__,
                error=str(exc),
                exit_code=exc.exit_code,
            )

    with ThreadPoolExecutor(max_workers=max(1, gateway.parallelism)) as pool:
        results = list(pool.map(work, targets))

    predictions = {t.map_id: pset for t, (pset, _) in zip(targets, results) if pset is not None}
    outcomes = [outcome for _, outcome in results]
    config = {
        "example_map_id": example_map_id,
        "example_selection": "reading-order",
        "k": k,
        "coordinate_frame": coordinate_frame.value,
        "model_name": settings.model_name,
        "temperature": settings.temperature,
        "max_output_tokens": settings.max_output_tokens,
        "dataset": manifest.name,
        **(extra_config or {}),
    }
    run = RunManifest(
        run_id=_run_id(config, outcomes),
        timestamp=datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        config=config,
        outcomes=outcomes,
    )
    return ExtractionResult(predictions=predictions, run=run)


class AblationCellError(LegendForgeError):
    def __init__(self, map_id: str, k: int, cause: str, exit_code: int):
        self.map_id, self.k = map_id, k
        self.exit_code = exit_code
        super().__init__(f"ablation cell map={map_id} k={k} failed: {cause}")


def ablate(
    k_values: Sequence[int],
    manifest: Manifest,
    example_map_id: str,
    gateway: Gateway,
    coordinate_frame: CoordinateFrame = CoordinateFrame.FULL_MAP,
    settings: RequestSettings = RequestSettings(),
    threshold: float = DEFAULT_THRESHOLD,
    averaging: str = "micro",
) -> list[EvalReport]:
    """One evaluation report per in-context example count."""
    reports = []
    for k in k_values:
        try:
            result = extract(manifest, example_map_id, k, gateway, coordinate_frame, settings)
        except LegendForgeError as exc:
            raise AblationCellError(example_map_id, k, str(exc), exc.exit_code) from exc
        if result.run.failed:
            bad = result.run.failed[0]
            raise AblationCellError(bad.map_id, k, f"{bad.error_type}: {bad.error}", bad.exit_code)
        reports.append(
            evaluate_dataset(result.predictions, manifest.sheets, threshold, averaging, k=k)
        )
    return reports


def write_run_manifest(run: RunManifest, path: Path) -> None:
    path.write_text(json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
