"""legend-forge command line: extract, evaluate, ablate, index, search, schema.

Settings resolve as command-line flag > config file > built-in default. The
config file is INI with a single ``[legend-forge]`` section of key = value
lines, e.g.::

    [legend-forge]
    model_name = gpt-4o
    temperature = 0
    parallelism = 4

API keys are only ever read from the environment variable named by
``api_key_env_var`` (default LEGEND_FORGE_API_KEY).

Exit codes: 0 success, 1 validation or user error, 2 transport or gateway
error, 3 internal invariant breach.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import dataset, evaluation, index, pipeline, prompting
from .errors import InvariantBreach, LegendForgeError, ParseError, UserError, ValidationError
from .gateway import GatewayConfig, LiveGateway, RecordingGateway, ReplayGateway
from .geometry import BBox
from .prompting import CoordinateFrame, RequestSettings

log = logging.getLogger("legend_forge")

CONFIG_SECTION = "legend-forge"
DEFAULTS = {
    "model_name": "gpt-4o",
    "temperature": 0.0,
    "max_output_tokens": 2048,
    "endpoint_url": GatewayConfig.endpoint_url,
    "api_key_env_var": GatewayConfig.api_key_env_var,
    "timeout": 120.0,
    "max_retries": 3,
    "parallelism": 4,
    "profile": "openai-chat",
    "backoff_base": 1.0,
    "k": 15,
    "coordinate_frame": CoordinateFrame.FULL_MAP.value,
    "threshold": evaluation.DEFAULT_THRESHOLD,
    "averaging": "micro",
    "matching": "optimal",
}
TYPES = {
    "temperature": float,
    "max_output_tokens": int,
    "timeout": float,
    "max_retries": int,
    "parallelism": int,
    "backoff_base": float,
    "k": int,
    "threshold": float,
}
SECRET_KEYS = {"api_key", "apikey", "key", "token", "secret"}

# Two reference example pairs used by the schema subcommand.
SCHEMA_EXAMPLES = (
    (BBox(6630.85, 472.34, 6779.79, 560.64), BBox(6214.89, 572.34, 7186.17, 621.28)),
    (BBox(4985.96, 1233.62, 5145.11, 1324.26), BBox(4572.34, 1244.68, 5342.55, 1298.94)),
)


# -- logging -----------------------------------------------------------------------


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        doc = {
            "time": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname.lower(),
            "logger": record.name,
            "message": record.getMessage(),
        }
        if record.exc_info:
            doc["exception"] = self.formatException(record.exc_info)
        return json.dumps(doc, ensure_ascii=False)


class RedactSecrets(logging.Filter):
    BEARER = re.compile(r"(Bearer\s+)\S+")

    def __init__(self, secrets: Sequence[str] = ()):
        super().__init__()
        self.secrets = [s for s in secrets if s]

    def filter(self, record: logging.LogRecord) -> bool:
        msg = record.getMessage()
        clean = self.BEARER.sub(r"\1***", msg)
        for s in self.secrets:
            clean = clean.replace(s, "***")
        if clean != msg:
            record.msg, record.args = clean, None
        return True


def setup_logging(verbosity: int, api_key_env_var: str) -> None:
    level = logging.WARNING - 10 * verbosity
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    handler.addFilter(RedactSecrets([os.environ.get(api_key_env_var, "")]))
    root = logging.getLogger("legend_forge")
    root.handlers[:] = [handler]
    root.setLevel(max(level, logging.DEBUG))
    root.propagate = False


# -- config ------------------------------------------------------------------------


def read_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except FileNotFoundError as exc:
        raise ParseError(f"config file {path} not found") from exc
    except configparser.Error as exc:
        raise ParseError(f"config file {path}: {exc}") from exc
    if not parser.has_section(CONFIG_SECTION):
        raise ParseError(f"config file {path} has no [{CONFIG_SECTION}] section")
    out = {}
    for key, raw in parser.items(CONFIG_SECTION):
        if key in SECRET_KEYS:
            raise ValidationError(f"config file {path}: secrets must come from the environment, not {key!r}")
        if key not in DEFAULTS:
            raise ValidationError(f"config file {path}: unknown key {key!r}")
        try:
            out[key] = TYPES.get(key, str)(raw)
        except ValueError as exc:
            raise ValidationError(f"config file {path}: bad value for {key}: {raw!r}") from exc
    return out


def resolve(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    settings.update(read_config_file(getattr(args, "config", None)))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def gateway_config(cfg: dict) -> GatewayConfig:
    return GatewayConfig(
        endpoint_url=cfg["endpoint_url"],
        api_key_env_var=cfg["api_key_env_var"],
        model_name=cfg["model_name"],
        timeout=cfg["timeout"],
        max_retries=cfg["max_retries"],
        parallelism=cfg["parallelism"],
        profile=cfg["profile"],
        backoff_base=cfg["backoff_base"],
    )


def request_settings(cfg: dict) -> RequestSettings:
    return RequestSettings(cfg["model_name"], cfg["temperature"], cfg["max_output_tokens"])


def make_gateway(args: argparse.Namespace, cfg: dict):
    gw_cfg = gateway_config(cfg)
    if args.mode == "replay":
        if not args.cassettes:
            raise UserError("replay mode needs --cassettes DIR")
        return ReplayGateway(args.cassettes, parallelism=gw_cfg.parallelism)
    live = LiveGateway(gw_cfg)
    return RecordingGateway(live, args.cassettes) if args.cassettes else live


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# -- subcommands ---------------------------------------------------------------------


def cmd_extract(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    manifest = dataset.load_manifest(args.dataset)
    example = manifest.get(args.example_map)
    prompting.select_examples(example, cfg["k"])
    gateway = make_gateway(args, cfg)

    result = pipeline.extract(
        manifest,
        args.example_map,
        cfg["k"],
        gateway,
        CoordinateFrame(cfg["coordinate_frame"]),
        request_settings(cfg),
        extra_config={
            "mode": args.mode,
            "threshold": cfg["threshold"],
            "profile": cfg["profile"],
        },
    )
    out = _out_dir(args)
    dataset.save_manifest(
        out / "predictions.json", f"{manifest.name}-predictions", result.prediction_sheets(manifest)
    )
    pipeline.write_run_manifest(result.run, out / "run_manifest.json")
    for o in result.run.outcomes:
        print(f"{o.map_id}\t{o.status}\tpairs={o.pairs}\trejected={o.rejected_entries}"
              + (f"\t{o.error_type}: {o.error}" if o.error else ""))
    failed = result.run.failed
    return max((o.exit_code for o in failed), default=0)


def _write_reports(out: Path, stem: str, reports, row_header: str) -> str:
    table = evaluation.render_table(reports, row_header)
    _write(out / f"{stem}.txt", table)
    _write(out / f"{stem}.json", evaluation.reports_json(reports))
    _write(out / f"{stem}.csv", evaluation.reports_csv(reports))
    return table


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    preds = dataset.load_manifest(args.predictions, check_rasters=False)
    truth = dataset.load_manifest(args.truth, check_rasters=False)
    report = evaluation.evaluate_dataset(
        pipeline.predictions_from_sheets(preds.sheets),
        truth.sheets,
        threshold=cfg["threshold"],
        averaging=cfg["averaging"],
        label=args.label or preds.name or "predictions",
        strategy=cfg["matching"],
    )
    table = _write_reports(_out_dir(args), "report", [report], "Method")
    sys.stdout.write(table)
    return 0


def _parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise UserError(f"--k expects comma-separated integers, got {text!r}") from exc
    if not ks:
        raise UserError("--k needs at least one value")
    return ks


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = resolve(args)
    ks = _parse_k_list(args.k_values)
    manifest = dataset.load_manifest(args.dataset)
    gateway = make_gateway(args, cfg)
    reports = pipeline.ablate(
        ks,
        manifest,
        args.example_map,
        gateway,
        CoordinateFrame(cfg["coordinate_frame"]),
        request_settings(cfg),
        threshold=cfg["threshold"],
        averaging=cfg["averaging"],
    )
    table = _write_reports(_out_dir(args), "ablation", reports, "# Examples")
    sys.stdout.write(table)
    return 0


def _load_transcripts(path: Optional[str]) -> dict[str, dict[str, str]]:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"transcripts file {path}: {exc}") from exc
    if not isinstance(doc, dict) or not all(isinstance(v, dict) for v in doc.values()):
        raise ParseError(f"transcripts file {path} must map map_id -> {{pair_id: text}}")
    return doc


def cmd_index(args: argparse.Namespace) -> int:
    manifest = dataset.load_manifest(args.manifest)
    transcripts = _load_transcripts(args.transcripts)
    source = index.EntrySource.PREDICTED if args.source == "predicted" else index.EntrySource.GROUND_TRUTH
    entries = []
    for sheet in manifest.sheets:
        raster = dataset.load_raster(sheet)
        entries += index.entries_for_sheet(sheet, raster, source, transcripts.get(sheet.map_id))
    path = index.index_build(entries, _out_dir(args) / "legend_index.jsonl")
    print(f"indexed {len(entries)} entries from {len(manifest.sheets)} maps -> {path}")
    return 0


def cmd_search(args: argparse.Namespace) -> int:
    entries = index.index_load(args.index)
    color = index.parse_hex_color(args.color) if args.color else None
    if color is not None and args.max_distance is None:
        raise UserError("--color needs --max-distance")
    q = index.Query(
        text_terms=tuple(args.text or ()),
        color=color,
        max_distance=args.max_distance or 0.0,
        map_filter=frozenset(args.map) if args.map else None,
    )
    hits = index.search(entries, q)
    if args.limit is not None:
        hits = hits[: args.limit]
    for e in hits:
        doc = e.to_dict()
        if color is not None:
            doc["color_distance"] = round(index.color_distance(e.dominant_color, color), 4)
        print(json.dumps(doc, sort_keys=True, ensure_ascii=False))
    return 0


def cmd_schema(args: argparse.Namespace) -> int:
    block = prompting.render_json_block(
        SCHEMA_EXAMPLES[: args.k], "example_map_legend.tiff", "target_map_legend.tiff"
    )
    sys.stdout.write(block + "\n")
    if args.out:
        _write(_out_dir(args) / "prompt_schema.json", block + "\n")
    return 0


# -- parser ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _gateway_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", required=True, help="dataset manifest file or directory")
    p.add_argument("--example-map", required=True, help="map_id of the annotated example legend")
    p.add_argument("--mode", choices=("live", "replay"), default="replay")
    p.add_argument("--cassettes", help="cassette directory (replay source; live mode records into it)")
    p.add_argument("--frame", dest="coordinate_frame", choices=[f.value for f in CoordinateFrame])
    p.add_argument("--model", dest="model_name")
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-output-tokens", type=int)
    p.add_argument("--endpoint", dest="endpoint_url")
    p.add_argument("--api-key-env", dest="api_key_env_var", help="name of the env var holding the key")
    p.add_argument("--profile")
    p.add_argument("--timeout", type=float)
    p.add_argument("--max-retries", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="legend-forge", description="Legend item/description extraction toolkit")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--config", help="INI config file with a [legend-forge] section")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="predict legend pairs for every non-example map")
    _gateway_flags(p)
    p.add_argument("--k", type=int, help="number of in-context example pairs (default 15)")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="score a predictions manifest against ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--averaging", choices=("micro", "macro"))
    p.add_argument("--matching", choices=("optimal", "greedy"))
    p.add_argument("--label", help="row label in the report table")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="evaluate several in-context example counts")
    _gateway_flags(p)
    p.add_argument("--k", dest="k_values", default="5,10,15,20", help="comma-separated example counts")
    p.add_argument("--averaging", choices=("micro", "macro"))
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("index", help="build a legend search index from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--source", choices=("ground-truth", "predicted"), default="ground-truth")
    p.add_argument("--transcripts", help="JSON {map_id: {pair_id: description text}}")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="query a legend index")
    p.add_argument("--index", required=True)
    p.add_argument("--text", action="append", help="keyword; repeat for AND")
    p.add_argument("--color", help="RRGGBB hex")
    p.add_argument("--max-distance", type=float)
    p.add_argument("--map", action="append", help="restrict to map_id; repeatable")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("schema", help="print the prompt JSON block for a sample spec")
    p.add_argument("--k", type=int, choices=(1, 2), default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    env_var = getattr(args, "api_key_env_var", None) or DEFAULTS["api_key_env_var"]
    setup_logging(args.verbose, env_var)
    try:
        return args.func(args)
    except LegendForgeError as exc:
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        print(f"legend-forge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # anything else is a bug, not a user error
        log.exception("%s: internal error", args.command)
        print(f"legend-forge {args.command}: internal error: {exc!r}", file=sys.stderr)
        return InvariantBreach.exit_code


if __name__ == "__main__":
    sys.exit(main())
