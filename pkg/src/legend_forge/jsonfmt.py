"""Deterministic JSON text with fixed two-decimal floats.

Layout matches ``json.dumps(obj, indent=2)``; the only difference is that
floats are always rendered with exactly two decimals (``472.30``, not
``472.3``). Ints, strings, bools and None are rendered as json would.
"""

from __future__ import annotations

import json
import math
from typing import Any


def format_coord(value: float) -> str:
    if not math.isfinite(value):
        raise ValueError(f"non-finite coordinate {value!r}")
    text = f"{value:.2f}"
    return "0.00" if text == "-0.00" else text


def dumps(obj: Any, *, sort_keys: bool = False, indent: int = 2) -> str:
    parts: list[str] = []
    _write(obj, parts, 0, indent, sort_keys)
    return "".join(parts)


def _write(obj: Any, out: list[str], level: int, indent: int, sort_keys: bool) -> None:
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        out.append(json.dumps(obj, ensure_ascii=False))
    elif isinstance(obj, float):
        out.append(format_coord(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        items = sorted(obj.items()) if sort_keys else list(obj.items())
        pad = " " * (indent * (level + 1))
        out.append("{\n")
        for i, (key, value) in enumerate(items):
            out.append(pad + json.dumps(str(key), ensure_ascii=False) + ": ")
            _write(value, out, level + 1, indent, sort_keys)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(" " * (indent * level) + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        pad = " " * (indent * (level + 1))
        out.append("[\n")
        for i, value in enumerate(obj):
            out.append(pad)
            _write(value, out, level + 1, indent, sort_keys)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(" " * (indent * level) + "]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
