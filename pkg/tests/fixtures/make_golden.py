"""Regenerate tests/fixtures/golden from a replay run over the synthetic fixture.

The run happens in a scratch directory laid out as ``<tmp>/dataset`` and
``<tmp>/out`` so the relative raster paths written into predictions.json
match what the tests produce.

    python tests/fixtures/make_golden.py
"""

from __future__ import annotations

import shutil
import tempfile
from pathlib import Path

from legend_forge.cli import main

HERE = Path(__file__).resolve().parent
SYNTHETIC = HERE / "synthetic"
GOLDEN = HERE / "golden"
EXAMPLE_ID = "m00-example"
GOLDEN_FILES = ("predictions.json", "report.txt", "report.json", "report.csv")


def replay_run(root: Path) -> Path:
    """Copy the fixture under ``root`` and run extract + evaluate; return the out dir."""
    ds, out = root / "dataset", root / "out"
    if not ds.exists():
        shutil.copytree(SYNTHETIC, ds)
    rc = main([
        "extract", "--dataset", str(ds), "--example-map", EXAMPLE_ID,
        "--mode", "replay", "--cassettes", str(ds / "cassettes"), "--out", str(out),
    ])
    if rc:
        raise SystemExit(f"extract exited {rc}")
    rc = main([
        "evaluate", "--predictions", str(out / "predictions.json"), "--truth", str(ds),
        "--label", "k=15", "--out", str(out),
    ])
    if rc:
        raise SystemExit(f"evaluate exited {rc}")
    return out


def build() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        out = replay_run(Path(tmp))
        GOLDEN.mkdir(exist_ok=True)
        for name in GOLDEN_FILES:
            shutil.copyfile(out / name, GOLDEN / name)


if __name__ == "__main__":
    build()
