from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from legend_forge.dataset import LegendPair, LegendSheet
from legend_forge.geometry import BBox, Frame

FIXTURES = Path(__file__).parent / "fixtures"
SYNTHETIC = FIXTURES / "synthetic"
GOLDEN = FIXTURES / "golden"
EXAMPLE_ID = "m00-example"

# Reference example pairs (full-map pixels) shared by prompt, manifest and geometry tests.
REF_ITEM_1 = (6630.85, 472.34, 6779.79, 560.64)
REF_DESC_1 = (6214.89, 572.34, 7186.17, 621.28)
REF_ITEM_2 = (4985.96, 1233.62, 5145.11, 1324.26)
REF_DESC_2 = (4572.34, 1244.68, 5342.55, 1298.94)

REFERENCE_OUTPUT = """{
  "predictions for target_map_legend.tiff": [
    {
      "legend_item": [4700.25, 678.40, 4852.67, 750.95],
      "description": [4302.14, 690.50, 5100.80, 738.80]
    },
    {
      "legend_item": [3150.10, 910.25, 3305.20, 980.30],
      "description": [2800.00, 920.40, 3500.90, 965.00]
    }
    // ... additional detected pairs
  ]
}"""


def write_png(path: Path, width: int, height: int, color=(255, 255, 255)) -> Path:
    arr = np.zeros((height, width, 3), dtype=np.uint8)
    arr[:, :] = color
    Image.fromarray(arr).save(path)
    return path


@pytest.fixture
def synthetic_copy(tmp_path: Path) -> Path:
    """The replay fixture copied to tmp_path/dataset (outputs go to tmp_path/out)."""
    dst = tmp_path / "dataset"
    shutil.copytree(SYNTHETIC, dst)
    return dst


@pytest.fixture
def reference_sheets(tmp_path: Path) -> tuple[LegendSheet, LegendSheet]:
    """Example and target sheets carrying the two reference example pairs."""
    frame = Frame(4000, 400, 3400, 1000)
    ex_raster = write_png(tmp_path / "example_map_legend.png", 3400, 1000)
    tg_raster = write_png(tmp_path / "target_map_legend.png", 3400, 1000)
    example = LegendSheet(
        "example",
        ex_raster,
        frame,
        (
            LegendPair(BBox(*REF_ITEM_1), BBox(*REF_DESC_1), "1"),
            LegendPair(BBox(*REF_ITEM_2), BBox(*REF_DESC_2), "2"),
        ),
    )
    target = LegendSheet("target", tg_raster, frame, ())
    return example, target


# -- acceptance summary -----------------------------------------------------------

_criteria: dict[int, tuple[str, list[str]]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    number, title = marker
    _criteria.setdefault(number, (title, []))[1].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        rep._criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes = _criteria[number]
        verdict = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")
