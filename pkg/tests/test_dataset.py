import json
import random
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from legend_forge import dataset
from legend_forge.dataset import LegendPair, LegendSheet, load_annotations, load_raster, reading_order
from legend_forge.errors import (
    DecodeError,
    DimensionMismatch,
    MissingRaster,
    ParseError,
    ValidationError,
)
from legend_forge.geometry import BBox, Frame

from conftest import REF_DESC_1, REF_DESC_2, REF_ITEM_1, REF_ITEM_2, SYNTHETIC, write_png


def _manifest(tmp_path: Path, pairs, frame=None, raster="legend.png") -> Path:
    frame = frame or {"origin_x": 4000, "origin_y": 400, "width": 3400, "height": 1000}
    if raster and not (tmp_path / raster).exists():
        write_png(tmp_path / raster, int(frame["width"]), int(frame["height"]))
    doc = {
        "dataset": "t",
        "maps": [{"map_id": "m1", "raster": raster, "crop_frame": frame, "pairs": pairs}],
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


def test_one_map_two_pairs(tmp_path):
    path = _manifest(
        tmp_path,
        [
            {"pair_id": "a", "legend_item": list(REF_ITEM_1), "description": list(REF_DESC_1)},
            {"pair_id": "b", "legend_item": list(REF_ITEM_2), "description": list(REF_DESC_2)},
        ],
    )
    sheets = load_annotations(path)
    assert len(sheets) == 1
    assert [p.pair_id for p in sheets[0].pairs] == ["a", "b"]
    assert sheets[0].pairs[0].item == BBox(*REF_ITEM_1)
    # directory form resolves manifest.json
    assert load_annotations(tmp_path) == sheets


def test_description_equal_to_item_rejected(tmp_path):
    path = _manifest(
        tmp_path,
        [{"pair_id": "a", "legend_item": list(REF_ITEM_1), "description": list(REF_ITEM_1)}],
    )
    with pytest.raises(ValidationError):
        load_annotations(path)


def test_reference_pairs_round_trip_byte_identical(tmp_path):
    write_png(tmp_path / "example_map_legend.png", 3400, 1000)
    sheet = LegendSheet(
        "example",
        tmp_path / "example_map_legend.png",
        Frame(4000, 400, 3400, 1000),
        (
            LegendPair(BBox(*REF_ITEM_1), BBox(*REF_DESC_1), "1"),
            LegendPair(BBox(*REF_ITEM_2), BBox(*REF_DESC_2), "2"),
        ),
    )
    first = dataset.save_manifest(tmp_path / "a.json", "reference", [sheet])
    text = first.read_text()
    assert "6630.85" in text and "472.34" in text and "7186.17" in text
    reloaded = dataset.load_manifest(first)
    second = dataset.save_manifest(tmp_path / "b.json", reloaded.name, reloaded.sheets)
    assert first.read_bytes() == second.read_bytes()
    assert reloaded.sheets[0].pairs == sheet.pairs


def test_committed_fixture_is_canonical(tmp_path):
    original = (SYNTHETIC / "manifest.json").read_bytes()
    m = dataset.load_manifest(SYNTHETIC)
    text = dataset.manifest_text(m.name, m.sheets, SYNTHETIC)
    assert text.encode("utf-8") == original
    assert b"\r\n" not in original


def test_symbol_only_pair_round_trips(tmp_path):
    path = _manifest(tmp_path, [{"pair_id": "s", "legend_item": [4100, 500, 4200, 560]}])
    sheet = load_annotations(path)[0]
    assert sheet.pairs[0].description is None
    out = dataset.save_manifest(tmp_path / "again.json", "t", [sheet])
    assert "description" not in out.read_text()


@pytest.mark.parametrize(
    "pairs, error",
    [
        ([{"pair_id": "a", "legend_item": [0, 0, 10, 10], "description": [20, 0, 30, 10]}], ValidationError),
        ([{"pair_id": "a", "legend_item": [4100, 500, 4100, 560]}], ValidationError),
        ([{"pair_id": "a", "legend_item": [4100, 500, 4200]}], ParseError),
        ([{"legend_item": [4100, 500, 4200, 560]}], ParseError),
        ([{"pair_id": "a", "legend_item": [4100, 500, 4200, 560]}, {"pair_id": "a", "legend_item": [4300, 500, 4400, 560]}], ValidationError),
    ],
)
def test_invalid_manifests(tmp_path, pairs, error):
    with pytest.raises(error):
        load_annotations(_manifest(tmp_path, pairs))


def test_box_within_one_pixel_tolerance_accepted(tmp_path):
    path = _manifest(tmp_path, [{"pair_id": "a", "legend_item": [3999.5, 399.2, 4100, 500]}])
    assert len(load_annotations(path)[0].pairs) == 1


def test_malformed_json(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_annotations(path)


def test_missing_raster(tmp_path):
    path = _manifest(tmp_path, [], raster="nope.png")
    (tmp_path / "nope.png").unlink()
    with pytest.raises(MissingRaster):
        load_annotations(path)


def test_sheets_sorted_by_map_id(tmp_path):
    write_png(tmp_path / "r.png", 10, 10)
    frame = {"origin_x": 0, "origin_y": 0, "width": 10, "height": 10}
    doc = {"dataset": "t", "maps": [
        {"map_id": mid, "raster": "r.png", "crop_frame": frame, "pairs": []} for mid in ("zeta", "alpha", "mid")
    ]}
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    assert [s.map_id for s in load_annotations(tmp_path)] == ["alpha", "mid", "zeta"]


# -- rasters --------------------------------------------------------------------


def _sheet(raster: Path, w: float, h: float) -> LegendSheet:
    return LegendSheet("m", raster, Frame(0, 0, w, h), ())


def test_load_raster_solid_red(tmp_path):
    png = write_png(tmp_path / "red.png", 100, 50, (255, 0, 0))
    r = load_raster(_sheet(png, 100, 50))
    assert (r.width, r.height) == (100, 50)
    assert r.pixels.shape == (50, 100, 3)
    assert (r.pixels == np.array([255, 0, 0], dtype=np.uint8)).all()


def test_load_raster_dimension_mismatch(tmp_path):
    png = write_png(tmp_path / "red.png", 100, 50, (255, 0, 0))
    with pytest.raises(DimensionMismatch):
        load_raster(_sheet(png, 200, 50))


def test_sixteen_bit_tiff_matches_opencv(tmp_path):
    cv2 = pytest.importorskip("cv2")
    tifffile = pytest.importorskip("tifffile")
    rng = np.random.default_rng(7)
    arr = rng.integers(0, 65536, size=(12, 17, 3), dtype=np.uint16)
    path = tmp_path / "deep.tif"
    tifffile.imwrite(path, arr, photometric="rgb")

    raster = load_raster(_sheet(path, 17, 12))
    reference = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)[:, :, ::-1]  # BGR -> RGB
    assert reference.dtype == np.uint16
    assert np.array_equal(raster.pixels, (reference >> 8).astype(np.uint8))


def test_sixteen_bit_grey_tiff(tmp_path):
    tifffile = pytest.importorskip("tifffile")
    arr = np.array([[0, 256, 65535]], dtype=np.uint16)
    path = tmp_path / "grey.tif"
    tifffile.imwrite(path, arr)
    r = load_raster(_sheet(path, 3, 1))
    assert r.pixels[0, :, 0].tolist() == [0, 1, 255]
    assert (r.pixels[..., 0] == r.pixels[..., 2]).all()


def test_undecodable_raster(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(DecodeError):
        load_raster(_sheet(bad, 1, 1))


def test_unsupported_format(tmp_path):
    jpg = tmp_path / "x.jpg"
    Image.new("RGB", (4, 4)).save(jpg)
    with pytest.raises(DecodeError):
        load_raster(_sheet(jpg, 4, 4))


def test_raster_is_read_only(tmp_path):
    r = load_raster(_sheet(write_png(tmp_path / "w.png", 4, 4), 4, 4))
    with pytest.raises(ValueError):
        r.pixels[0, 0, 0] = 1


# -- reading order ----------------------------------------------------------------


def _pair(pid, x, y):
    return LegendPair(BBox(x, y, x + 40, y + 20), None, pid)


def test_reading_order_vertical_stack():
    top, bottom = _pair("t", 100, 10), _pair("b", 10, 200)
    assert reading_order([bottom, top]) == [top, bottom]


def test_reading_order_same_band_leftmost_first():
    left, right = _pair("l", 10, 120), _pair("r", 300, 105)
    assert reading_order([right, left]) == [left, right]


def test_reading_order_shuffled_twenty():
    pairs = [_pair(f"p{i}", (i % 2) * 400, (i // 2) * 70) for i in range(20)]
    expected = reading_order(pairs)
    shuffled = pairs[:]
    random.Random(3).shuffle(shuffled)
    assert reading_order(shuffled) == expected


@settings(max_examples=60)
@given(
    st.lists(
        st.tuples(st.integers(0, 2000), st.integers(0, 2000)), min_size=1, max_size=25
    ),
    st.randoms(use_true_random=False),
)
def test_reading_order_permutation_invariant_and_idempotent(coords, rnd):
    pairs = [_pair(f"p{i}", x, y) for i, (x, y) in enumerate(coords)]
    once = reading_order(pairs)
    shuffled = pairs[:]
    rnd.shuffle(shuffled)
    assert reading_order(shuffled) == once
    assert reading_order(once) == once
