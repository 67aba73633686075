from __future__ import annotations

import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from reworkd.svg import (
    color_map,
    contour_svg,
    grouped_histogram_svg,
    heatmap_svg,
    line_band_svg,
    marching_squares,
)

NS = "{http://www.w3.org/2000/svg}"


def _parse(text: str) -> ET.Element:
    root = ET.fromstring(text.encode("utf-8"))
    assert root.tag == NS + "svg"
    return root


def _rgb(fill: str) -> tuple[int, int, int]:
    return tuple(int(v) for v in re.match(r"rgb\((\d+),(\d+),(\d+)\)", fill).groups())


def test_line_band_well_formed_and_flat():
    x = np.linspace(0, 1, 20)
    root = _parse(line_band_svg(x, np.full(20, 0.3), np.full(20, 0.3), np.full(20, 0.3), "flat <&>"))
    line = root.find(f"{NS}polyline")
    ys = {p.split(",")[1] for p in line.get("points").split()}
    assert len(ys) == 1
    band = root.find(f"{NS}polygon")
    assert {p.split(",")[1] for p in band.get("points").split()} == ys
    assert root.find(f"{NS}text").text == "flat <&>"


def test_heatmap_two_by_two_monotone_colors():
    M = np.array([[0.0, 1.0], [2.0, 3.0]])
    root = _parse(heatmap_svg(M, [0, 1, 2], [0, 1, 2]))
    cells = [r for r in root.iter(f"{NS}rect") if r.get("class") == "cell"]
    assert len(cells) == 4
    by_value = sorted(cells, key=lambda r: float(r.get("data-value")))
    reds = [_rgb(c.get("fill"))[0] for c in by_value]
    blues = [_rgb(c.get("fill"))[2] for c in by_value]
    assert reds == sorted(reds) and len(set(reds)) == 4
    assert blues == sorted(blues, reverse=True)


def test_heatmap_cell_geometry():
    root = _parse(heatmap_svg(np.array([[1.0, 2.0], [3.0, 4.0]]), [0, 1, 2], [0, 1, 2]))
    cells = {float(r.get("data-value")): r for r in root.iter(f"{NS}rect") if r.get("class") == "cell"}
    # row index i runs up the y axis, column j along x
    assert float(cells[2.0].get("x")) > float(cells[1.0].get("x"))
    assert float(cells[3.0].get("y")) < float(cells[1.0].get("y"))


def test_color_map_endpoints():
    assert _rgb(color_map(0.0))[0] == 0 and _rgb(color_map(0.0))[2] == 255
    assert _rgb(color_map(1.0))[0] == 255 and _rgb(color_map(1.0))[2] == 0
    assert color_map(-1) == color_map(0) and color_map(2) == color_map(1)


@pytest.mark.parametrize("text", [
    line_band_svg([], [], [], [], "empty"),
    heatmap_svg(np.empty((0, 0)), [], [], "empty"),
    grouped_histogram_svg([], {}, "empty"),
    contour_svg([], [], np.empty((0, 0)), [0.0], "empty"),
])
def test_empty_series_placeholder(text):
    root = _parse(text)
    assert any(t.text == "no data" for t in root.iter(f"{NS}text"))


def test_grouped_histogram_bars_and_markers():
    root = _parse(grouped_histogram_svg([0, 1, 2, 3], {"a": [1, 2, 3], "b": [3, 0, 1]}, markers={"cut": 1.5}))
    bars = [r for r in root.iter(f"{NS}rect") if r.get("fill-opacity") == "0.8"]
    assert len(bars) == 6
    heights = [float(r.get("height")) for r in bars]
    assert heights[2] == pytest.approx(heights[3]) and heights[4] == 0.0
    assert any(t.text == "cut" for t in root.iter(f"{NS}text"))


def test_marching_squares_plane():
    x = y = np.linspace(0, 1, 5)
    Z = x[None, :] + 0 * y[:, None]
    segs = marching_squares(x, y, Z, 0.6)
    assert len(segs) == 4
    for a, b in segs:
        assert a[0] == pytest.approx(0.6) and b[0] == pytest.approx(0.6)


def test_contour_svg_deterministic_and_well_formed():
    g = np.linspace(0, 0.4, 9)
    Z = 0.1 - np.sqrt(np.outer(g, g))
    a = contour_svg(g, g, Z, [0.0, 0.05], "c", "zd", "zy", {"x": (0.1, 0.2)})
    assert a == contour_svg(g, g, Z, [0.0, 0.05], "c", "zd", "zy", {"x": (0.1, 0.2)})
    root = _parse(a)
    assert any(ln.get("stroke") == "#d62728" for ln in root.iter(f"{NS}line"))
    assert root.find(f"{NS}circle") is not None
