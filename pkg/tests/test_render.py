import re
from pathlib import Path

import numpy as np

from sgcanon.render import chart_from_csv, line_chart, rasterize, render_report
from sgcanon.sg_core import Layout
from sgcanon.sg_data import SynthConfig, synth_generate

GOLDEN = Path(__file__).parent / "data" / "golden_scene.svg"


def golden_scene():
    return synth_generate(SynthConfig(n_objects=5, seed=42), 1)[0]


def test_empty_scene_is_canvas_only():
    svg = rasterize(Layout(np.zeros((0, 4))))
    assert svg.count("<rect") == 1 and "<text" not in svg


def test_two_boxes_scaled():
    svg = rasterize(Layout([[0.1, 0.2, 0.5, 0.6], [0.0, 0.0, 1.0, 0.25]]), size=200)
    rects = re.findall(r'<rect x="([\d.]+)" y="([\d.]+)" width="([\d.]+)" height="([\d.]+)"', svg)
    assert rects[1:] == [("20", "40", "80", "80"), ("0", "0", "200", "50")]


def test_golden_file():
    g, lay = golden_scene()
    assert rasterize(lay, g) == GOLDEN.read_text()


def test_labels_and_determinism():
    g, lay = golden_scene()
    svg = rasterize(lay, g)
    assert svg.count("<text") == g.num_nodes
    assert "size=" in svg
    assert svg == rasterize(lay, g)


def test_line_chart_series_and_empty():
    svg = line_chart({"a": [(0, 0.1), (1, 0.3)], "b": [(0, 0.2)]}, title="t<1>")
    assert svg.count("<polyline") == 2 and "t&lt;1&gt;" in svg
    assert "<polyline" not in line_chart({})


def test_report_charts(tmp_path):
    (tmp_path / "grid.csv").write_text(
        "mode,layers,objects,status,miou\nbaseline,2,4,ok,0.2\nbaseline,2,8,ok,0.3\nwsgc-s,2,4,failed,\n"
    )
    cell = tmp_path / "cells" / "x"
    cell.mkdir(parents=True)
    (cell / "report.csv").write_text("epoch,loss,p_trans[A],p_trans[B]\n0,1,0.5,0.5\n1,0.9,0.7,0.3\n")
    made = render_report(tmp_path)
    assert sorted(p.name for p in made) == ["grid.svg", "p_trans.svg"]
    assert chart_from_csv(tmp_path / "grid.csv", "objects", "miou", ("mode",)).count("<polyline") == 1
