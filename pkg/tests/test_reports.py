import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from flowcast import reports


def _rep(**kw):
    rep = {
        "anchor": "FI", "direction": "outgoing",
        "options": ["A", "FdI", "No vote"], "reference": "A", "nonref": ["FdI", "No vote"],
        "covariates": ["geog", "educ"],
        "beta": [[0.5, 0.0], [-0.25, 1.0]], "z": [[3.1, 0.0], [-1.9, 4.2]],
        "mask": [[1, 0], [1, 1]],
        "reported_effects": [[-0.01, -0.2], [0.04, 0.0], [-0.03, 0.2]],
        "flags": [["strong", ""], ["weak", "strong"]],
        "pct_deviance_explained": 71.25,
    }
    rep.update(kw)
    return rep


def test_table3_layout_and_flags():
    rows = reports.table3_rows([_rep()], ["geog", "educ", "ksoc"], ["FdI", "No vote", "A"])
    assert rows[0] == ["destination", "origin", "geog", "educ", "ksoc",
                       "geog_flag", "educ_flag", "ksoc_flag"]
    # the reference destination has no block
    assert [r[0] for r in rows[1:]] == ["FdI", "No vote"]
    assert rows[1] == ["FdI", "FI", "0.040", "0.000", "0.000", "strong", "", ""]
    assert rows[2] == ["No vote", "FI", "-0.030", "0.200", "0.000", "weak", "strong", ""]


def test_tableC1_pairs_b_and_z():
    rows = reports.tableC1_rows([_rep()], ["geog", "educ"])
    assert rows[0] == ["model", "pct_deviance", "option", "coeff", "geog", "educ"]
    assert rows[1] == ["outgoing FI", "71.3", "FdI", "b", "0.50", "0.00"]
    assert rows[2] == ["outgoing FI", "71.3", "FdI", "z", "3.10", ""]
    assert rows[4][4:] == ["-1.90", "4.20"]


def test_write_rows_roundtrip(tmp_path):
    rows = [["a", "b"], ["1", "x,y"]]
    reports.write_rows(rows, tmp_path / "t.csv")
    with open(tmp_path / "t.csv", newline="", encoding="utf-8") as fh:
        assert list(csv.reader(fh)) == rows


def test_write_json_is_stable(tmp_path):
    obj = {"b": [1.5, 2], "a": "Più"}
    reports.write_json(obj, tmp_path / "a.json")
    reports.write_json(obj, tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text(encoding="utf-8")) == obj


def test_heatmap_is_wellformed_svg():
    vals = np.array([[10.0, 90.0], [55.5, 44.5]])
    svg = reports.heatmap_svg(vals, ["r1", "r<2>"], ["c1", "c2"], "t & t", vmax=100.0)
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    texts = [t.text for t in root.iter() if t.tag.endswith("text")]
    assert "55.5" in texts and "r<2>" in texts and "t & t" in texts


@pytest.mark.parametrize("series", [[[1.0, -2.0, 3.0]], [[0.0, 0.0, 0.0], [5.0, 1.0, 2.0]]])
def test_bar_chart_is_wellformed_svg(series):
    svg = reports.bar_chart_svg(["a", "b", "c"], series, [f"s{k}" for k in range(len(series))], "v")
    root = ET.fromstring(svg)
    rects = [e for e in root.iter() if e.tag.endswith("rect")]
    assert len(rects) >= 3 * len(series)
