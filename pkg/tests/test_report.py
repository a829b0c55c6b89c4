import json
from pathlib import Path

import numpy as np

from xai_eval.report import atomic_write_text, read_csv, svg_histogram, svg_line_plot, to_jsonable, write_csv, write_json


def test_csv_starts_with_run_config(tmp_path):
    path = write_csv(tmp_path / "t.csv", ["a", "b"], [[1, 0.5], [np.int64(2), np.float32(0.25)]], {"seed": 4})
    first = path.read_text().splitlines()[0]
    assert first.startswith("# run_config=")
    assert json.loads(first[len("# run_config="):]) == {"seed": 4}
    header, rows = read_csv(path)
    assert header == ["a", "b"]
    assert rows == [["1", "0.5"], ["2", "0.25"]]


def test_json_embeds_run_config(tmp_path):
    path = write_json(tmp_path / "r.json", {"value": np.float64(0.5)}, {"seed": 1})
    assert json.loads(path.read_text()) == {"value": 0.5, "run_config": {"seed": 1}}


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "sub" / "file.txt"
    atomic_write_text(target, "first")
    atomic_write_text(target, "second")
    assert target.read_text() == "second"
    assert [p.name for p in target.parent.iterdir()] == ["file.txt"]


def test_to_jsonable():
    value = {1: np.arange(3), "p": Path("x/y"), "f": np.float32(1.5), "b": np.bool_(True)}
    assert to_jsonable(value) == {"1": [0, 1, 2], "p": "x/y", "f": 1.5, "b": True}


def test_line_plot_carries_series_and_config():
    series = {"gradient@q0.5": ([0.0, 0.1, 0.2], [0.9, 0.6, 0.4]), "random": ([0.0, 0.1, 0.2], [0.9, 0.8, 0.7])}
    svg = svg_line_plot(series, "Pixel flipping: disk", "flipped pixels", "score", {"seed": 0}, dashed=["random"])
    assert "<svg" in svg
    assert "gradient@q0.5" in svg and "random" in svg
    assert "&quot;seed&quot;: 0" in svg or '"seed": 0' in svg


def test_plots_are_byte_stable():
    counts, edges = np.histogram([0.1, 0.2, 0.2, 0.9], bins=20, range=(0.0, 1.0))
    first = svg_histogram(counts.tolist(), edges.tolist(), "disk", "probability", {"seed": 2})
    again = svg_histogram(counts.tolist(), edges.tolist(), "disk", "probability", {"seed": 2})
    assert first == again
