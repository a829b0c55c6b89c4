"""
Report emission: atomic file writes, CSV/JSON artifacts and SVG plots

Every artifact embeds the resolved run configuration so it is
self-describing. CSV files carry it in a leading comment line.
"""

import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from matplotlib.ticker import PercentFormatter

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CURVE_COLORS = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#bcbd22", "#17becf", "#7f7f7f",
]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write to a temp file in the target directory, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.debug(f"Wrote {path} ({len(payload)} bytes)")
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and paths into plain JSON values"""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    return value


def dumps(data: Any) -> str:
    return json.dumps(to_jsonable(data), indent=2, sort_keys=True)


def write_json(path: PathLike, data: Mapping[str, Any], run_config: Optional[Mapping[str, Any]] = None) -> Path:
    payload = dict(data)
    if run_config is not None:
        payload["run_config"] = run_config
    return atomic_write_text(path, dumps(payload) + "\n")


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]],
              run_config: Optional[Mapping[str, Any]] = None) -> Path:
    buf = io.StringIO()
    if run_config is not None:
        buf.write("# run_config=" + json.dumps(to_jsonable(run_config), sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format_cell(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path: PathLike) -> Tuple[List[str], List[List[str]]]:
    """Read a CSV written by write_csv, skipping comment lines"""
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f if not line.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def _format_cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(to_jsonable(value))


def _svg_text(fig: Figure, title: str, run_config: Optional[Mapping[str, Any]]) -> str:
    metadata: Dict[str, Any] = {"Title": title, "Date": None}
    if run_config is not None:
        metadata["Description"] = json.dumps(to_jsonable(run_config), sort_keys=True)
    buf = io.StringIO()
    # element ids derive from svg.hashsalt; fixed salt, byte-stable files
    with matplotlib.rc_context({"svg.hashsalt": "xai-eval", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata=metadata, bbox_inches="tight")
    return buf.getvalue()


def svg_line_plot(series: Mapping[str, Tuple[Sequence[float], Sequence[float]]], title: str,
                  xlabel: str, ylabel: str, run_config: Optional[Mapping[str, Any]] = None,
                  dashed: Sequence[str] = (), width: float = 6.4, height: float = 4.2) -> str:
    """
    Render named (x, y) series as an SVG line chart

    The y axis spans [0, 1] (scores and accuracies are probabilities);
    x values are fractions and are labelled as percentages.
    """
    fig = Figure(figsize=(width, height))
    ax = fig.add_subplot()
    for i, (name, (xs, ys)) in enumerate(series.items()):
        ax.plot(xs, ys, label=name, color=CURVE_COLORS[i % len(CURVE_COLORS)],
                linestyle="--" if name in dashed else "-", linewidth=1.5)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlim(left=0.0)
    ax.xaxis.set_major_formatter(PercentFormatter(xmax=1.0, decimals=0))
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(loc="center left", bbox_to_anchor=(1.02, 0.5), frameon=False, fontsize="small")
    return _svg_text(fig, title, run_config)


def svg_histogram(counts: Sequence[int], edges: Sequence[float], title: str, xlabel: str,
                  run_config: Optional[Mapping[str, Any]] = None,
                  width: float = 5.2, height: float = 3.6) -> str:
    """Render pre-binned counts as an SVG bar chart"""
    fig = Figure(figsize=(width, height))
    ax = fig.add_subplot()
    edges = np.asarray(edges, dtype=np.float64)
    ax.stairs(np.asarray(counts, dtype=np.float64), edges, fill=True, color=CURVE_COLORS[0])
    ax.set_xlim(edges[0], edges[-1])
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    return _svg_text(fig, title, run_config)
