"""
Float32 raster files with JSON sidecars, and 8-bit heatmap PNGs

A raster file is: magic, u32 version, u32 header length, JSON header
({"shape": [...]}) and a little-endian float32 payload in row-major order.
Stacks (T x H x W) use the same format with a 3-D shape. Metadata that
describes the raster (method, label, aggregation, seed lineage, run config)
lives in `<name>.json` next to it.
"""

import io
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
from PIL import Image, PngImagePlugin

from xai_eval.errors import DataError
from xai_eval.report import atomic_write_bytes, dumps, to_jsonable

logger = logging.getLogger(__name__)

RASTER_MAGIC = b"XAIEF32\x00"
RASTER_VERSION = 1

PathLike = Union[str, Path]


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def encode_raster(values: np.ndarray) -> bytes:
    arr = np.asarray(values)
    if not np.all(np.isfinite(arr)):
        raise DataError("raster values must be finite")
    header = json.dumps({"shape": list(arr.shape), "dtype": "<f4"}).encode("utf-8")
    return b"".join([
        RASTER_MAGIC,
        struct.pack("<II", RASTER_VERSION, len(header)),
        header,
        np.ascontiguousarray(arr, dtype="<f4").tobytes(),
    ])


def decode_raster(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    prefix = len(RASTER_MAGIC)
    if blob[:prefix] != RASTER_MAGIC or len(blob) < prefix + 8:
        raise DataError(f"{source} is not a raster file")
    version, header_len = struct.unpack_from("<II", blob, prefix)
    if version != RASTER_VERSION:
        raise DataError(f"{source}: unsupported raster version {version}")
    offset = prefix + 8
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
    except (ValueError, KeyError) as e:
        raise DataError(f"{source}: corrupt raster header: {e}") from None
    offset += header_len
    count = int(np.prod(shape)) if shape else 1
    if len(blob) - offset != 4 * count:
        raise DataError(f"{source}: payload holds {len(blob) - offset} bytes, shape {shape} needs {4 * count}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)


def write_raster(path: PathLike, values: np.ndarray, metadata: Optional[Mapping[str, Any]] = None,
                 run_config: Optional[Mapping[str, Any]] = None) -> Path:
    """Write the raster and its JSON sidecar; returns the raster path"""
    path = Path(path)
    atomic_write_bytes(path, encode_raster(values))
    side: Dict[str, Any] = {"shape": list(np.shape(values)), "raster": path.name, **(metadata or {})}
    if run_config is not None:
        side["run_config"] = run_config
    atomic_write_bytes(sidecar_path(path), (dumps(side) + "\n").encode("utf-8"))
    return path


def read_raster(path: PathLike) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Raster values plus sidecar metadata (empty when no sidecar exists)"""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Raster not found: {path}")
    values = decode_raster(path.read_bytes(), str(path))
    side = sidecar_path(path)
    metadata = json.loads(side.read_text(encoding="utf-8")) if side.is_file() else {}
    return values, metadata


def heatmap_array(values: np.ndarray) -> np.ndarray:
    """Min-max normalise to uint8; a constant map becomes all zeros"""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_heatmap_png(path: PathLike, values: np.ndarray,
                      run_config: Optional[Mapping[str, Any]] = None) -> Path:
    values = np.asarray(values)
    if values.ndim != 2:
        raise DataError(f"heatmap needs a 2-D map, got shape {values.shape}")
    info = PngImagePlugin.PngInfo()
    if run_config is not None:
        info.add_text("run_config", json.dumps(to_jsonable(run_config), sort_keys=True))
    buf = io.BytesIO()
    Image.fromarray(heatmap_array(values), mode="L").save(buf, format="PNG", pnginfo=info)
    return atomic_write_bytes(path, buf.getvalue())
