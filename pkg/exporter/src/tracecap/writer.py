"""Standalone trace-container writer.

Implements the on-disk contract the analysis toolkit reads: 4 magic bytes,
a little-endian u32 header length, a UTF-8 JSON header, then the float32
little-endian payload laid out [step][layer][token] row-major. Files appear
atomically via a temp file renamed into place.
"""

from __future__ import annotations

import contextlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ExportError

MAGIC = b"ATRC"
TRACE_VERSION = 1


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def atomic_write(path: str | Path, blob: bytes) -> Path:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise
    return path


def trace_header(
    *,
    t_steps: int,
    n_layers: int,
    n_sys: int,
    n_vis: int,
    n_query: int,
    grid_rows: int,
    grid_cols: int,
    image_w: float,
    image_h: float,
    query_texts: Sequence[str],
    output_texts: Sequence[str],
    image_ref: str,
) -> dict:
    return {
        "version": TRACE_VERSION,
        "dims": {
            "t_steps": t_steps,
            "n_layers": n_layers,
            "n_sys": n_sys,
            "n_vis": n_vis,
            "n_query": n_query,
        },
        "grid": {
            "rows": grid_rows,
            "cols": grid_cols,
            "image_w": image_w,
            "image_h": image_h,
        },
        "roles": {
            "system": [0, n_sys],
            "visual": [n_sys, n_sys + n_vis],
            "query": [n_sys + n_vis, n_sys + n_vis + n_query],
        },
        "visual_order": "row-major",
        "head_agg": "mean",
        "prefix_restricted": True,
        "dtype": "float32-le",
        "query_texts": list(query_texts),
        "output_texts": list(output_texts),
        "image_ref": image_ref,
    }


def write_trace_file(header: dict, payload: np.ndarray, path: str | Path) -> Path:
    """Serialize one capture; payload shape must match the header dims."""
    dims = header["dims"]
    n_ctx = dims["n_sys"] + dims["n_vis"] + dims["n_query"]
    expected = (dims["t_steps"], dims["n_layers"], n_ctx)
    arr = np.asarray(payload)
    if arr.shape != expected:
        raise ExportError(
            f"payload shape {arr.shape} does not match header dims {expected}"
        )
    header_bytes = _dump_json(header)
    blob = (
        MAGIC
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + np.ascontiguousarray(arr, dtype="<f4").tobytes()
    )
    return atomic_write(path, blob)
