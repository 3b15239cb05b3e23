"""Hand-rolled trace-container parsing for tests.

Deliberately independent of both packages' readers: tests check the bytes
against the documented layout, not against either implementation.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


def parse_trace(path) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    assert data[:4] == b"ATRC"
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    dims = header["dims"]
    n_ctx = dims["n_sys"] + dims["n_vis"] + dims["n_query"]
    arr = np.frombuffer(data[8 + hlen:], dtype="<f4").reshape(
        dims["t_steps"], dims["n_layers"], n_ctx
    )
    return header, arr
