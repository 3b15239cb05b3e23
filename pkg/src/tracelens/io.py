"""On-disk formats: trace container, label manifest, crop manifest, dumps.

The trace container is a single file: 4 magic bytes, a little-endian u32
header length, a UTF-8 JSON header, then the dense float32 little-endian
payload laid out [step][layer][token] row-major. Everything else (label
manifests, tracer dumps, crop manifests, sweep reports) is plain JSON with
sorted keys so equal inputs serialize to equal bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    AttentionTrace,
    TokenLayout,
    VisualGrid,
    bbox_to_token_set,
    validate_trace,
)
from .errors import (
    MalformedPayloadError,
    RejectedInputError,
    TraceParseError,
    UnsupportedVersionError,
    ValidationFailedError,
)
from .recall import PerceptionInstance
from .regions import CropManifest, EvidenceRegion, Provenance, RegionConfig
from .tracer import KeyQuerySelection, TracerConfig, TraceScoreMap

MAGIC = b"ATRC"
TRACE_VERSION = 1
MANIFEST_VERSION = 1


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _load_json(path: Path, kind: str) -> dict:
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceParseError(f"cannot read {kind} {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedPayloadError(f"{kind} {path} is not a JSON object")
    return obj


def _require(header: dict, key: str, kind: str):
    if key not in header:
        raise MalformedPayloadError(f"{kind} is missing required field {key!r}")
    return header[key]


# ---------------------------------------------------------------------------
# trace container


def trace_header(trace: AttentionTrace) -> dict:
    lo = trace.layout
    header = {
        "version": TRACE_VERSION,
        "dims": {
            "t_steps": trace.n_steps,
            "n_layers": trace.n_layers,
            "n_sys": lo.n_sys,
            "n_vis": lo.n_vis,
            "n_query": lo.n_query,
        },
        "grid": {
            "rows": trace.grid.rows,
            "cols": trace.grid.cols,
            "image_w": trace.grid.image_w,
            "image_h": trace.grid.image_h,
        },
        "roles": {
            "system": [0, lo.n_sys],
            "visual": [lo.n_sys, lo.n_sys + lo.n_vis],
            "query": [lo.n_sys + lo.n_vis, lo.n_ctx],
        },
        "visual_order": "row-major",
        "head_agg": "mean",
        "prefix_restricted": True,
        "dtype": "float32-le",
        "query_texts": list(lo.query_texts),
        "output_texts": list(lo.output_texts),
        "image_ref": trace.image_ref,
    }
    if trace.l_max is not None:
        header["l_max"] = trace.l_max
    return header


def write_trace(trace: AttentionTrace, path: str | Path) -> Path:
    """Serialize a valid trace; refuses traces that fail validation."""
    verdict = validate_trace(trace)
    if not verdict.passed:
        raise ValidationFailedError(f"refusing to write invalid trace:\n{verdict.summary()}")
    header_bytes = _dump_json(trace_header(trace))
    payload = np.ascontiguousarray(trace.attn, dtype="<f4").tobytes()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
    return path


def read_trace(path: str | Path) -> AttentionTrace:
    """Parse a trace container; the validation verdict rides on the trace.

    Structural problems (bad magic, unknown version, truncated payload)
    raise; invariant violations in otherwise well-formed bytes do not, they
    come back as an attached FAIL verdict.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise TraceParseError(f"cannot read trace {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise MalformedPayloadError(f"{path} is not a trace container (bad magic)")
    (hlen,) = struct.unpack("<I", data[len(MAGIC):len(MAGIC) + 4])
    body = data[len(MAGIC) + 4:]
    if len(body) < hlen:
        raise MalformedPayloadError(
            f"{path}: header claims {hlen} bytes, only {len(body)} present"
        )
    try:
        header = json.loads(body[:hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayloadError(f"{path}: header is not valid JSON: {exc}") from exc

    version = _require(header, "version", "trace header")
    if version != TRACE_VERSION:
        raise UnsupportedVersionError(f"{path}: unknown format version {version!r}")

    dims = _require(header, "dims", "trace header")
    grid_h = _require(header, "grid", "trace header")
    try:
        t_steps, n_layers = int(dims["t_steps"]), int(dims["n_layers"])
        n_sys, n_vis, n_query = int(dims["n_sys"]), int(dims["n_vis"]), int(dims["n_query"])
        grid = VisualGrid(
            rows=int(grid_h["rows"]),
            cols=int(grid_h["cols"]),
            image_w=float(grid_h["image_w"]),
            image_h=float(grid_h["image_h"]),
        )
    except (KeyError, TypeError, ValueError, RejectedInputError) as exc:
        raise MalformedPayloadError(f"{path}: bad dims/grid in header: {exc}") from exc

    n_ctx = n_sys + n_vis + n_query
    expected = t_steps * n_layers * n_ctx * 4
    payload = body[hlen:]
    if len(payload) != expected:
        raise MalformedPayloadError(
            f"{path}: payload is {len(payload)} bytes, header dims require {expected}"
        )

    layout = TokenLayout(
        n_sys=n_sys,
        n_vis=n_vis,
        n_query=n_query,
        query_texts=tuple(header.get("query_texts", ())),
        output_texts=tuple(header.get("output_texts", ())),
    )
    arr = np.frombuffer(payload, dtype="<f4").reshape(t_steps, n_layers, n_ctx)
    l_max = header.get("l_max")
    trace = AttentionTrace(
        layout=layout,
        grid=grid,
        attn=arr,
        image_ref=str(header.get("image_ref", "")),
        l_max=None if l_max is None else int(l_max),
    )
    return replace(trace, verdict=validate_trace(trace))


# ---------------------------------------------------------------------------
# label manifest


@dataclass(frozen=True)
class LabelRecord:
    """One annotated instance: a trace file, a category, and its pixel bbox."""

    trace_path: str
    category: str
    category_token_texts: tuple[str, ...]
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "category_token_texts", tuple(self.category_token_texts))
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))


def write_label_manifest(records: Sequence[LabelRecord], path: str | Path) -> Path:
    path = Path(path)
    obj = {
        "version": MANIFEST_VERSION,
        "instances": [
            {
                "trace": r.trace_path,
                "category": r.category,
                "category_token_texts": list(r.category_token_texts),
                "bbox": list(r.bbox),
            }
            for r in records
        ],
    }
    path.write_bytes(_dump_json(obj))
    return path


def read_label_manifest(path: str | Path) -> list[LabelRecord]:
    path = Path(path)
    obj = _load_json(path, "label manifest")
    if obj.get("version") != MANIFEST_VERSION:
        raise UnsupportedVersionError(f"{path}: unknown manifest version {obj.get('version')!r}")
    records = []
    for rec in _require(obj, "instances", "label manifest"):
        try:
            records.append(LabelRecord(
                trace_path=rec["trace"],
                category=rec["category"],
                category_token_texts=tuple(rec["category_token_texts"]),
                bbox=tuple(rec["bbox"]),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedPayloadError(f"{path}: bad instance record: {exc}") from exc
    return records


def load_instances(path: str | Path) -> list[PerceptionInstance]:
    """Materialize manifest records; referenced traces must exist and pass."""
    path = Path(path)
    instances = []
    for rec in read_label_manifest(path):
        trace = read_trace(path.parent / rec.trace_path)
        if trace.verdict is not None and not trace.verdict.passed:
            raise ValidationFailedError(
                f"{rec.trace_path}: referenced trace fails validation:\n"
                f"{trace.verdict.summary()}"
            )
        instances.append(PerceptionInstance(
            trace=trace,
            category=rec.category,
            category_token_texts=rec.category_token_texts,
            gt_tokens=frozenset(bbox_to_token_set(trace.grid, rec.bbox)),
        ))
    return instances


# ---------------------------------------------------------------------------
# tracer dump


@dataclass(frozen=True, eq=False)
class TraceDump:
    """Round-trippable record of one tracer run."""

    image_ref: str
    grid: VisualGrid
    config: TracerConfig
    key: KeyQuerySelection
    vmap: TraceScoreMap


def write_trace_dump(dump: TraceDump, path: str | Path) -> Path:
    key, vmap = dump.key, dump.vmap
    obj = {
        "version": MANIFEST_VERSION,
        "image_ref": dump.image_ref,
        "grid": asdict(dump.grid),
        "config": asdict(dump.config),
        "query": {
            "trajectories": [[float(x) for x in row] for row in key.trajectories],
            "variances": [float(x) for x in key.variances],
            "zscores": [float(x) for x in key.zscores],
            "selected": list(key.selected),
            "degenerate": key.degenerate,
            "fallback_used": key.fallback_used,
        },
        "visual": {
            "alignment": None if vmap.alignment is None
            else [float(x) for x in vmap.alignment],
            "scores": [float(x) for x in vmap.scores],
            "zscores": [float(x) for x in vmap.zscores],
            "selected": list(vmap.selected),
            "fallback_used": vmap.fallback_used,
            "degenerate": vmap.degenerate,
        },
    }
    path = Path(path)
    path.write_bytes(_dump_json(obj))
    return path


def read_trace_dump(path: str | Path) -> TraceDump:
    path = Path(path)
    obj = _load_json(path, "tracer dump")
    if obj.get("version") != MANIFEST_VERSION:
        raise UnsupportedVersionError(f"{path}: unknown dump version {obj.get('version')!r}")
    try:
        grid = VisualGrid(**_require(obj, "grid", "tracer dump"))
        config = TracerConfig(**_require(obj, "config", "tracer dump"))
        q, v = obj["query"], obj["visual"]
        key = KeyQuerySelection(
            trajectories=np.asarray(q["trajectories"], dtype=np.float64),
            variances=np.asarray(q["variances"], dtype=np.float64),
            zscores=np.asarray(q["zscores"], dtype=np.float64),
            selected=tuple(int(i) for i in q["selected"]),
            degenerate=bool(q["degenerate"]),
            fallback_used=bool(q["fallback_used"]),
        )
        vmap = TraceScoreMap(
            alignment=None if v["alignment"] is None
            else np.asarray(v["alignment"], dtype=np.float64),
            scores=np.asarray(v["scores"], dtype=np.float64),
            zscores=np.asarray(v["zscores"], dtype=np.float64),
            selected=tuple(int(i) for i in v["selected"]),
            fallback_used=bool(v["fallback_used"]),
            degenerate=bool(v["degenerate"]),
        )
    except (KeyError, TypeError, ValueError, RejectedInputError) as exc:
        raise MalformedPayloadError(f"{path}: bad tracer dump: {exc}") from exc
    return TraceDump(
        image_ref=str(obj.get("image_ref", "")),
        grid=grid,
        config=config,
        key=key,
        vmap=vmap,
    )


# ---------------------------------------------------------------------------
# crop manifest


def write_crop_manifest(manifest: CropManifest, path: str | Path) -> Path:
    prov = manifest.provenance
    obj = {
        "version": MANIFEST_VERSION,
        "image_ref": manifest.image_ref,
        "noise_only": manifest.noise_only,
        "fallback_region": manifest.fallback_region,
        "regions": [
            {
                "rect": list(r.rect),
                "members": sorted(r.members),
                "cluster_id": r.cluster_id,
            }
            for r in manifest.regions
        ],
        "noise": sorted(manifest.noise),
        "provenance": {
            "tracer": None if prov.tracer is None else asdict(prov.tracer),
            "region": asdict(prov.region),
        },
    }
    path = Path(path)
    path.write_bytes(_dump_json(obj))
    return path


def read_crop_manifest(path: str | Path) -> CropManifest:
    path = Path(path)
    obj = _load_json(path, "crop manifest")
    if obj.get("version") != MANIFEST_VERSION:
        raise UnsupportedVersionError(f"{path}: unknown manifest version {obj.get('version')!r}")
    try:
        prov = obj["provenance"]
        tracer = None if prov["tracer"] is None else TracerConfig(**prov["tracer"])
        region = RegionConfig(**prov["region"])
        regions = tuple(
            EvidenceRegion(
                rect=tuple(int(v) for v in r["rect"]),
                members=frozenset(int(m) for m in r["members"]),
                cluster_id=int(r["cluster_id"]),
            )
            for r in obj["regions"]
        )
        return CropManifest(
            image_ref=str(obj.get("image_ref", "")),
            regions=regions,
            noise=frozenset(int(v) for v in obj["noise"]),
            provenance=Provenance(tracer=tracer, region=region),
            noise_only=bool(obj["noise_only"]),
            fallback_region=bool(obj.get("fallback_region", False)),
        )
    except (KeyError, TypeError, ValueError, RejectedInputError) as exc:
        raise MalformedPayloadError(f"{path}: bad crop manifest: {exc}") from exc


# ---------------------------------------------------------------------------
# sweep reports and heatmaps


def write_sweep_report(rows: Sequence, path: str | Path) -> Path:
    path = Path(path)
    path.write_bytes(_dump_json({
        "version": MANIFEST_VERSION,
        "rows": [asdict(r) for r in rows],
    }))
    return path


def render_sweep_table(rows: Sequence) -> str:
    """Tab-delimited table, one row per drift value."""
    if not rows:
        return ""
    cols = list(asdict(rows[0]).keys())
    lines = ["\t".join(cols)]
    for r in rows:
        d = asdict(r)
        lines.append("\t".join(
            f"{d[c]:.6f}" if isinstance(d[c], float) else str(d[c]) for c in cols
        ))
    return "\n".join(lines) + "\n"


def write_pgm(values: np.ndarray, path: str | Path) -> Path:
    """Binary portable graymap of a 2-D field, min-max normalized.

    A constant field renders mid-gray so flat inputs stay visibly neutral.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2 or v.size == 0:
        raise RejectedInputError("heatmap needs a non-empty 2-D field")
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-300:
        gray = np.full(v.shape, 128, dtype=np.uint8)
    else:
        gray = np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
    return path
