"""Capture, analyze, re-prompt: the two-stage loop.

Stage 1 exports a trace and runs the analysis CLI to get a crop manifest.
Stage 2 re-invokes the model on the original image followed by each manifest
crop, in manifest order, as separate images. A manifest cache lets repeated
questions on the same image skip Stage 1 entirely.
"""

from __future__ import annotations

import hashlib
import json
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .errors import PipelineFailedError
from .model import CaptureModel, Crop, ImageSpec, PromptAssembly
from .session import DEFAULT_SYSTEM, CaptureSettings, export_trace
from .writer import atomic_write

STAGE2_NOTE = (
    "stage 2 prompt: original image first, then each manifest crop in manifest "
    "order, question text unchanged"
)


@dataclass(frozen=True)
class Provenance:
    model: str
    trace_sha256: str  # empty when the manifest came from the cache
    manifest_sha256: str
    manifest_path: str
    manifest_cached: bool
    pipeline_report: Optional[dict]
    stage2_note: str = STAGE2_NOTE


@dataclass(frozen=True)
class TwoStageResult:
    answer: str
    stage1_answer: str
    crops: tuple[Crop, ...]
    provenance: Provenance


class ManifestCache:
    """Keeps pipeline manifests keyed by (image ref, pipeline flags)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _entry(self, image_ref: str, flags: Sequence[str]) -> Path:
        key = hashlib.sha256(
            json.dumps({"image_ref": image_ref, "flags": list(flags)},
                       sort_keys=True).encode("utf-8")
        ).hexdigest()
        return self.root / f"{key}.json"

    def get(self, image_ref: str, flags: Sequence[str]) -> Optional[Path]:
        entry = self._entry(image_ref, flags)
        return entry if entry.exists() else None

    def put(self, image_ref: str, flags: Sequence[str], manifest_path: Path) -> Path:
        return atomic_write(
            self._entry(image_ref, flags), Path(manifest_path).read_bytes()
        )


def run_pipeline(
    trace_path: str | Path, manifest_path: str | Path, flags: Sequence[str] = ()
) -> dict:
    """Invoke the analysis pipeline on an exported trace; returns its report."""
    proc = subprocess.run(
        [sys.executable, "-m", "tracelens", "pipeline", str(trace_path),
         "--deterministic", *flags, "--out", str(manifest_path)],
        capture_output=True,
        text=True,
    )
    try:
        report = json.loads(proc.stdout)
    except json.JSONDecodeError:
        report = None
    if proc.returncode != 0:
        raise PipelineFailedError(
            f"analysis pipeline exited {proc.returncode}",
            report=report,
            stderr=proc.stderr,
        )
    return report


def manifest_crops(manifest_path: str | Path, image: ImageSpec) -> tuple[Crop, ...]:
    obj = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    return tuple(
        Crop(image=image, rect=tuple(int(v) for v in region["rect"]))
        for region in obj["regions"]
    )


def two_stage_run(
    model: CaptureModel,
    image: ImageSpec,
    question: str,
    workdir: str | Path,
    pipeline_flags: Sequence[str] = (),
    settings: CaptureSettings = CaptureSettings(),
    system: tuple[str, ...] = DEFAULT_SYSTEM,
    cache: Optional[ManifestCache] = None,
) -> TwoStageResult:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    flags = tuple(pipeline_flags)

    cached = cache.get(image.ref, flags) if cache is not None else None
    if cached is not None:
        manifest_path = cached
        report = None
        stage1_answer = ""
        trace_sha = ""
    else:
        session = export_trace(
            model, image, question, workdir / "stage1.trace", settings, system
        )
        stage1_answer = session.generation.answer
        trace_sha = hashlib.sha256(session.trace_path.read_bytes()).hexdigest()
        manifest_path = workdir / "manifest.json"
        report = run_pipeline(session.trace_path, manifest_path, flags)
        if cache is not None:
            cache.put(image.ref, flags, manifest_path)

    crops = manifest_crops(manifest_path, image)
    stage2 = model.generate(
        PromptAssembly(system=tuple(system), images=(image, *crops), question=question)
    )
    return TwoStageResult(
        answer=stage2.answer,
        stage1_answer=stage1_answer,
        crops=crops,
        provenance=Provenance(
            model=model.name,
            trace_sha256=trace_sha,
            manifest_sha256=hashlib.sha256(
                Path(manifest_path).read_bytes()
            ).hexdigest(),
            manifest_path=str(manifest_path),
            manifest_cached=cached is not None,
            pipeline_report=report,
        ),
    )
