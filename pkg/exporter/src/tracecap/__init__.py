"""Attention capture and export for multimodal models.

Runs a capture-capable model, head-averages its per-step attention, and
writes trace files the analysis toolkit consumes; optionally drives the full
capture -> analyze -> re-prompt loop through the toolkit's CLI.
"""

from .errors import ExportError, PipelineFailedError, UnsupportedModelError
from .model import (
    CaptureModel,
    Crop,
    DummyModel,
    Generation,
    ImageSpec,
    PromptAssembly,
)
from .session import (
    DEFAULT_SYSTEM,
    CaptureSettings,
    ExportSession,
    export_trace,
    validate_trace_file,
)
from .twostage import (
    STAGE2_NOTE,
    ManifestCache,
    Provenance,
    TwoStageResult,
    manifest_crops,
    run_pipeline,
    two_stage_run,
)
from .writer import MAGIC, TRACE_VERSION, atomic_write, trace_header, write_trace_file

__version__ = "0.1.0"

__all__ = [
    "CaptureModel",
    "CaptureSettings",
    "Crop",
    "DEFAULT_SYSTEM",
    "DummyModel",
    "ExportError",
    "ExportSession",
    "Generation",
    "ImageSpec",
    "MAGIC",
    "ManifestCache",
    "PipelineFailedError",
    "PromptAssembly",
    "Provenance",
    "STAGE2_NOTE",
    "TRACE_VERSION",
    "TwoStageResult",
    "UnsupportedModelError",
    "atomic_write",
    "export_trace",
    "manifest_crops",
    "run_pipeline",
    "trace_header",
    "two_stage_run",
    "validate_trace_file",
    "write_trace_file",
]
