"""Localize question-critical visual evidence in multimodal attention traces.

The package takes per-step, per-layer attention captured during multimodal
generation and answers three questions: which layer best retrieves known
visual clues, which question and visual tokens the generation actually
leaned on, and which image regions those tokens form.
"""

from .core import (
    AttentionTrace,
    TokenLayout,
    ValidationVerdict,
    Violation,
    VisualGrid,
    bbox_to_token_set,
    query_slice,
    system_slice,
    token_center,
    token_patch_rect,
    validate_trace,
    visual_slice,
)
from .errors import (
    EmptyEvaluationError,
    MalformedPayloadError,
    RejectedInputError,
    TraceLensError,
    TraceParseError,
    UnsupportedVersionError,
    ValidationFailedError,
)
from .io import (
    LabelRecord,
    TraceDump,
    load_instances,
    read_crop_manifest,
    read_label_manifest,
    read_trace,
    read_trace_dump,
    write_crop_manifest,
    write_label_manifest,
    write_pgm,
    write_sweep_report,
    write_trace,
    write_trace_dump,
)
from .recall import (
    ABSTAIN,
    PerceptionInstance,
    RecallReport,
    clue_recall,
    layer_recall,
    mention_steps,
    scan_layers,
    top_k_tokens,
)
from .regions import (
    NOISE,
    CropManifest,
    EvidenceRegion,
    Provenance,
    RegionConfig,
    build_regions,
    dbscan,
)
from .synth import (
    GroundTruth,
    RecoveryScore,
    SweepRow,
    SynthSpec,
    drift_sweep,
    evaluate_recovery,
    generate,
)
from .tracer import (
    KeyQuerySelection,
    TracerConfig,
    TraceScoreMap,
    alignment_weights,
    run_tracer,
    select_key_query_tokens,
    select_visual_tokens,
    trace_scores,
    zscore,
)

__version__ = "0.1.0"

__all__ = [
    "ABSTAIN",
    "AttentionTrace",
    "CropManifest",
    "EmptyEvaluationError",
    "EvidenceRegion",
    "GroundTruth",
    "KeyQuerySelection",
    "LabelRecord",
    "MalformedPayloadError",
    "NOISE",
    "PerceptionInstance",
    "Provenance",
    "RecallReport",
    "RecoveryScore",
    "RegionConfig",
    "RejectedInputError",
    "SweepRow",
    "SynthSpec",
    "TokenLayout",
    "TraceDump",
    "TraceLensError",
    "TraceParseError",
    "TraceScoreMap",
    "TracerConfig",
    "UnsupportedVersionError",
    "ValidationFailedError",
    "ValidationVerdict",
    "Violation",
    "VisualGrid",
    "alignment_weights",
    "bbox_to_token_set",
    "build_regions",
    "clue_recall",
    "dbscan",
    "drift_sweep",
    "evaluate_recovery",
    "generate",
    "layer_recall",
    "load_instances",
    "mention_steps",
    "query_slice",
    "read_crop_manifest",
    "read_label_manifest",
    "read_trace",
    "read_trace_dump",
    "run_tracer",
    "scan_layers",
    "select_key_query_tokens",
    "select_visual_tokens",
    "system_slice",
    "token_center",
    "token_patch_rect",
    "top_k_tokens",
    "trace_scores",
    "validate_trace",
    "visual_slice",
    "write_crop_manifest",
    "write_label_manifest",
    "write_pgm",
    "write_sweep_report",
    "write_trace",
    "write_trace_dump",
    "zscore",
]
