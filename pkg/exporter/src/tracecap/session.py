"""Capture sessions: run the model once, head-average, write, validate.

The exporter records what the model did; it never scores or clusters. The
emitted file is checked by invoking the analysis CLI as a subprocess, which
is the only coupling between the two packages besides the file formats.
"""

from __future__ import annotations

import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ExportError, UnsupportedModelError
from .model import CaptureModel, Generation, ImageSpec, PromptAssembly
from .writer import trace_header, write_trace_file

DEFAULT_SYSTEM = ("answer", "precisely")


@dataclass(frozen=True)
class CaptureSettings:
    """What to keep from a capture.

    ``layers_kept`` is an ascending tuple of layer indices, or None for all
    layers. Head aggregation is fixed to the mean; the field exists so the
    choice is recorded explicitly in session provenance.
    """

    layers_kept: Optional[tuple[int, ...]] = None
    head_agg: str = "mean"
    validate: bool = True

    def __post_init__(self):
        if self.head_agg != "mean":
            raise ExportError(f"unsupported head aggregation {self.head_agg!r}")
        if self.layers_kept is not None:
            kept = tuple(int(l) for l in self.layers_kept)
            object.__setattr__(self, "layers_kept", kept)
            if not kept:
                raise ExportError("layers_kept must name at least one layer")
            if any(l < 0 for l in kept) or list(kept) != sorted(set(kept)):
                raise ExportError("layers_kept must be ascending non-negative indices")


@dataclass(frozen=True)
class ExportSession:
    """Record of one completed export: prompt, settings, file, generation."""

    model: str
    prompt: PromptAssembly
    settings: CaptureSettings
    trace_path: Path
    generation: Generation


def validate_trace_file(path: str | Path) -> subprocess.CompletedProcess:
    return subprocess.run(
        [sys.executable, "-m", "tracelens", "validate", str(path)],
        capture_output=True,
        text=True,
    )


def export_trace(
    model: CaptureModel,
    image: ImageSpec,
    question: str,
    out_path: str | Path,
    settings: CaptureSettings = CaptureSettings(),
    system: tuple[str, ...] = DEFAULT_SYSTEM,
) -> ExportSession:
    """Generate once against ``image`` and write the capture as a trace file."""
    prompt = PromptAssembly(system=tuple(system), images=(image,), question=question)
    gen = model.generate(prompt)
    if gen.attn_heads is None:
        raise UnsupportedModelError(
            f"model {model.name!r} does not expose attention outputs"
        )

    heads = np.asarray(gen.attn_heads, dtype=np.float64)
    n_vis = gen.grid_rows * gen.grid_cols
    n_ctx = len(prompt.system) + n_vis + len(gen.query_texts)
    expected = (len(gen.output_texts), heads.shape[1] if heads.ndim == 4 else -1)
    if heads.ndim != 4 or heads.shape[0] != expected[0] or heads.shape[3] != n_ctx:
        raise ExportError(
            f"capture shape {heads.shape} inconsistent with tokenizer/patchifier "
            f"counts (steps {len(gen.output_texts)}, prefix {n_ctx})"
        )

    attn = heads.mean(axis=2)
    if settings.layers_kept is not None:
        if settings.layers_kept[-1] >= attn.shape[1]:
            raise ExportError(
                f"layers_kept {settings.layers_kept} out of range for "
                f"{attn.shape[1]} captured layers"
            )
        attn = attn[:, list(settings.layers_kept), :]

    header = trace_header(
        t_steps=attn.shape[0],
        n_layers=attn.shape[1],
        n_sys=len(prompt.system),
        n_vis=n_vis,
        n_query=len(gen.query_texts),
        grid_rows=gen.grid_rows,
        grid_cols=gen.grid_cols,
        image_w=image.width,
        image_h=image.height,
        query_texts=gen.query_texts,
        output_texts=gen.output_texts,
        image_ref=image.ref,
    )
    out_path = write_trace_file(header, attn, out_path)

    if settings.validate:
        proc = validate_trace_file(out_path)
        if proc.returncode != 0:
            raise ExportError(
                f"emitted trace failed validation (exit {proc.returncode}):\n"
                f"{proc.stdout}{proc.stderr}"
            )
    return ExportSession(
        model=model.name,
        prompt=prompt,
        settings=settings,
        trace_path=out_path,
        generation=gen,
    )
