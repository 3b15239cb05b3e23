"""Trace data model: token layout, patch-grid geometry, and validation.

An attention trace is a dense ``[step][layer][prefix token]`` tensor of
head-averaged post-softmax attention, restricted to the multimodal prefix
(system + visual + question tokens). Rows therefore sum to at most 1; the
step-0 row, which has no generated tokens to attend to, sums to exactly 1.
All types here are immutable after construction and every operation is a
pure function, so shared traces are safe to use concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import RejectedInputError

# Tolerance on prefix row mass (softmax rows carry float32 rounding).
ROW_MASS_TOL = 1e-4


@dataclass(frozen=True)
class TokenLayout:
    """Role structure of the multimodal prefix.

    The prefix is the concatenation system | visual | question, with lengths
    ``n_sys``, ``n_vis``, ``n_query``; the three index ranges partition
    ``[0, n_ctx)``.
    """

    n_sys: int
    n_vis: int
    n_query: int
    query_texts: tuple[str, ...] = ()
    output_texts: tuple[str, ...] = ()

    def __post_init__(self):
        if min(self.n_sys, self.n_vis, self.n_query) < 0:
            raise RejectedInputError("token counts must be non-negative")
        object.__setattr__(self, "query_texts", tuple(self.query_texts))
        object.__setattr__(self, "output_texts", tuple(self.output_texts))

    @property
    def n_ctx(self) -> int:
        return self.n_sys + self.n_vis + self.n_query

    @property
    def visual_range(self) -> range:
        return range(self.n_sys, self.n_sys + self.n_vis)

    @property
    def query_range(self) -> range:
        return range(self.n_sys + self.n_vis, self.n_ctx)


@dataclass(frozen=True)
class VisualGrid:
    """Patch grid of the source image; visual token v sits at row-major cell v."""

    rows: int
    cols: int
    image_w: float
    image_h: float

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise RejectedInputError("grid must have at least one cell")
        if self.image_w <= 0 or self.image_h <= 0:
            raise RejectedInputError("image dimensions must be positive")

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    @property
    def patch_w(self) -> float:
        return self.image_w / self.cols

    @property
    def patch_h(self) -> float:
        return self.image_h / self.rows


@dataclass(frozen=True)
class Violation:
    """One failed invariant; (t, l, index) are None where not applicable."""

    kind: str
    message: str
    t: Optional[int] = None
    l: Optional[int] = None
    index: Optional[int] = None
    magnitude: Optional[float] = None


@dataclass(frozen=True)
class ValidationVerdict:
    passed: bool
    violations: tuple[Violation, ...] = ()

    def summary(self) -> str:
        if self.passed:
            return "PASS"
        lines = [f"FAIL ({len(self.violations)} violation(s))"]
        lines += [f"  [{v.kind}] {v.message}" for v in self.violations]
        return "\n".join(lines)


@dataclass(frozen=True)
class AttentionTrace:
    """Prefix-restricted attention tensor plus its token layout and grid.

    ``attn`` has shape (n_steps, n_layers, n_ctx) and is stored float32,
    matching the on-disk payload; analytics cast to float64 at the point of
    use. The array is made read-only so traces stay immutable.
    """

    layout: TokenLayout
    grid: VisualGrid
    attn: np.ndarray
    image_ref: str = ""
    l_max: Optional[int] = None
    verdict: Optional[ValidationVerdict] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.attn, dtype=np.float32)
        if arr.ndim != 3:
            raise RejectedInputError(f"attention tensor must be 3-D, got shape {arr.shape}")
        if arr.shape[2] != self.layout.n_ctx:
            raise RejectedInputError(
                f"tensor width {arr.shape[2]} != prefix length {self.layout.n_ctx}"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "attn", arr)

    @property
    def n_steps(self) -> int:
        return self.attn.shape[0]

    @property
    def n_layers(self) -> int:
        return self.attn.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, AttentionTrace):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.grid == other.grid
            and self.image_ref == other.image_ref
            and self.l_max == other.l_max
            and self.attn.shape == other.attn.shape
            and self.attn.tobytes() == other.attn.tobytes()
        )


def validate_trace(trace: AttentionTrace) -> ValidationVerdict:
    """Check every trace invariant; returns a verdict, never raises.

    Checked: layout/grid consistency, text lengths, entry range [0, 1],
    per-row prefix mass <= 1 + tol, and step-0 mass == 1 +- tol.
    """
    bad: list[Violation] = []
    layout, grid = trace.layout, trace.grid

    if grid.n_cells != layout.n_vis:
        bad.append(Violation(
            "grid-mismatch",
            f"grid {grid.rows}x{grid.cols} has {grid.n_cells} cells but layout declares "
            f"{layout.n_vis} visual tokens",
        ))
    if layout.query_texts and len(layout.query_texts) != layout.n_query:
        bad.append(Violation(
            "layout-texts",
            f"{len(layout.query_texts)} query texts for {layout.n_query} query tokens",
        ))
    if layout.output_texts and len(layout.output_texts) != trace.n_steps:
        bad.append(Violation(
            "layout-texts",
            f"{len(layout.output_texts)} output texts for {trace.n_steps} steps",
        ))
    if trace.l_max is not None and not 0 <= trace.l_max < trace.n_layers:
        bad.append(Violation("layer-annotation", f"recorded l_max {trace.l_max} out of range"))

    a = trace.attn.astype(np.float64)

    low = np.argwhere(a < 0.0)
    high = np.argwhere(a > 1.0)
    for (t, l, n) in np.vstack([low, high]) if (len(low) or len(high)) else []:
        bad.append(Violation(
            "entry-range",
            f"attn[{t}][{l}][{n}] = {a[t, l, n]:.6g} outside [0, 1]",
            t=int(t), l=int(l), index=int(n), magnitude=float(a[t, l, n]),
        ))

    mass = a.sum(axis=2)
    for t, l in np.argwhere(mass > 1.0 + ROW_MASS_TOL):
        bad.append(Violation(
            "row-mass",
            f"prefix mass at (t={t}, l={l}) is {mass[t, l]:.6g} > 1 + {ROW_MASS_TOL}",
            t=int(t), l=int(l), magnitude=float(mass[t, l]),
        ))
    if trace.n_steps > 0:
        for (l,) in np.argwhere(np.abs(mass[0] - 1.0) > ROW_MASS_TOL):
            if mass[0, l] > 1.0 + ROW_MASS_TOL:
                continue  # already reported above
            bad.append(Violation(
                "step0-mass",
                f"step-0 mass at layer {l} is {mass[0, l]:.6g}, expected 1 +- {ROW_MASS_TOL}",
                t=0, l=int(l), magnitude=float(mass[0, l]),
            ))

    return ValidationVerdict(passed=not bad, violations=tuple(bad))


def _check_step_layer(trace: AttentionTrace, t: int, l: int) -> None:
    if not 0 <= t < trace.n_steps:
        raise RejectedInputError(f"step {t} out of range [0, {trace.n_steps})")
    if not 0 <= l < trace.n_layers:
        raise RejectedInputError(f"layer {l} out of range [0, {trace.n_layers})")


def visual_slice(trace: AttentionTrace, t: int, l: int) -> np.ndarray:
    """Attention from output step t at layer l to the visual tokens, raster order."""
    _check_step_layer(trace, t, l)
    r = trace.layout.visual_range
    return trace.attn[t, l, r.start:r.stop].astype(np.float64)


def query_slice(trace: AttentionTrace, t: int, l: int) -> np.ndarray:
    """Attention from output step t at layer l to the question tokens."""
    _check_step_layer(trace, t, l)
    r = trace.layout.query_range
    return trace.attn[t, l, r.start:r.stop].astype(np.float64)


def system_slice(trace: AttentionTrace, t: int, l: int) -> np.ndarray:
    """Attention from output step t at layer l to the system tokens."""
    _check_step_layer(trace, t, l)
    return trace.attn[t, l, :trace.layout.n_sys].astype(np.float64)


def token_center(grid: VisualGrid, v: int) -> tuple[float, float]:
    """Image-plane (x, y) center of visual token v's patch."""
    if not 0 <= v < grid.n_cells:
        raise RejectedInputError(f"visual ordinal {v} out of range [0, {grid.n_cells})")
    r, c = divmod(v, grid.cols)
    return ((c + 0.5) * grid.patch_w, (r + 0.5) * grid.patch_h)


def token_patch_rect(grid: VisualGrid, v: int) -> tuple[float, float, float, float]:
    """Pixel rectangle (x0, y0, x1, y1) covered by visual token v's patch."""
    if not 0 <= v < grid.n_cells:
        raise RejectedInputError(f"visual ordinal {v} out of range [0, {grid.n_cells})")
    r, c = divmod(v, grid.cols)
    return (c * grid.patch_w, r * grid.patch_h, (c + 1) * grid.patch_w, (r + 1) * grid.patch_h)


def bbox_to_token_set(grid: VisualGrid, bbox: Iterable[float]) -> set[int]:
    """Visual ordinals whose patches overlap the pixel bbox with area > 0.

    ``bbox`` is (x0, y0, x1, y1) and must lie inside the image with positive
    area; the result is never empty.
    """
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if x1 <= x0 or y1 <= y0:
        raise RejectedInputError(f"bbox {(x0, y0, x1, y1)} has non-positive area")
    if x0 < 0 or y0 < 0 or x1 > grid.image_w or y1 > grid.image_h:
        raise RejectedInputError(
            f"bbox {(x0, y0, x1, y1)} outside image {grid.image_w}x{grid.image_h}"
        )

    cells = np.arange(grid.n_cells)
    r, c = np.divmod(cells, grid.cols)
    px0, py0 = c * grid.patch_w, r * grid.patch_h
    overlap_w = np.minimum(x1, px0 + grid.patch_w) - np.maximum(x0, px0)
    overlap_h = np.minimum(y1, py0 + grid.patch_h) - np.maximum(y0, py0)
    hit = (overlap_w > 0) & (overlap_h > 0)
    return set(int(v) for v in cells[hit])
