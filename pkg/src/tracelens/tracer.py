"""Question -> output -> vision tracing over a single reference layer.

The pipeline has four stages. First, each question token's attention
trajectory along the output axis is reduced to a population variance;
z-scoring the variances and thresholding at ``tau_q`` picks the key query
tokens (the ones the generation keeps returning to). Second, per-step
alignment weights sum the attention each output step pays to those key
tokens. Third, every visual token's trace score accumulates alignment-
weighted attention over all steps. Fourth, z-scoring the trace scores and
thresholding at ``tau_v`` picks the decisive visual tokens, with a top-k
fallback so the selection is never empty.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .core import AttentionTrace
from .errors import RejectedInputError

# Below this population sigma the z-score is treated as undefined.
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class TracerConfig:
    layer: int
    tau_q: float = 1.0
    tau_v: float = 1.0
    # None = derive from the trace as max(1, round(0.05 * n_vis))
    fallback_k: Optional[int] = None

    def __post_init__(self):
        if self.layer < 0:
            raise RejectedInputError("layer must be non-negative")
        if self.fallback_k is not None and self.fallback_k < 1:
            raise RejectedInputError("fallback_k must be at least 1")


def effective_fallback_k(config: TracerConfig, n_vis: int) -> int:
    if config.fallback_k is not None:
        return config.fallback_k
    return max(1, round(0.05 * n_vis))


@dataclass(frozen=True, eq=False)
class KeyQuerySelection:
    """Stage-one result: which question tokens steer the generation.

    ``selected`` holds query-relative ordinals in ascending order. When the
    variance vector is degenerate (all equal) every query is selected and
    ``degenerate`` is set; when the threshold alone selects none, the single
    top-z token is taken and ``fallback_used`` is set.
    """

    trajectories: np.ndarray  # (n_query, n_steps)
    variances: np.ndarray  # (n_query,)
    zscores: np.ndarray  # (n_query,)
    selected: tuple[int, ...]
    degenerate: bool = False
    fallback_used: bool = False


@dataclass(frozen=True, eq=False)
class TraceScoreMap:
    """Stage-four result: per-visual-token trace scores and the final set."""

    alignment: Optional[np.ndarray]  # (n_steps,); None until run_tracer fills it
    scores: np.ndarray  # (n_vis,)
    zscores: np.ndarray  # (n_vis,)
    selected: tuple[int, ...]
    fallback_used: bool = False
    degenerate: bool = False


def zscore(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Standard score with population sigma; constant input -> (zeros, True)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise RejectedInputError("zscore needs a non-empty 1-D vector")
    sigma = float(v.std())
    if sigma < SIGMA_FLOOR:
        return np.zeros_like(v), True
    return (v - v.mean()) / sigma, False


def _top_k_ordinals(scores: np.ndarray, k: int) -> tuple[int, ...]:
    # stable sort on descending score: ties resolve toward the smaller ordinal
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:k]))


def select_key_query_tokens(trace: AttentionTrace, config: TracerConfig) -> KeyQuerySelection:
    """Pick the query tokens whose attention varies most along the output axis."""
    if config.layer >= trace.n_layers:
        raise RejectedInputError(f"layer {config.layer} out of range [0, {trace.n_layers})")
    if trace.layout.n_query < 1:
        raise RejectedInputError("trace has no query tokens")
    r = trace.layout.query_range
    trajectories = trace.attn[:, config.layer, r.start:r.stop].astype(np.float64).T
    variances = trajectories.var(axis=1)
    zscores, degenerate = zscore(variances)
    if degenerate:
        selected = tuple(range(trace.layout.n_query))
        fallback = False
    else:
        picked = np.nonzero(zscores >= config.tau_q)[0]
        if picked.size:
            selected = tuple(int(i) for i in picked)
            fallback = False
        else:
            # nothing cleared the threshold: keep the single strongest token
            selected = (int(np.argmax(zscores)),)
            fallback = True
    trajectories.flags.writeable = False
    variances.flags.writeable = False
    zscores.flags.writeable = False
    return KeyQuerySelection(
        trajectories=trajectories,
        variances=variances,
        zscores=zscores,
        selected=selected,
        degenerate=degenerate,
        fallback_used=fallback,
    )


def alignment_weights(trace: AttentionTrace, key: KeyQuerySelection, layer: int) -> np.ndarray:
    """Per-step attention mass on the selected query tokens, used raw."""
    if not key.selected:
        raise RejectedInputError("key query selection is empty")
    if not 0 <= layer < trace.n_layers:
        raise RejectedInputError(f"layer {layer} out of range [0, {trace.n_layers})")
    r = trace.layout.query_range
    cols = [r.start + q for q in key.selected]
    out = trace.attn[:, layer, cols].astype(np.float64).sum(axis=1)
    out.flags.writeable = False
    return out


def trace_scores(trace: AttentionTrace, key: KeyQuerySelection, layer: int) -> np.ndarray:
    """Alignment-weighted visual attention, accumulated over all output steps."""
    align = alignment_weights(trace, key, layer)
    r = trace.layout.visual_range
    vis = trace.attn[:, layer, r.start:r.stop].astype(np.float64)
    out = align @ vis
    out.flags.writeable = False
    return out


def select_visual_tokens(scores: np.ndarray, config: TracerConfig) -> TraceScoreMap:
    """Threshold z-scored trace scores; fall back to the top-k raw scores.

    The fallback fires when the scores are degenerate or the threshold
    selects nothing, so ``selected`` is always non-empty.
    """
    s = np.asarray(scores, dtype=np.float64)
    zscores, degenerate = zscore(s)
    fallback = False
    if degenerate:
        picked: tuple[int, ...] = ()
    else:
        picked = tuple(int(i) for i in np.nonzero(zscores >= config.tau_v)[0])
    if not picked:
        k = min(effective_fallback_k(config, len(s)), len(s))
        picked = _top_k_ordinals(s, k)
        fallback = True
    s = s.copy()
    s.flags.writeable = False
    zscores.flags.writeable = False
    return TraceScoreMap(
        alignment=None,
        scores=s,
        zscores=zscores,
        selected=picked,
        fallback_used=fallback,
        degenerate=degenerate,
    )


def run_tracer(trace: AttentionTrace, config: TracerConfig) -> tuple[KeyQuerySelection, TraceScoreMap]:
    """Full pathway at one layer; input trace is assumed validated."""
    key = select_key_query_tokens(trace, config)
    align = alignment_weights(trace, key, config.layer)
    scores = trace_scores(trace, key, config.layer)
    vmap = select_visual_tokens(scores, config)
    return key, replace(vmap, alignment=align)
