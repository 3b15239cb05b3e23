"""Per-layer visual-clue retrieval metric and reference-layer selection.

For a labeled instance (trace, category, ground-truth visual tokens) the
metric asks: at the steps where the model utters the category, do the K
most-attended visual tokens at layer l coincide with the K ground-truth
tokens? Averaging the per-instance fraction over a set gives a per-layer
score; the best-scoring layer becomes the reference layer for tracing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AttentionTrace, visual_slice
from .errors import EmptyEvaluationError, RejectedInputError

# Sentinel for "category never mentioned": the instance contributes nothing.
ABSTAIN = None


@dataclass(frozen=True)
class PerceptionInstance:
    """One labeled trace: a category word and the visual tokens that show it."""

    trace: AttentionTrace
    category: str
    category_token_texts: tuple[str, ...]
    gt_tokens: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "category_token_texts", tuple(self.category_token_texts))
        object.__setattr__(self, "gt_tokens", frozenset(self.gt_tokens))
        if not self.category_token_texts:
            raise RejectedInputError("category tokenization must be non-empty")
        if not self.gt_tokens:
            raise RejectedInputError("gt_tokens must be non-empty")
        n_vis = self.trace.layout.n_vis
        stray = [v for v in self.gt_tokens if not 0 <= v < n_vis]
        if stray:
            raise RejectedInputError(f"gt ordinals {sorted(stray)} out of range [0, {n_vis})")


@dataclass(frozen=True)
class RecallReport:
    """Per-layer scores plus the argmax layer (ties toward the smaller index)."""

    per_layer: tuple[float, ...]
    n_instances: int
    n_skipped: int
    l_max: int


def _fold(token: str) -> str:
    return token.strip().casefold()


def mention_steps(instance: PerceptionInstance) -> list[int]:
    """Steps whose output tokens spell the category.

    Matches the category tokenization as a contiguous window over the trace's
    output texts, comparing tokens case-folded and whitespace-trimmed; every
    step inside a matched window counts. Exact equality only: no stemming, so
    "helmets" does not match "helmet".
    """
    out = [_fold(t) for t in instance.trace.layout.output_texts]
    cat = [_fold(t) for t in instance.category_token_texts]
    m = len(cat)
    hits: set[int] = set()
    for start in range(len(out) - m + 1):
        if out[start:start + m] == cat:
            hits.update(range(start, start + m))
    return sorted(hits)


def top_k_tokens(scores: np.ndarray, k: int) -> set[int]:
    """Ordinals of the k largest scores; equal values prefer the smaller ordinal."""
    if not 0 < k <= len(scores):
        raise RejectedInputError(f"k={k} out of range [1, {len(scores)}]")
    # stable sort on (-score, ordinal): ordinal order breaks ties upward
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return set(int(v) for v in order[:k])


def layer_recall(instance: PerceptionInstance, l: int) -> float | None:
    """Fraction of gt tokens among the top-K attended visual tokens at layer l.

    K = |gt_tokens|; attention is summed over the mention steps. Returns
    ABSTAIN (None) when the category is never mentioned.
    """
    steps = mention_steps(instance)
    if not steps:
        return ABSTAIN
    if not 0 <= l < instance.trace.n_layers:
        raise RejectedInputError(f"layer {l} out of range [0, {instance.trace.n_layers})")
    s = np.zeros(instance.trace.layout.n_vis, dtype=np.float64)
    for t in steps:
        s += visual_slice(instance.trace, t, l)
    k = len(instance.gt_tokens)
    return len(top_k_tokens(s, k) & instance.gt_tokens) / k


def clue_recall(instances: list[PerceptionInstance], l: int) -> tuple[float, int]:
    """Mean non-ABSTAIN layer_recall over the set; also returns the skip count.

    Accumulates in instance order so repeat runs agree bit for bit.
    """
    terms = []
    skipped = 0
    for inst in instances:
        r = layer_recall(inst, l)
        if r is ABSTAIN:
            skipped += 1
        else:
            terms.append(r)
    if not terms:
        raise EmptyEvaluationError("every instance abstained: category never mentioned")
    return float(np.mean(np.asarray(terms, dtype=np.float64))), skipped


def scan_layers(instances: list[PerceptionInstance]) -> RecallReport:
    """Evaluate every layer and pick the best one."""
    if not instances:
        raise EmptyEvaluationError("no instances to evaluate")
    n_layers = instances[0].trace.n_layers
    for inst in instances[1:]:
        if inst.trace.n_layers != n_layers:
            raise RejectedInputError("instances disagree on layer count")
    per_layer = []
    skipped = 0
    for l in range(n_layers):
        score, skipped = clue_recall(instances, l)
        per_layer.append(score)
    arr = np.asarray(per_layer, dtype=np.float64)
    l_max = int(np.argmax(arr))  # argmax takes the first maximum
    return RecallReport(
        per_layer=tuple(float(x) for x in per_layer),
        n_instances=len(instances),
        n_skipped=skipped,
        l_max=l_max,
    )
