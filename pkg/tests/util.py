"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

import tracelens as tl

# Hand-checkable 2-step, 1-layer, 8-token fixture: 1 system + 4 visual
# (2x2 grid over a 100x100 image) + 3 query tokens.
F1_STEP0 = (0.05, 0.10, 0.10, 0.05, 0.05, 0.05, 0.40, 0.20)
F1_STEP1 = (0.05, 0.05, 0.05, 0.50, 0.05, 0.05, 0.05, 0.20)


def build_f1(l_max=None, image_ref="f1.png") -> tl.AttentionTrace:
    attn = np.array([[F1_STEP0], [F1_STEP1]], dtype=np.float32)
    layout = tl.TokenLayout(
        1, 4, 3,
        query_texts=("is", "there", "helmet"),
        output_texts=("the", "helmet"),
    )
    grid = tl.VisualGrid(2, 2, 100.0, 100.0)
    return tl.AttentionTrace(
        layout=layout, grid=grid, attn=attn, image_ref=image_ref, l_max=l_max
    )


def f1_instance(trace=None) -> tl.PerceptionInstance:
    return tl.PerceptionInstance(
        trace=trace if trace is not None else build_f1(),
        category="helmet",
        category_token_texts=("helmet",),
        gt_tokens=frozenset({2}),
    )


def random_trace(
    rng: np.random.Generator,
    max_steps: int = 6,
    max_layers: int = 4,
    max_rows: int = 3,
    max_cols: int = 3,
    max_sys: int = 3,
    max_query: int = 5,
    partial_rows: bool = True,
) -> tl.AttentionTrace:
    """A random trace that passes validation.

    Rows are exact probability vectors; with ``partial_rows`` later steps may
    carry less than unit prefix mass, as real prefix-restricted rows do.
    """
    rows = int(rng.integers(1, max_rows + 1))
    cols = int(rng.integers(1, max_cols + 1))
    n_sys = int(rng.integers(0, max_sys + 1))
    n_query = int(rng.integers(1, max_query + 1))
    n_vis = rows * cols
    t_steps = int(rng.integers(1, max_steps + 1))
    n_layers = int(rng.integers(1, max_layers + 1))
    n_ctx = n_sys + n_vis + n_query

    raw = rng.random((t_steps, n_layers, n_ctx)) + 1e-3
    attn = raw / raw.sum(axis=2, keepdims=True)
    if partial_rows and t_steps > 1:
        scale = rng.uniform(0.3, 1.0, size=(t_steps, n_layers))
        scale[0] = 1.0  # step 0 has no generated tokens: full mass on the prefix
        attn = attn * scale[..., None]

    layout = tl.TokenLayout(
        n_sys, n_vis, n_query,
        query_texts=tuple(f"q{i}" for i in range(n_query)),
        output_texts=tuple(f"w{t}" for t in range(t_steps)),
    )
    grid = tl.VisualGrid(rows, cols, cols * 14.0, rows * 14.0)
    return tl.AttentionTrace(
        layout=layout, grid=grid, attn=attn.astype(np.float32), image_ref="rand.png"
    )


def random_instance(rng: np.random.Generator) -> tl.PerceptionInstance:
    """Random labeled instance; roughly one in five never mentions the category."""
    trace = random_trace(rng, max_steps=8)
    n_vis = trace.layout.n_vis
    k = int(rng.integers(1, n_vis + 1))
    gt = frozenset(int(v) for v in rng.choice(n_vis, size=k, replace=False))

    texts = list(trace.layout.output_texts)
    if rng.random() > 0.2:
        n_hits = int(rng.integers(1, trace.n_steps + 1))
        for t in rng.choice(trace.n_steps, size=n_hits, replace=False):
            texts[int(t)] = "cat"
    layout = tl.TokenLayout(
        trace.layout.n_sys, n_vis, trace.layout.n_query,
        query_texts=trace.layout.query_texts,
        output_texts=tuple(texts),
    )
    trace = tl.AttentionTrace(
        layout=layout, grid=trace.grid, attn=trace.attn, image_ref=trace.image_ref
    )
    return tl.PerceptionInstance(
        trace=trace, category="cat", category_token_texts=("cat",), gt_tokens=gt
    )
