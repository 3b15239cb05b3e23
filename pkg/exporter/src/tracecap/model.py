"""Model-facing records and the scripted stand-in used for testing.

A capture-capable model consumes a :class:`PromptAssembly` and returns a
:class:`Generation`: the tokenized question, the generated token stream, a
final answer string, the patch grid it applied to each image, and (when the
model supports it) per-step per-layer per-head attention over the prompt
prefix. Everything downstream works from this record alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Protocol, Union

import numpy as np


@dataclass(frozen=True)
class ImageSpec:
    """A source image by reference; the exporter never touches pixel data."""

    ref: str
    width: float
    height: float

    def __post_init__(self):
        if not self.ref:
            raise ValueError("image ref must be non-empty")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


@dataclass(frozen=True)
class Crop:
    """A rectangular view of a source image, passed to the model as its own image.

    ``rect`` is (x0, y0, x1, y1) in pixels of the source image.
    """

    image: ImageSpec
    rect: tuple[int, int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "rect", tuple(int(v) for v in self.rect))
        x0, y0, x1, y1 = self.rect
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate crop rect {self.rect}")


ImageLike = Union[ImageSpec, Crop]


@dataclass(frozen=True)
class PromptAssembly:
    """What the model is shown, in order: system tokens, images, question."""

    system: tuple[str, ...]
    images: tuple[ImageLike, ...]
    question: str

    def __post_init__(self):
        object.__setattr__(self, "system", tuple(self.system))
        object.__setattr__(self, "images", tuple(self.images))
        if not self.images:
            raise ValueError("prompt needs at least one image")


@dataclass(frozen=True)
class Generation:
    """One completed model run.

    ``attn_heads`` has shape (steps, layers, heads, prefix length) with each
    row a sub-probability vector over [system | visual | query]; None when
    the model cannot expose attention.
    """

    query_texts: tuple[str, ...]
    output_texts: tuple[str, ...]
    answer: str
    grid_rows: int
    grid_cols: int
    attn_heads: Optional[np.ndarray] = field(repr=False, default=None)


class CaptureModel(Protocol):
    name: str

    def generate(self, prompt: PromptAssembly) -> Generation: ...


def _image_record(img: ImageLike) -> dict:
    if isinstance(img, Crop):
        return {"ref": img.image.ref, "rect": list(img.rect)}
    return {"ref": img.ref, "size": [img.width, img.height]}


_VOCAB = ("the", "scene", "shows", "a", "small", "object", "near", "its", "edge")


@dataclass(frozen=True)
class DummyModel:
    """Deterministic scripted model: same prompt in, same generation out.

    Attention rows are seeded head-wise softmax noise with full prefix mass
    at step 0 and partial mass afterwards, so exports always validate. The
    answer is a digest of the prompt, which makes any change to the prompt
    (extra crop images included) observable in the output.
    """

    name: str = "dummy-v1"
    grid_rows: int = 4
    grid_cols: int = 4
    n_layers: int = 3
    n_heads: int = 4
    n_steps: int = 2
    expose_attention: bool = True

    def __post_init__(self):
        for fname in ("grid_rows", "grid_cols", "n_layers", "n_heads", "n_steps"):
            if getattr(self, fname) < 1:
                raise ValueError(f"{fname} must be at least 1")

    def _digest(self, prompt: PromptAssembly) -> bytes:
        record = {
            "model": self.name,
            "system": list(prompt.system),
            "images": [_image_record(img) for img in prompt.images],
            "question": prompt.question,
        }
        return hashlib.sha256(
            json.dumps(record, sort_keys=True).encode("utf-8")
        ).digest()

    def generate(self, prompt: PromptAssembly) -> Generation:
        digest = self._digest(prompt)
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        query_texts = tuple(prompt.question.split()) or ("?",)
        output_texts = tuple(str(w) for w in rng.choice(_VOCAB, size=self.n_steps))
        answer = "ans-" + digest.hex()[:12]

        attn_heads = None
        if self.expose_attention:
            n_vis = self.grid_rows * self.grid_cols * len(prompt.images)
            n_ctx = len(prompt.system) + n_vis + len(query_texts)
            logits = rng.standard_normal(
                (self.n_steps, self.n_layers, self.n_heads, n_ctx)
            )
            attn_heads = np.exp(logits - logits.max(axis=3, keepdims=True))
            attn_heads /= attn_heads.sum(axis=3, keepdims=True)
            mass = rng.uniform(0.5, 1.0, size=attn_heads.shape[:3])
            mass[0] = 1.0  # step 0 attends only to the prefix
            attn_heads *= mass[..., None]

        return Generation(
            query_texts=query_texts,
            output_texts=output_texts,
            answer=answer,
            grid_rows=self.grid_rows,
            grid_cols=self.grid_cols,
            attn_heads=attn_heads,
        )
