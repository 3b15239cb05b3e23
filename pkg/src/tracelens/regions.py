"""Spatial consolidation of selected visual tokens into rectangular crops.

Selected tokens are placed at their patch centers in patch-unit coordinates
and clustered with DBSCAN; each cluster becomes one axis-aligned pixel
rectangle that covers every member's full patch, padded and size-floored so
the crop survives re-patchification. Isolated tokens fall out as noise.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import VisualGrid, token_center
from .errors import RejectedInputError
from .tracer import TraceScoreMap, TracerConfig

NOISE = -1


@dataclass(frozen=True)
class RegionConfig:
    eps: float = 1.5  # DBSCAN radius, patch units; 1.5 links 8-neighbour patches
    min_pts: int = 3
    pad: float = 0.10  # fraction of rect width/height added per side
    min_side: int = 28  # pixels

    def __post_init__(self):
        if self.eps <= 0:
            raise RejectedInputError("eps must be positive")
        if self.min_pts < 1:
            raise RejectedInputError("min_pts must be at least 1")
        if self.pad < 0:
            raise RejectedInputError("pad must be non-negative")
        if self.min_side < 1:
            raise RejectedInputError("min_side must be at least 1")


@dataclass(frozen=True)
class EvidenceRegion:
    rect: tuple[int, int, int, int]  # (x0, y0, x1, y1) pixels, x0 < x1, y0 < y1
    members: frozenset[int]
    cluster_id: int

    def __post_init__(self):
        object.__setattr__(self, "members", frozenset(self.members))
        x0, y0, x1, y1 = self.rect
        if not (x0 < x1 and y0 < y1):
            raise RejectedInputError(f"degenerate rect {self.rect}")


@dataclass(frozen=True)
class Provenance:
    tracer: Optional[TracerConfig]
    region: RegionConfig


@dataclass(frozen=True)
class CropManifest:
    image_ref: str
    regions: tuple[EvidenceRegion, ...]  # ordered by (y0, x0, cluster_id)
    noise: frozenset[int]
    provenance: Provenance
    noise_only: bool = False
    fallback_region: bool = False  # set when the caller substituted a fallback crop

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "noise", frozenset(self.noise))


def dbscan(points: Sequence[tuple[float, float]], eps: float, min_pts: int) -> list[int]:
    """Euclidean DBSCAN labels; NOISE is -1.

    A core point has at least ``min_pts`` neighbours within ``eps``
    (inclusive, counting itself). The expansion order is fixed so results
    are reproducible: seeds are tried in ascending point index, each cluster
    grows breadth-first through ascending-sorted neighbour lists, and a
    border point keeps the label of the first cluster that reaches it.
    """
    if eps <= 0:
        raise RejectedInputError("eps must be positive")
    if min_pts < 1:
        raise RejectedInputError("min_pts must be at least 1")
    n = len(points)
    if n == 0:
        return []
    pts = np.asarray(points, dtype=np.float64).reshape(n, 2)
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    eps2 = eps * eps
    neighbors = [np.nonzero(d2[i] <= eps2)[0] for i in range(n)]
    core = [len(nb) >= min_pts for nb in neighbors]

    labels = [NOISE] * n
    claimed = [False] * n
    next_id = 0
    for seed in range(n):
        if claimed[seed] or not core[seed]:
            continue
        labels[seed] = next_id
        claimed[seed] = True
        queue = deque(int(j) for j in neighbors[seed])
        while queue:
            j = queue.popleft()
            if claimed[j]:
                continue
            labels[j] = next_id
            claimed[j] = True
            if core[j]:
                queue.extend(int(m) for m in neighbors[j])
        next_id += 1
    return labels


def _grow_axis(lo: int, hi: int, min_side: int, bound: int) -> tuple[int, int]:
    # symmetric growth to min_side, then clamp to [0, bound]
    short = min_side - (hi - lo)
    if short > 0:
        lo -= short // 2
        hi += short - short // 2
    return max(0, lo), min(bound, hi)


def _cluster_rect(
    members: Sequence[int], grid: VisualGrid, config: RegionConfig
) -> tuple[int, int, int, int]:
    centers = np.asarray([token_center(grid, v) for v in members], dtype=np.float64)
    x0 = centers[:, 0].min() - grid.patch_w / 2
    x1 = centers[:, 0].max() + grid.patch_w / 2
    y0 = centers[:, 1].min() - grid.patch_h / 2
    y1 = centers[:, 1].max() + grid.patch_h / 2
    px, py = config.pad * (x1 - x0), config.pad * (y1 - y0)
    ix0, iy0 = math.floor(x0 - px), math.floor(y0 - py)
    ix1, iy1 = math.ceil(x1 + px), math.ceil(y1 + py)
    bw, bh = math.floor(grid.image_w), math.floor(grid.image_h)
    ix0, iy0 = max(0, ix0), max(0, iy0)
    ix1, iy1 = min(bw, ix1), min(bh, iy1)
    ix0, ix1 = _grow_axis(ix0, ix1, config.min_side, bw)
    iy0, iy1 = _grow_axis(iy0, iy1, config.min_side, bh)
    return (ix0, iy0, ix1, iy1)


def build_regions(
    selection: TraceScoreMap,
    grid: VisualGrid,
    config: RegionConfig,
    tracer_config: Optional[TracerConfig] = None,
    image_ref: str = "",
) -> CropManifest:
    """Cluster the selected tokens and wrap each cluster in a crop rectangle.

    ``min_pts`` drops to 1 when fewer tokens are selected than the threshold,
    so small selections do not degenerate to all-noise. If every point still
    ends up noise the manifest carries zero regions and ``noise_only``.
    """
    sel = tuple(selection.selected)
    if not sel:
        raise RejectedInputError("selection is empty")
    stray = [v for v in sel if not 0 <= v < grid.n_cells]
    if stray:
        raise RejectedInputError(f"selected ordinals {stray} outside grid")

    points = []
    for v in sel:
        r, c = divmod(v, grid.cols)
        points.append((c + 0.5, r + 0.5))
    min_pts = 1 if len(sel) < config.min_pts else config.min_pts
    labels = dbscan(points, config.eps, min_pts)

    by_cluster: dict[int, list[int]] = {}
    noise = []
    for v, lab in zip(sel, labels):
        if lab == NOISE:
            noise.append(v)
        else:
            by_cluster.setdefault(lab, []).append(v)

    regions = [
        EvidenceRegion(
            rect=_cluster_rect(members, grid, config),
            members=frozenset(members),
            cluster_id=cid,
        )
        for cid, members in sorted(by_cluster.items())
    ]
    regions.sort(key=lambda reg: (reg.rect[1], reg.rect[0], reg.cluster_id))
    return CropManifest(
        image_ref=image_ref,
        regions=tuple(regions),
        noise=frozenset(noise),
        provenance=Provenance(tracer=tracer_config, region=config),
        noise_only=not regions,
    )
