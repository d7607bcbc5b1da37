"""Image segments and the mask selection / post-processing policy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import Intrinsics


@dataclass
class Segment:
    """Connected pixel region with an anchor pixel.

    Pixels are stored as sorted arrays of row-major flat indices for
    deterministic iteration. The anchor is the query point the segment
    originated from; the depth scale of the segment is parameterized as
    the log-depth at this pixel.
    """

    us: np.ndarray
    vs: np.ndarray
    anchor: tuple[int, int]
    width: int
    height: int

    def __post_init__(self):
        us = np.asarray(self.us, dtype=np.intp)
        vs = np.asarray(self.vs, dtype=np.intp)
        if us.size == 0:
            raise ValueError("empty segment")
        if us.min() < 0 or us.max() >= self.width or vs.min() < 0 or vs.max() >= self.height:
            raise ValueError("segment pixel out of image bounds")
        order = np.argsort(vs * self.width + us)
        self.us = us[order]
        self.vs = vs[order]
        au, av = int(self.anchor[0]), int(self.anchor[1])
        self.anchor = (au, av)
        if not np.any((self.us == au) & (self.vs == av)):
            raise ValueError("anchor not inside segment")

    @property
    def area(self) -> int:
        return len(self.us)

    @property
    def flat(self) -> np.ndarray:
        return self.vs * self.width + self.us

    @property
    def anchor_index(self) -> int:
        """Position of the anchor within the pixel arrays."""
        au, av = self.anchor
        return int(np.nonzero((self.us == au) & (self.vs == av))[0][0])

    def mask(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        m[self.vs, self.us] = True
        return m

    @staticmethod
    def from_mask(mask: np.ndarray, anchor: tuple[int, int]) -> "Segment":
        vs, us = np.nonzero(mask)
        return Segment(us, vs, anchor, mask.shape[1], mask.shape[0])


@dataclass
class MaskCandidate:
    """One mask proposal for a query point."""

    pixels: np.ndarray  # flat row-major indices
    stability: float
    score: float = 0.0
    width: int = 0
    height: int = 0

    def __post_init__(self):
        self.pixels = np.unique(np.asarray(self.pixels, dtype=np.intp))
        if self.pixels.size == 0:
            raise ValueError("empty mask candidate")

    @property
    def area(self) -> int:
        return len(self.pixels)


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return inter / union if union else 0.0


def select_masks(candidates_per_query, stability_min: float = 0.9,
                 nms_iou: float = 0.7, width: int = 0, height: int = 0) -> list[Segment]:
    """Turn per-query mask proposals into segments.

    Per query: drop candidates below the stability threshold, suppress
    near-duplicates across the whole retained set by mask IoU, then keep
    the smallest-area survivor as the query's segment. Queries whose
    filtered set is empty are discarded. Deterministic: ties are broken
    by candidate order of arrival.
    """
    entries = []  # (query index, cand, arrival index)
    idx = 0
    for qi, (query, cands) in enumerate(candidates_per_query):
        for c in cands:
            if c.stability >= stability_min:
                entries.append((qi, c, idx))
            idx += 1
    # NMS over the retained set, highest score first, arrival order on ties
    order = sorted(range(len(entries)), key=lambda i: (-entries[i][1].score, entries[i][2]))
    kept_flags = [False] * len(entries)
    kept = []
    for i in order:
        c = entries[i][1]
        if all(_iou(c.pixels, entries[j][1].pixels) <= nms_iou for j in kept):
            kept.append(i)
            kept_flags[i] = True
    segments = []
    for qi, (query, cands) in enumerate(candidates_per_query):
        best = None
        for eqi, c, j in (e for i, e in enumerate(entries) if kept_flags[i]):
            if eqi == qi and (best is None or c.area < best.area):
                best = c
        if best is None:
            continue
        w = best.width or width
        h = best.height or height
        us = best.pixels % w
        vs = best.pixels // w
        qu, qv = int(query[0]), int(query[1])
        if not np.any((us == qu) & (vs == qv)):
            # query fell outside the surviving mask; keep the mask anchored
            # at its pixel closest to the query
            k = int(np.argmin((us - qu) ** 2 + (vs - qv) ** 2))
            qu, qv = int(us[k]), int(vs[k])
        segments.append(Segment(us, vs, (qu, qv), w, h))
    return segments


def sample_queries(intr: Intrinsics, covered: np.ndarray | None, rng_seed: int,
                   n_initial: int = 300, n_active: int = 100) -> np.ndarray:
    """Random query pixels: uniform over the image, or over uncovered pixels.

    With covered=None this is the initial phase (n_initial points); given a
    boolean coverage mask it is the active phase drawing n_active points from
    the uncovered region (fewer if the region is smaller). Deterministic per
    seed; draws are without replacement.
    """
    rng = np.random.default_rng(rng_seed)
    if covered is None:
        n = min(n_initial, intr.width * intr.height)
        flat = rng.choice(intr.width * intr.height, size=n, replace=False)
    else:
        uncovered = np.nonzero(~covered.ravel())[0]
        n = min(n_active, uncovered.size)
        if n == 0:
            return np.zeros((0, 2), dtype=np.intp)
        flat = uncovered[rng.choice(uncovered.size, size=n, replace=False)]
    return np.stack([flat % intr.width, flat // intr.width], axis=1).astype(np.intp)


def split_connected(seg: Segment, min_area: int = 16) -> list[Segment]:
    """Split a segment into 4-connected components, dropping tiny ones.

    The anchor stays with its component; other components are re-anchored
    at the pixel nearest their centroid.
    """
    labels, n = ndimage.label(seg.mask(), structure=np.array([[0, 1, 0],
                                                             [1, 1, 1],
                                                             [0, 1, 0]]))
    out = []
    au, av = seg.anchor
    anchor_label = labels[av, au]
    for lab in range(1, n + 1):
        vs, us = np.nonzero(labels == lab)
        if len(us) < min_area:
            continue
        if lab == anchor_label:
            anchor = (au, av)
        else:
            cu, cv = us.mean(), vs.mean()
            k = int(np.argmin((us - cu) ** 2 + (vs - cv) ** 2))
            anchor = (int(us[k]), int(vs[k]))
        out.append(Segment(us, vs, anchor, seg.width, seg.height))
    return out
