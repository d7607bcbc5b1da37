"""Sparse-to-dense depth: per-segment scale fitting, fusion, rendering, fill.

Each solved segment's depth scale is fitted in closed form to the sparse
measurements falling inside it; segments without measurements are discarded.
The scaled segments are fused into a point cloud, rendered back to a
ray-averaged depth map, and remaining holes are filled by axis-aligned
bilinear interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from scipy import ndimage

from .alignment import ScaledPrimitive
from .bundle import FrameBundle
from .geometry import Intrinsics, PointCloud, Pose
from .integration import Primitive


class CompletionError(RuntimeError):
    """No primitive retained any sparse support."""


class Provenance(IntEnum):
    UNDEFINED = 0
    MEASURED = 1
    PRIMITIVE = 2
    INTERPOLATED = 3


@dataclass
class SparseDepth:
    """Sparse metric depth measurements (u, v, depth_m rows)."""

    samples: np.ndarray
    d_min: float = 0.2
    d_max: float = 5.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1, 3)
        d = self.samples[:, 2]
        keep = (d >= self.d_min) & (d <= self.d_max)
        self.samples = self.samples[keep]

    def __len__(self):
        return len(self.samples)


@dataclass
class DepthMap:
    """Per-pixel depth in meters; non-positive = undefined."""

    depth: np.ndarray
    provenance: np.ndarray | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.provenance is None:
            self.provenance = np.where(self.depth > 0, int(Provenance.PRIMITIVE),
                                       int(Provenance.UNDEFINED)).astype(np.uint8)

    @property
    def defined(self) -> np.ndarray:
        return self.depth > 0


def fit_scale(prim: Primitive, sparse: SparseDepth, mode: str = "lsq") -> float | None:
    """Least-squares depth scale of one segment against sparse measurements.

    Linear-domain l2 closed form s = sum(uD * meas) / sum(uD^2); returns the
    log scale, or None when no sample falls inside the segment (discard rule).
    mode "median" selects the robust median-of-ratios (log-domain) variant.
    """
    seg = prim.segment
    if len(sparse) == 0:
        return None
    su = sparse.samples[:, 0].astype(np.intp)
    sv = sparse.samples[:, 1].astype(np.intp)
    mask = seg.mask()
    inside = (su >= 0) & (su < seg.width) & (sv >= 0) & (sv < seg.height)
    inside[inside] = mask[sv[inside], su[inside]]
    if not np.any(inside):
        return None
    index_map = np.full(seg.width * seg.height, -1, dtype=np.intp)
    index_map[seg.flat] = np.arange(seg.area)
    idx = index_map[sv[inside] * seg.width + su[inside]]
    ud = np.exp(prim.log_udepth[idx])
    meas = sparse.samples[inside, 2]
    if mode == "median":
        return float(np.median(np.log(meas) - prim.log_udepth[idx]))
    s = float((ud * meas).sum() / (ud * ud).sum())
    if s <= 0:
        return None
    return float(np.log(s))


def fuse(scaled: list[ScaledPrimitive], intr: Intrinsics,
         image: np.ndarray | None = None) -> PointCloud:
    """Unproject every pixel of every scaled segment; overlaps contribute
    multiple points on the same ray (union semantics)."""
    pts, cols = [], []
    for sp in scaled:
        seg = sp.prim.segment
        d = sp.depth()
        pts.append(np.stack([(seg.us - intr.cu) / intr.fu * d,
                             (seg.vs - intr.cv) / intr.fv * d,
                             d], axis=1))
        if image is not None:
            cols.append(image[seg.vs, seg.us])
    if not pts:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.concatenate(pts),
                      np.concatenate(cols) if image is not None else None)


def render_depth(cloud: PointCloud, intr: Intrinsics,
                 pose: Pose | None = None) -> DepthMap:
    """Ray-averaged depth: each point lands on its nearest pixel; per-pixel
    depth is the mean of all point depths on that ray. `pose` is the camera
    pose (camera-to-world); points behind the camera contribute nothing."""
    pts = cloud.points if pose is None else pose.inverse().apply(cloud.points)
    h, w = intr.height, intr.width
    z = pts[:, 2]
    front = z > 1e-12
    pts = pts[front]
    z = z[front]
    u = np.round(intr.fu * pts[:, 0] / z + intr.cu).astype(np.intp)
    v = np.round(intr.fv * pts[:, 1] / z + intr.cv).astype(np.intp)
    ok = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    flat = v[ok] * w + u[ok]
    sums = np.bincount(flat, weights=z[ok], minlength=h * w)
    cnts = np.bincount(flat, minlength=h * w)
    depth = np.where(cnts > 0, sums / np.maximum(cnts, 1), 0.0).reshape(h, w)
    return DepthMap(depth)


def fill_holes(dm: DepthMap) -> DepthMap:
    """Fill undefined pixels by axis-aligned bilinear interpolation.

    Horizontal and vertical passes each interpolate linearly between the
    nearest defined pixels (from the original defined set) and are averaged;
    pixels reached by neither pass fall back to the nearest defined pixel.
    """
    depth = dm.depth
    defined = dm.defined
    if not np.any(defined):
        raise CompletionError("cannot fill a fully undefined depth map")
    h, w = depth.shape

    def axis_fill(d, good):
        # linear interpolation along the last axis, nearest at the borders
        n, m = d.shape
        out = np.full_like(d, np.nan)
        idx = np.arange(m)
        for i in range(n):
            g = np.nonzero(good[i])[0]
            if g.size == 0:
                continue
            out[i] = np.interp(idx, g, d[i, g])
        return out

    hor = axis_fill(depth, defined)
    ver = axis_fill(depth.T, defined.T).T
    both = np.nanmean(np.stack([hor, ver]), axis=0)
    filled = np.where(defined, depth, both)
    missing = ~np.isfinite(filled)
    if np.any(missing):
        _, (iv, iu) = ndimage.distance_transform_edt(~defined, return_indices=True)
        filled[missing] = depth[iv[missing], iu[missing]]
    prov = dm.provenance.copy()
    prov[~defined] = int(Provenance.INTERPOLATED)
    return DepthMap(filled, prov)


def complete(bundle: FrameBundle, sparse: SparseDepth,
             prims: list[Primitive] | None = None,
             fit_mode: str = "lsq") -> DepthMap:
    """Dense depth from a primified bundle plus sparse measurements."""
    from .integration import integrate_bundle

    if prims is None:
        prims = integrate_bundle(bundle)
    scaled = []
    for p in prims:
        ls = fit_scale(p, sparse, mode=fit_mode)
        if ls is not None:
            scaled.append(ScaledPrimitive(p, ls))
    if not scaled:
        raise CompletionError("every segment was discarded (no sparse support)")
    cloud = fuse(scaled, bundle.intr)
    dm = render_depth(cloud, bundle.intr)
    dm.provenance[dm.defined] = int(Provenance.PRIMITIVE)
    return fill_holes(dm)
