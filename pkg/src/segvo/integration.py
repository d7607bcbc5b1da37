"""Per-segment log-depth from surface normals.

Within a segment the log-depth field zt = log z obeys, in pixel coordinates,

    nz_u * d_u(zt) + n_x = 0      nz_v * d_v(zt) + n_y = 0

with the perspective-corrected coefficients

    nz_u = n_x (u - c_u) + n_y (f_u / f_v) (v - c_v) + n_z f_u
    nz_v = n_x (f_v / f_u) (u - c_u) + n_y (v - c_v) + n_z f_v

(both reduce to n_x (u - c_u) + n_y (v - c_v) + n_z f for f_u = f_v = f).
The least-squares discretization over all segments forms one sparse
block-diagonal system solved with conjugate gradients; the constant-shift
nullspace per segment (the depth-scale gauge) is fixed afterwards by
shifting so that the anchor pixel has log-depth zero.

Discretization: one equation per 4-neighbor pixel pair inside the segment
(forward differences), with coefficients evaluated at the pair midpoint
(averaged normals, half-pixel coordinates) for second-order accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import Intrinsics
from .segments import Segment

# |nz| below eps * f gives unbounded gradients at grazing angles; clamp
NZ_CLAMP_FRAC = 1e-2
CG_TOL = 1e-8


@dataclass
class Primitive:
    """A segment with its unscaled log-depth, gauge-fixed to 0 at the anchor."""

    segment: Segment
    log_udepth: np.ndarray  # one value per segment pixel, segment pixel order
    converged: bool = True
    constant_normal_fallback: bool = False

    def __post_init__(self):
        self.log_udepth = np.asarray(self.log_udepth, dtype=np.float64)
        if len(self.log_udepth) != self.segment.area:
            raise ValueError("log_udepth length does not match segment area")
        if not np.all(np.isfinite(self.log_udepth)):
            raise ValueError("non-finite log_udepth")
        a = self.log_udepth[self.segment.anchor_index]
        if a != 0.0:
            self.log_udepth = self.log_udepth - a

    @property
    def udepth(self) -> np.ndarray:
        return np.exp(self.log_udepth)


@dataclass
class NormalSystem:
    """Sparse least-squares rows A zt = b for one segment."""

    A: sp.csr_matrix          # (n_equations, n_pixels)
    b: np.ndarray
    segment: Segment

    def residual(self, zt: np.ndarray) -> np.ndarray:
        return self.A @ zt - self.b

    def functional(self, zt: np.ndarray) -> float:
        r = self.residual(zt)
        return float(r @ r)


def _segment_normals(seg: Segment, normals: np.ndarray) -> np.ndarray:
    return normals[seg.vs, seg.us].astype(np.float64)


def _pair_equations(seg: Segment, n_seg: np.ndarray, intr: Intrinsics):
    """Equation triplets (row i, col j, col k, coef, rhs) for both directions.

    Returns (i_idx, j_idx, coefs, rhs) where each equation has entries
    +coef at pixel j (the +step neighbor) and -coef at pixel i.
    """
    w = seg.width
    flat = seg.flat
    index_map = np.full(seg.width * seg.height, -1, dtype=np.intp)
    index_map[flat] = np.arange(seg.area)
    us = seg.us.astype(np.float64)
    vs = seg.vs.astype(np.float64)
    eq_i, eq_j, coefs, rhs = [], [], [], []
    clamp = NZ_CLAMP_FRAC * 0.5 * (intr.fu + intr.fv)

    for du, dv, horizontal in ((1, 0, True), (0, 1, False)):
        # neighbor must exist in the segment; +u step must not wrap rows
        if horizontal:
            in_bounds = seg.us + 1 < w
        else:
            in_bounds = seg.vs + 1 < seg.height
        nb = np.where(in_bounds, flat + du + dv * w, 0)
        ok = in_bounds & (index_map[nb] >= 0)
        ii = np.nonzero(ok)[0]
        if ii.size == 0:
            continue
        jj = index_map[nb[ii]]
        n_mid = 0.5 * (n_seg[ii] + n_seg[jj])
        u_mid = us[ii] + 0.5 * du
        v_mid = vs[ii] + 0.5 * dv
        if horizontal:
            nz = (n_mid[:, 0] * (u_mid - intr.cu)
                  + n_mid[:, 1] * (intr.fu / intr.fv) * (v_mid - intr.cv)
                  + n_mid[:, 2] * intr.fu)
            n_tan = n_mid[:, 0]
        else:
            nz = (n_mid[:, 0] * (intr.fv / intr.fu) * (u_mid - intr.cu)
                  + n_mid[:, 1] * (v_mid - intr.cv)
                  + n_mid[:, 2] * intr.fv)
            n_tan = n_mid[:, 1]
        sign = np.where(nz >= 0, 1.0, -1.0)
        nz = sign * np.maximum(np.abs(nz), clamp)
        eq_i.append(ii)
        eq_j.append(jj)
        coefs.append(nz)
        rhs.append(-n_tan)
    if not eq_i:
        return (np.zeros(0, np.intp), np.zeros(0, np.intp), np.zeros(0), np.zeros(0))
    return (np.concatenate(eq_i), np.concatenate(eq_j),
            np.concatenate(coefs), np.concatenate(rhs))


def assemble(seg: Segment, normals: np.ndarray, intr: Intrinsics) -> NormalSystem:
    """Build the least-squares system for one segment.

    `normals` is the full (h, w, 3) normal map; only segment pixels are read.
    A single-pixel segment yields an empty system (gauge only).
    """
    n_seg = _segment_normals(seg, normals)
    ii, jj, coefs, rhs = _pair_equations(seg, n_seg, intr)
    n_eq = len(coefs)
    rows = np.repeat(np.arange(n_eq), 2)
    cols = np.stack([jj, ii], axis=1).ravel()
    vals = np.stack([coefs, -coefs], axis=1).ravel()
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n_eq, seg.area))
    return NormalSystem(A=A, b=rhs, segment=seg)


def _cg_maxiter(n_unknowns: int) -> int:
    return int(10 * np.sqrt(n_unknowns)) + 200


def integrate_batch(primitives: list[tuple[Segment, np.ndarray]], intr: Intrinsics,
                    cg_tol: float = CG_TOL, cg_maxiter: int | None = None
                    ) -> list[Primitive]:
    """Solve all segments' normal equations jointly with one CG run.

    The joint system is block-diagonal, so the batched solution matches the
    per-segment solutions; each block is shifted to zero at its anchor.
    Segments whose block fails to converge are flagged (converged=False).
    """
    systems = [assemble(seg, normals, intr) for seg, normals in primitives]
    if not systems:
        return []
    sizes = [s.segment.area for s in systems]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    A = sp.block_diag([s.A for s in systems], format="csr")
    b = np.concatenate([s.b for s in systems])
    n = int(offsets[-1])
    ATA = (A.T @ A).tocsr()
    ATb = A.T @ b
    maxiter = cg_maxiter if cg_maxiter is not None else _cg_maxiter(n)
    diag = ATA.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.maximum(diag, 1e-30), 1.0)
    M = spla.LinearOperator((n, n), matvec=lambda x: inv_diag * x)
    x, info = spla.cg(ATA, ATb, rtol=cg_tol, atol=0.0, maxiter=maxiter, M=M)
    out = []
    for k, s in enumerate(systems):
        zt = x[offsets[k]: offsets[k + 1]]
        converged = True
        if info != 0:
            # per-segment convergence check against this block's own scale
            r = s.A.T @ s.residual(zt)
            scale = np.linalg.norm(s.A.T @ s.b)
            converged = np.linalg.norm(r) <= 10 * cg_tol * max(scale, 1e-12) + 1e-9
        out.append(Primitive(segment=s.segment, log_udepth=zt, converged=converged))
    return out


def integrate_bundle(bundle, mode: str = "full", cg_tol: float = CG_TOL,
                     cg_maxiter: int | None = None) -> list[Primitive]:
    """Integrate every segment of a frame bundle.

    mode: "full" (per-pixel normals), "const-normal" (segment-averaged
    normals), or "const-depth" (flat log-depth, no integration).
    """
    if mode == "const-depth":
        return [Primitive(seg, np.zeros(seg.area)) for seg in bundle.segments]
    if mode == "const-normal":
        return [flatten_constant_normal(seg, bundle.normals, bundle.intr,
                                        cg_tol=cg_tol, cg_maxiter=cg_maxiter)
                for seg in bundle.segments]
    if mode != "full":
        raise ValueError(f"unknown integration mode {mode!r}")
    pairs = [(seg, bundle.normals) for seg in bundle.segments]
    return integrate_batch(pairs, bundle.intr, cg_tol=cg_tol, cg_maxiter=cg_maxiter)


def flatten_constant_depth(p: Primitive) -> Primitive:
    """Ablation: replace the solved log-depth with a constant (zero) field."""
    return Primitive(segment=p.segment, log_udepth=np.zeros(p.segment.area))


def flatten_constant_normal(seg: Segment, normals: np.ndarray, intr: Intrinsics,
                            cg_tol: float = CG_TOL, cg_maxiter: int | None = None
                            ) -> Primitive:
    """Ablation: integrate with all normals replaced by their normalized mean.

    Falls back to constant depth when the mean normal vanishes.
    """
    n_seg = _segment_normals(seg, normals)
    mean = n_seg.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-8:
        p = Primitive(segment=seg, log_udepth=np.zeros(seg.area))
        p.constant_normal_fallback = True
        return p
    mean /= norm
    flat_normals = np.zeros((seg.height, seg.width, 3))
    flat_normals[seg.vs, seg.us] = mean
    [p] = integrate_batch([(seg, flat_normals)], intr, cg_tol=cg_tol,
                          cg_maxiter=cg_maxiter)
    return p
