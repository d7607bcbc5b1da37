"""Depth and trajectory error metrics plus alignment procedures."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose
from .trajectory import Trajectory

# nearest-timestamp association window (seconds), TUM convention
ASSOC_TOL = 0.02


class MetricError(ValueError):
    """No valid data to compute a metric from."""


@dataclass
class DepthErrorReport:
    """MAE/RMSE in mm, iMAE/iRMSE in 1/km, over jointly valid pixels."""

    mae: float
    rmse: float
    imae: float
    irmse: float
    valid_pixels: int

    def __str__(self):
        return (f"MAE {self.mae:.3f} mm  RMSE {self.rmse:.3f} mm  "
                f"iMAE {self.imae:.3f} 1/km  iRMSE {self.irmse:.3f} 1/km  "
                f"({self.valid_pixels} px)")


def depth_metrics(pred: np.ndarray, gt: np.ndarray,
                  d_min: float = 0.2, d_max: float = 5.0) -> DepthErrorReport:
    """Standard depth-completion error metrics.

    Computed over pixels where both maps are defined (> 0) and gt lies in
    [d_min, d_max]; depths in meters, MAE/RMSE reported in mm, the inverse
    metrics in 1/km.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    valid = (pred > 0) & (gt >= d_min) & (gt <= d_max)
    n = int(valid.sum())
    if n == 0:
        raise MetricError("no jointly valid pixels")
    dp = pred[valid]
    dg = gt[valid]
    err = dp - dg
    ierr = 1.0 / dp - 1.0 / dg
    return DepthErrorReport(
        mae=float(np.abs(err).mean() * 1000.0),
        rmse=float(np.sqrt((err**2).mean()) * 1000.0),
        imae=float(np.abs(ierr).mean() * 1000.0),
        irmse=float(np.sqrt((ierr**2).mean()) * 1000.0),
        valid_pixels=n,
    )


def _lower_median(x: np.ndarray) -> float:
    """Order-statistics median: lower middle element for even counts."""
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    if x.size == 0:
        raise MetricError("median of empty array")
    return float(x[(x.size - 1) // 2])


def median_scale(pred: np.ndarray, gt: np.ndarray) -> float:
    """median(gt) / median(pred) over jointly defined pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = (pred > 0) & (gt > 0)
    if not np.any(valid):
        raise MetricError("no jointly valid pixels")
    mp = _lower_median(pred[valid])
    if mp == 0:
        raise MetricError("median of predicted depth is zero")
    return _lower_median(gt[valid]) / mp


@dataclass
class Sim3:
    """Similarity transform x -> scale * R @ x + t."""

    scale: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.R.T) + self.t


def associate(est: Trajectory, gt: Trajectory,
              tol: float = ASSOC_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Indices (est_idx, gt_idx) of nearest-timestamp matches within tol."""
    gi = np.searchsorted(gt.timestamps, est.timestamps)
    pairs = []
    for i, g in enumerate(gi):
        cands = [c for c in (g - 1, g) if 0 <= c < len(gt)]
        if not cands:
            continue
        best = min(cands, key=lambda c: abs(gt.timestamps[c] - est.timestamps[i]))
        if abs(gt.timestamps[best] - est.timestamps[i]) <= tol:
            pairs.append((i, best))
    if not pairs:
        return np.zeros(0, np.intp), np.zeros(0, np.intp)
    a = np.array(pairs, dtype=np.intp)
    return a[:, 0], a[:, 1]


def umeyama(src: np.ndarray, dst: np.ndarray) -> Sim3:
    """Closed-form similarity minimizing sum ||dst - (s R src + t)||^2."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3:
        raise MetricError("need at least 3 point pairs")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    var_s = (xs**2).sum() / len(src)
    if var_s < 1e-18:
        raise MetricError("degenerate (collapsed) source positions")
    U, D, Vt = np.linalg.svd(cov)
    if np.linalg.matrix_rank(cov, tol=1e-12 * max(D[0], 1.0)) < 2:
        raise MetricError("degenerate (collinear) configuration")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = float(np.trace(np.diag(D) @ S) / var_s)
    if scale <= 0:
        raise MetricError("non-positive similarity scale")
    t = mu_d - scale * R @ mu_s
    return Sim3(scale, R, t)


def align_sim3(est: Trajectory, gt: Trajectory,
               tol: float = ASSOC_TOL) -> tuple[Sim3, np.ndarray]:
    """Sim(3) alignment of estimated positions onto ground truth.

    Returns the transform and per-pair position residuals (meters).
    """
    ei, gi = associate(est, gt, tol)
    if len(ei) < 3:
        raise MetricError(f"only {len(ei)} associated poses (need >= 3)")
    p_est = est.positions[ei]
    p_gt = gt.positions[gi]
    try:
        sim = umeyama(p_est, p_gt)
    except MetricError:
        # rotation/scale unobservable (e.g. a static camera): fall back to
        # translation-only alignment so the residuals still measure drift
        sim = Sim3(1.0, np.eye(3), p_gt.mean(axis=0) - p_est.mean(axis=0))
    residuals = np.linalg.norm(p_gt - sim.apply(p_est), axis=1)
    return sim, residuals


def ate_rmse(est: Trajectory, gt: Trajectory, tol: float = ASSOC_TOL) -> float:
    """RMSE of position residuals after Sim(3) alignment (meters)."""
    _, residuals = align_sim3(est, gt, tol)
    return float(np.sqrt((residuals**2).mean()))
