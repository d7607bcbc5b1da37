"""Camera model, rigid/similarity transforms, image buffers and pyramids.

Conventions used throughout the package:
  - pixel (u, v) samples the image at continuous coordinate (u, v); the
    valid bilinear domain is [0, w-1] x [0, h-1]
  - camera looks down +z; depth is the z coordinate in the camera frame
  - poses are camera-to-world; tangent increments are 6-vectors
    (translation, rotation) applied on the left of the current pose
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class BehindCameraError(ValueError):
    """Raised when projecting a point with non-positive depth."""


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole calibration plus image size (pixels)."""

    fu: float
    fv: float
    cu: float
    cv: float
    width: int
    height: int

    def __post_init__(self):
        if self.fu <= 0 or self.fv <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cu < self.width and 0 <= self.cv < self.height):
            raise ValueError("principal point outside image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fu, 0.0, self.cu],
                         [0.0, self.fv, self.cv],
                         [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics of the image resized by `factor` (pixel-center convention)."""
        return Intrinsics(
            fu=self.fu * factor,
            fv=self.fv * factor,
            cu=(self.cu + 0.5) * factor - 0.5,
            cv=(self.cv + 0.5) * factor - 0.5,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )

    def save(self, path):
        with open(path, "w") as f:
            f.write(f"{self.fu!r} {self.fv!r} {self.cu!r} {self.cv!r} "
                    f"{self.width} {self.height}\n")

    @staticmethod
    def load(path) -> "Intrinsics":
        with open(path) as f:
            tok = f.read().split()
        if len(tok) != 6:
            raise ValueError(f"intrinsics file {path}: expected 6 values, got {len(tok)}")
        return Intrinsics(float(tok[0]), float(tok[1]), float(tok[2]), float(tok[3]),
                          int(tok[4]), int(tok[5]))


def project(points: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Project camera-frame 3D points to pixel coordinates.

    Raises BehindCameraError if any z <= 0. Accepts (3,) or (N, 3).
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    z = pts[:, 2]
    if np.any(z <= 0):
        raise BehindCameraError("point behind camera (z <= 0)")
    uv = np.empty((pts.shape[0], 2))
    uv[:, 0] = intr.fu * pts[:, 0] / z + intr.cu
    uv[:, 1] = intr.fv * pts[:, 1] / z + intr.cv
    return uv[0] if single else uv


def unproject(pixels: np.ndarray, depth, intr: Intrinsics) -> np.ndarray:
    """Back-project pixels at given depth(s) into the camera frame."""
    uv = np.asarray(pixels, dtype=np.float64)
    single = uv.ndim == 1
    uv = np.atleast_2d(uv)
    z = np.broadcast_to(np.asarray(depth, dtype=np.float64), uv.shape[:1]).copy()
    if np.any(z <= 0):
        raise ValueError("depth must be positive")
    pts = np.empty((uv.shape[0], 3))
    pts[:, 0] = (uv[:, 0] - intr.cu) / intr.fu * z
    pts[:, 1] = (uv[:, 1] - intr.cv) / intr.fv * z
    pts[:, 2] = z
    return pts[0] if single else pts


def _hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rotation matrix from an axis-angle 3-vector (Rodrigues)."""
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    W = _hat(w)
    if th < 1e-10:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + (math.sin(th) / th) * W + ((1 - math.cos(th)) / th**2) * (W @ W)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector of a rotation matrix."""
    cos_th = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    th = math.acos(cos_th)
    if th < 1e-10:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if th > math.pi - 1e-6:
        # near pi: extract axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = A[:, k] / axis[k] if axis[k] > 1e-12 else axis
        axis = axis / np.linalg.norm(axis)
        # fix sign using the skew part
        v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(axis, v) < 0:
            axis = -axis
        return th * axis
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return th / (2.0 * math.sin(th)) * v


def se3_exp(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) of the exponential of a (translation, rotation) 6-vector."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, w = xi[:3], xi[3:]
    th = np.linalg.norm(w)
    W = _hat(w)
    R = so3_exp(w)
    if th < 1e-8:
        V = np.eye(3) + 0.5 * W + (W @ W) / 6.0
    else:
        V = (np.eye(3)
             + ((1 - math.cos(th)) / th**2) * W
             + ((th - math.sin(th)) / th**3) * (W @ W))
    return R, V @ rho


def se3_log(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """(translation, rotation) 6-vector whose exponential is (R, t)."""
    w = so3_log(R)
    th = np.linalg.norm(w)
    W = _hat(w)
    if th < 1e-8:
        Vinv = np.eye(3) - 0.5 * W + (W @ W) / 12.0
    else:
        A = math.sin(th) / th
        B = (1 - math.cos(th)) / th**2
        Vinv = np.eye(3) - 0.5 * W + (1.0 / th**2) * (1 - A / (2 * B)) * (W @ W)
    return np.concatenate([Vinv @ np.asarray(t, dtype=np.float64), w])


def closest_rotation(M: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix onto SO(3)."""
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


class Pose:
    """Rigid transform: x_out = R @ x_in + t.

    Used as camera-to-world unless noted. Immutable by convention;
    all operations return new instances.
    """

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None, check: bool = True):
        self.R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64).copy()
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=np.float64).copy()
        if check:
            err = np.abs(self.R @ self.R.T - np.eye(3)).max()
            if err > 1e-7 or np.linalg.det(self.R) < 0:
                raise ValueError(f"not a rotation matrix (orthogonality error {err:g})")

    @staticmethod
    def identity() -> "Pose":
        return Pose()

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t, check=False)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t, check=False)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.R.T + self.t

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def copy(self) -> "Pose":
        return Pose(self.R, self.t, check=False)

    def __repr__(self):
        return f"Pose(t={self.t}, rotvec={so3_log(self.R)})"


def retract(pose: Pose, inc: np.ndarray) -> Pose:
    """Left-apply the exponential of a 6-vector increment to a pose.

    The rotation is re-orthonormalized afterwards so that drift stays
    bounded over long chains of updates.
    """
    dR, dt = se3_exp(inc)
    R = closest_rotation(dR @ pose.R)
    return Pose(R, dR @ pose.t + dt, check=False)


def relative_increment(a: Pose, b: Pose) -> np.ndarray:
    """Increment xi with retract(b, xi) == a (left convention)."""
    rel = a.compose(b.inverse())
    return se3_log(rel.R, rel.t)


def bilinear_sample(img: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample an (h, w) or (h, w, c) image at continuous pixel coords.

    Returns (values, valid): values are zero-filled where invalid; uv outside
    [0, w-1] x [0, h-1] is invalid. uv may be (2,) or (N, 2).
    """
    single = np.asarray(uv).ndim == 1
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    h, w = img.shape[:2]
    u, v = uv[:, 0], uv[:, 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1) & np.isfinite(u) & np.isfinite(v)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    u0 = np.clip(np.floor(uc).astype(np.intp), 0, w - 2) if w > 1 else np.zeros(len(uc), np.intp)
    v0 = np.clip(np.floor(vc).astype(np.intp), 0, h - 2) if h > 1 else np.zeros(len(vc), np.intp)
    a = uc - u0
    b = vc - v0
    flat = img.reshape(h, w, -1)
    i00 = flat[v0, u0]
    i10 = flat[v0, np.minimum(u0 + 1, w - 1)]
    i01 = flat[np.minimum(v0 + 1, h - 1), u0]
    i11 = flat[np.minimum(v0 + 1, h - 1), np.minimum(u0 + 1, w - 1)]
    a = a[:, None]
    b = b[:, None]
    out = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11
    out[~valid] = 0.0
    if img.ndim == 2:
        out = out[:, 0]
    return (out[0], bool(valid[0])) if single else (out, valid)


def bilinear_sample_grad(img: np.ndarray, uv: np.ndarray):
    """Values and exact (du, dv) derivatives of the bilinear interpolant.

    Returns (values, du, dv, valid); derivative arrays match the value shape.
    """
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    h, w = img.shape[:2]
    u, v = uv[:, 0], uv[:, 1]
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1) & np.isfinite(u) & np.isfinite(v)
    uc = np.clip(u, 0, w - 1)
    vc = np.clip(v, 0, h - 1)
    u0 = np.clip(np.floor(uc).astype(np.intp), 0, w - 2)
    v0 = np.clip(np.floor(vc).astype(np.intp), 0, h - 2)
    a = (uc - u0)[:, None]
    b = (vc - v0)[:, None]
    flat = img.reshape(h, w, -1)
    i00 = flat[v0, u0]
    i10 = flat[v0, u0 + 1]
    i01 = flat[v0 + 1, u0]
    i11 = flat[v0 + 1, u0 + 1]
    val = (1 - a) * (1 - b) * i00 + a * (1 - b) * i10 + (1 - a) * b * i01 + a * b * i11
    du = (1 - b) * (i10 - i00) + b * (i11 - i01)
    dv = (1 - a) * (i01 - i00) + a * (i11 - i10)
    val[~valid] = 0.0
    du[~valid] = 0.0
    dv[~valid] = 0.0
    return val, du, dv, valid


def downsample2(img: np.ndarray) -> np.ndarray:
    """Halve both dimensions by 2x2 box averaging (odd remainder cropped)."""
    h, w = img.shape[:2]
    h2, w2 = h // 2, w // 2
    crop = img[: 2 * h2, : 2 * w2]
    if img.ndim == 2:
        return crop.reshape(h2, 2, w2, 2).mean(axis=(1, 3))
    return crop.reshape(h2, 2, w2, 2, img.shape[2]).mean(axis=(1, 3))


def build_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    """Box-average pyramid; level 0 is the input."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = img.shape[:2]
    if min(h, w) < 2 ** (levels - 1):
        raise ValueError(f"image {w}x{h} too small for {levels} pyramid levels")
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        pyr.append(downsample2(pyr[-1]))
    return pyr


def intrinsics_pyramid(intr: Intrinsics, levels: int) -> list[Intrinsics]:
    out = [intr]
    for _ in range(levels - 1):
        p = out[-1]
        out.append(Intrinsics(p.fu / 2, p.fv / 2, (p.cu - 0.5) / 2, (p.cv - 0.5) / 2,
                              p.width // 2, p.height // 2))
    return out


@dataclass
class PointCloud:
    """3D points (N, 3) with optional (N, 3) colors in [0, 1]."""

    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors/points length mismatch")

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: Pose) -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.colors)

    @staticmethod
    def concatenate(clouds: list["PointCloud"]) -> "PointCloud":
        pts = np.concatenate([c.points for c in clouds]) if clouds else np.zeros((0, 3))
        cols = None
        if clouds and all(c.colors is not None for c in clouds):
            cols = np.concatenate([c.colors for c in clouds])
        return PointCloud(pts, cols)


def save_ply(cloud: PointCloud, path) -> None:
    """Binary little-endian PLY with positions and uint8 colors."""
    n = len(cloud)
    cols = cloud.colors if cloud.colors is not None else np.ones((n, 3)) * 0.5
    with open(path, "wb") as f:
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {n}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            "end_header\n"
        )
        f.write(header.encode("ascii"))
        rec = np.empty(n, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)])
        rec["xyz"] = cloud.points.astype("<f4")
        rec["rgb"] = np.clip(np.round(cols * 255), 0, 255).astype("u1")
        f.write(rec.tobytes())


def load_ply(path) -> PointCloud:
    """Read PLY files written by save_ply."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    n = 0
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    rec = np.frombuffer(data[end:], dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)], count=n)
    return PointCloud(rec["xyz"].astype(np.float64), rec["rgb"].astype(np.float64) / 255.0)
