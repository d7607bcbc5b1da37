"""Front-end frame bundles and their on-disk directory layout.

A bundle directory contains (little-endian throughout):
  intrinsics.txt    `f_u f_v c_u c_v width height`
  image.ppm         binary P6, 8-bit
  normals.f32       float32, h*w*3, row-major, channel-interleaved
  segments.bin      u32 count; per segment: u32 anchor_u, anchor_v,
                    pixel count, then that many u32 row-major pixel indices
  depth.f32         optional; h*w float32 meters, non-positive = invalid
  sparse_depth.txt  optional; lines `u v depth_m`
  pose.txt          optional; one TUM line
  masks.bin         optional mask candidates; u32 count; per mask: u32
                    query_u, query_v, pixel count, u32 indices, then
                    float32 stability and score
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose
from .segments import MaskCandidate, Segment
from .trajectory import pose_from_tum_line, pose_to_tum_line


class BundleFormatError(ValueError):
    """A bundle file is missing, truncated, or inconsistent."""


NORMAL_UNIT_TOL = 1e-3
# visible surfaces face the camera: n . ray <= 0 per pixel (camera looks
# down +z, so this reduces to n_z <= 0 on the optical axis)
FACING_TOL = 1e-6


@dataclass
class FrameBundle:
    """One ingested frame: image, normal map, segments, calibration.

    Optional ground truth (depth in meters, camera-to-world pose) and sparse
    depth measurements ride along for evaluation and completion.
    """

    image: np.ndarray           # (h, w, 3) in [0, 1]
    normals: np.ndarray         # (h, w, 3) unit vectors, n_z <= 0
    segments: list[Segment]
    intr: Intrinsics
    gt_depth: np.ndarray | None = None
    gt_pose: Pose | None = None
    sparse_depth: np.ndarray | None = None  # (n, 3) rows u, v, depth_m
    timestamp: float = 0.0

    def __post_init__(self):
        h, w = self.intr.height, self.intr.width
        if self.image.shape != (h, w, 3):
            raise BundleFormatError(f"image: expected {(h, w, 3)}, got {self.image.shape}")
        if self.normals.shape != (h, w, 3):
            raise BundleFormatError(f"normals: expected {(h, w, 3)}, got {self.normals.shape}")
        norms = np.linalg.norm(self.normals, axis=2)
        if np.abs(norms - 1.0).max() > NORMAL_UNIT_TOL:
            raise BundleFormatError("normals: non-unit vectors")
        u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                           np.arange(h, dtype=np.float64))
        facing = (self.normals[:, :, 0] * (u - self.intr.cu) / self.intr.fu
                  + self.normals[:, :, 1] * (v - self.intr.cv) / self.intr.fv
                  + self.normals[:, :, 2])
        if facing.max() > FACING_TOL:
            raise BundleFormatError("normals: away-facing vector violates the "
                                    "camera-facing convention")
        for i, seg in enumerate(self.segments):
            if seg.width != w or seg.height != h:
                raise BundleFormatError(f"segments[{i}]: dimension mismatch")
        if self.gt_depth is not None and self.gt_depth.shape != (h, w):
            raise BundleFormatError(f"depth: expected {(h, w)}, got {self.gt_depth.shape}")


def _write_ppm(path, image: np.ndarray) -> None:
    h, w = image.shape[:2]
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise BundleFormatError(f"image: {path} is not a binary PPM")
    # header: magic, width, height, maxval, single whitespace, then pixels
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise BundleFormatError("image: only 8-bit PPM supported")
    pix = np.frombuffer(data[pos:], dtype=np.uint8)
    if pix.size < h * w * 3:
        raise BundleFormatError("image: truncated PPM payload")
    return pix[: h * w * 3].reshape(h, w, 3).astype(np.float64) / 255.0


def _write_segments(path, segments: list[Segment]) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(segments)))
        for seg in segments:
            f.write(struct.pack("<III", seg.anchor[0], seg.anchor[1], seg.area))
            f.write(seg.flat.astype("<u4").tobytes())


def _read_segments(path, width: int, height: int) -> list[Segment]:
    raw = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise BundleFormatError(f"segments: truncated file {path}")
        out = raw[off : off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4))
    segments = []
    for _ in range(count):
        au, av, npix = struct.unpack("<III", take(12))
        flat = np.frombuffer(take(4 * npix), dtype="<u4").astype(np.intp)
        if npix and flat.max() >= width * height:
            raise BundleFormatError("segments: pixel index out of bounds")
        segments.append(Segment(flat % width, flat // width, (au, av), width, height))
    return segments


def save_mask_candidates(path, candidates_per_query) -> None:
    with open(path, "wb") as f:
        total = sum(len(cands) for _, cands in candidates_per_query)
        f.write(struct.pack("<I", total))
        for query, cands in candidates_per_query:
            for c in cands:
                f.write(struct.pack("<III", int(query[0]), int(query[1]), c.area))
                f.write(c.pixels.astype("<u4").tobytes())
                f.write(struct.pack("<ff", c.stability, c.score))


def load_mask_candidates(path, width: int, height: int):
    """Returns candidates grouped per query, in file order."""
    raw = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise BundleFormatError(f"masks: truncated file {path}")
        out = raw[off : off + n]
        off += n
        return out

    (count,) = struct.unpack("<I", take(4))
    grouped: dict[tuple[int, int], list[MaskCandidate]] = {}
    order = []
    for _ in range(count):
        qu, qv, npix = struct.unpack("<III", take(12))
        flat = np.frombuffer(take(4 * npix), dtype="<u4").astype(np.intp)
        if npix and flat.max() >= width * height:
            raise BundleFormatError("masks: pixel index out of bounds")
        stability, score = struct.unpack("<ff", take(8))
        key = (qu, qv)
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(MaskCandidate(flat, stability, score, width, height))
    return [(k, grouped[k]) for k in order]


def save_sparse_depth(path, samples: np.ndarray) -> None:
    with open(path, "w") as f:
        for u, v, d in np.asarray(samples, dtype=np.float64):
            f.write(f"{int(u)} {int(v)} {float(d)!r}\n")


def load_sparse_depth(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) != 3:
                raise BundleFormatError(f"sparse_depth: bad line {line!r}")
            rows.append([float(tok[0]), float(tok[1]), float(tok[2])])
    return np.array(rows).reshape(-1, 3)


def save_bundle(bundle: FrameBundle, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    bundle.intr.save(path / "intrinsics.txt")
    _write_ppm(path / "image.ppm", bundle.image)
    (path / "normals.f32").write_bytes(
        np.ascontiguousarray(bundle.normals, dtype="<f4").tobytes())
    _write_segments(path / "segments.bin", bundle.segments)
    if bundle.gt_depth is not None:
        (path / "depth.f32").write_bytes(
            np.ascontiguousarray(bundle.gt_depth, dtype="<f4").tobytes())
    if bundle.gt_pose is not None:
        (path / "pose.txt").write_text(
            pose_to_tum_line(bundle.timestamp, bundle.gt_pose) + "\n")
    if bundle.sparse_depth is not None:
        save_sparse_depth(path / "sparse_depth.txt", bundle.sparse_depth)


def load_bundle(path) -> FrameBundle:
    path = Path(path)
    for required in ("intrinsics.txt", "image.ppm", "normals.f32", "segments.bin"):
        if not (path / required).exists():
            raise BundleFormatError(f"missing bundle file: {path / required}")
    intr = Intrinsics.load(path / "intrinsics.txt")
    h, w = intr.height, intr.width
    image = _read_ppm(path / "image.ppm")
    if image.shape != (h, w, 3):
        raise BundleFormatError(f"image: dimensions {image.shape[:2]} do not match intrinsics")
    raw = (path / "normals.f32").read_bytes()
    if len(raw) != h * w * 3 * 4:
        raise BundleFormatError(f"normals: expected {h*w*3*4} bytes, got {len(raw)}")
    normals = np.frombuffer(raw, dtype="<f4").reshape(h, w, 3).astype(np.float32)
    segments = _read_segments(path / "segments.bin", w, h)
    gt_depth = None
    if (path / "depth.f32").exists():
        raw = (path / "depth.f32").read_bytes()
        if len(raw) != h * w * 4:
            raise BundleFormatError(f"depth: expected {h*w*4} bytes, got {len(raw)}")
        gt_depth = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float32)
    gt_pose = None
    timestamp = 0.0
    if (path / "pose.txt").exists():
        timestamp, gt_pose = pose_from_tum_line((path / "pose.txt").read_text().strip())
    sparse = None
    if (path / "sparse_depth.txt").exists():
        sparse = load_sparse_depth(path / "sparse_depth.txt")
    return FrameBundle(image=image, normals=normals, segments=segments, intr=intr,
                       gt_depth=gt_depth, gt_pose=gt_pose, sparse_depth=sparse,
                       timestamp=timestamp)
