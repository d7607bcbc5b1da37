"""Synthetic scene generator: the test oracle replacing the neural front-end.

Scenes are ray-cast analytically (planes, spheres, axis-aligned boxes) with
smooth procedural albedo textures defined as functions of the 3D surface
point, so different views of the same surface observe the exact same texture.
Output per frame: color image, exact camera-frame normals (camera-facing,
n_z <= 0), exact depth, per-surface ground-truth segments, exact poses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bundle import FrameBundle
from .geometry import Intrinsics, Pose
from .segments import Segment, split_connected


class SceneGenerationError(RuntimeError):
    """Invalid scene configuration (e.g. camera inside geometry)."""


class _Texture:
    """Band-limited value noise over 3D points, seeded and smooth."""

    def __init__(self, rng: np.random.Generator, amplitude: float = 0.35,
                 n_waves: int = 8, freq_lo: float = 2.0, freq_hi: float = 22.0,
                 spectrum: float = 0.0):
        # log-uniform wave numbers: coarse structure for the pyramid levels,
        # fine detail so sub-pixel alignment stays well conditioned
        mag = np.exp(rng.uniform(math.log(freq_lo), math.log(freq_hi),
                                 size=(3, n_waves)))
        dirs = rng.normal(size=(3, n_waves, 3))
        dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
        self.omega = dirs * mag[:, :, None]
        self.phase = rng.uniform(0, 2 * math.pi, size=(3, n_waves))
        # spectrum > 0 reddens the texture (fine waves damped by f^-spectrum),
        # trading gradient detail against bilinear view-consistency error
        amps = rng.uniform(0.5, 1.0, size=(3, n_waves)) * (freq_lo / mag) ** spectrum
        amps *= amplitude / np.abs(amps).sum(axis=1, keepdims=True)
        self.amps = amps
        self.base = rng.uniform(0.4, 0.6, size=3)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Albedo in [0.02, 0.98] for (N, 3) points -> (N, 3)."""
        out = np.empty((len(points), 3))
        for c in range(3):
            phase = points @ self.omega[c].T + self.phase[c]
            out[:, c] = self.base[c] + np.sin(phase) @ self.amps[c]
        return np.clip(out, 0.02, 0.98)


@dataclass
class PlaneSurface:
    """Finite textured rectangle: center, unit normal, in-plane x axis, half extents."""

    center: np.ndarray
    normal: np.ndarray
    x_axis: np.ndarray
    half_extent: tuple[float, float]

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        n = np.asarray(self.normal, dtype=np.float64)
        self.normal = n / np.linalg.norm(n)
        x = np.asarray(self.x_axis, dtype=np.float64)
        x = x - self.normal * (x @ self.normal)
        self.x_axis = x / np.linalg.norm(x)
        self.y_axis = np.cross(self.normal, self.x_axis)

    def intersect(self, origin, dirs):
        denom = dirs @ self.normal
        num = (self.center - origin) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        pts = origin + t[:, None] * dirs
        rel = pts - self.center
        inside = (np.abs(rel @ self.x_axis) <= self.half_extent[0]) & \
                 (np.abs(rel @ self.y_axis) <= self.half_extent[1])
        t = np.where(inside & (t > 1e-9), t, np.inf)
        normals = np.broadcast_to(self.normal, dirs.shape)
        return t, normals

    def contains(self, point) -> bool:
        return False

    @property
    def centroid(self) -> np.ndarray:
        return self.center


@dataclass
class SphereSurface:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where(ok & (t > 1e-9), t, np.inf)
        pts = origin + t[:, None] * dirs
        normals = (pts - self.center) / self.radius
        return t, normals

    def contains(self, point) -> bool:
        return np.linalg.norm(point - self.center) <= self.radius

    @property
    def centroid(self) -> np.ndarray:
        return self.center


@dataclass
class BoxSurface:
    """Axis-aligned box given by min/max corners."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)

    def intersect(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
        t_lo = (self.lo - origin) * inv
        t_hi = (self.hi - origin) * inv
        t1 = np.minimum(t_lo, t_hi)
        t2 = np.maximum(t_lo, t_hi)
        t_near = t1.max(axis=1)
        t_far = t2.min(axis=1)
        hit = (t_near <= t_far) & (t_far > 1e-9)
        t = np.where(t_near > 1e-9, t_near, t_far)
        t = np.where(hit, t, np.inf)
        # face normal: the axis achieving t_near (or t_far when inside)
        axis = np.where((t_near > 1e-9)[:, None], t1 == t_near[:, None], t2 == t[:, None])
        normals = np.zeros_like(dirs)
        for k in range(3):
            sel = axis[:, k] & (normals == 0).all(axis=1)
            normals[sel, k] = -np.sign(dirs[sel, k])
        return t, normals

    def contains(self, point) -> bool:
        return bool(np.all(point >= self.lo) and np.all(point <= self.hi))

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


# distance at which texture_freq_hi is the realized wave number; nearer or
# farther surfaces get proportionally rescaled frequencies
TEXTURE_REF_DIST = 2.5


@dataclass
class SceneSpec:
    """Declarative scene: surfaces, camera trajectory, calibration."""

    surfaces: list
    trajectory: list[Pose]  # camera-to-world
    intr: Intrinsics
    texture_amplitude: float = 0.35
    texture_freq_hi: float = 22.0    # finest wave number (rad/unit) at TEXTURE_REF_DIST
    texture_spectrum: float = 0.0    # spectral slope; 0 = flat, 1 = 1/f
    segment_grid: int | None = 40    # subdivide surfaces into ~NxN px segments
    min_segment_area: int = 16
    frame_dt: float = 1.0 / 30.0


def _ray_dirs(intr: Intrinsics) -> np.ndarray:
    """Camera-frame ray directions with unit z, one per pixel, row-major."""
    u, v = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
    d = np.stack([(u.ravel() - intr.cu) / intr.fu,
                  (v.ravel() - intr.cv) / intr.fv,
                  np.ones(intr.width * intr.height)], axis=1)
    return d


def render_frame(spec: SceneSpec, pose: Pose, textures: list[_Texture]):
    """Ray-cast one frame; returns (image, normals_cam, depth, surface_id)."""
    intr = spec.intr
    h, w = intr.height, intr.width
    dirs_cam = _ray_dirs(intr)
    dirs_world = dirs_cam @ pose.R.T
    origin = pose.t
    n_pix = h * w
    best_t = np.full(n_pix, np.inf)
    best_id = np.full(n_pix, -1, dtype=np.int32)
    best_n = np.zeros((n_pix, 3))
    for sid, surf in enumerate(spec.surfaces):
        if surf.contains(origin):
            raise SceneGenerationError(f"camera inside surface {sid}")
        t, normals = surf.intersect(origin, dirs_world)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = sid
        best_n[closer] = normals[closer]
    hit = best_id >= 0
    depth = np.where(hit, best_t, 0.0)
    pts_world = origin + np.where(hit, best_t, 1.0)[:, None] * dirs_world
    image = np.full((n_pix, 3), 0.02)
    for sid in range(len(spec.surfaces)):
        sel = best_id == sid
        if np.any(sel):
            image[sel] = textures[sid](pts_world[sel])
    # normals into the camera frame, oriented toward the camera
    n_cam = best_n @ pose.R
    flip = np.einsum("ij,ij->i", n_cam, dirs_cam) > 0
    n_cam[flip] *= -1.0
    n_cam[~hit] = (0.0, 0.0, -1.0)
    return (image.reshape(h, w, 3), n_cam.reshape(h, w, 3),
            depth.reshape(h, w), best_id.reshape(h, w))


def _segments_from_ids(surface_id: np.ndarray, grid: int | None,
                       min_area: int) -> list[Segment]:
    h, w = surface_id.shape
    segments = []
    for sid in range(surface_id.max() + 1):
        mask = surface_id == sid
        if mask.sum() < min_area:
            continue
        cells = [mask]
        if grid is not None:
            cells = []
            for v0 in range(0, h, grid):
                for u0 in range(0, w, grid):
                    cell = np.zeros_like(mask)
                    cell[v0 : v0 + grid, u0 : u0 + grid] = mask[v0 : v0 + grid, u0 : u0 + grid]
                    if cell.sum() >= min_area:
                        cells.append(cell)
        for cell in cells:
            vs, us = np.nonzero(cell)
            cu, cv = us.mean(), vs.mean()
            k = int(np.argmin((us - cu) ** 2 + (vs - cv) ** 2))
            seg = Segment(us, vs, (int(us[k]), int(vs[k])), w, h)
            segments.extend(split_connected(seg, min_area=min_area))
    return segments


def synth_scene(spec: SceneSpec, rng_seed: int) -> list[FrameBundle]:
    """Generate ground-truth bundles for every pose in the trajectory."""
    rng = np.random.default_rng(rng_seed)
    # texture wave numbers are scaled by each surface's distance from the
    # camera so the projected pixel-space texture scale stays comparable
    # across depths (texture_freq_hi is specified at TEXTURE_REF_DIST)
    cam = np.mean([p.t for p in spec.trajectory], axis=0)
    textures = []
    for surf in spec.surfaces:
        dist = max(float(np.linalg.norm(surf.centroid - cam)), 0.5)
        textures.append(_Texture(rng, spec.texture_amplitude,
                                 freq_hi=spec.texture_freq_hi
                                 * TEXTURE_REF_DIST / dist,
                                 spectrum=spec.texture_spectrum))
    bundles = []
    for i, pose in enumerate(spec.trajectory):
        image, normals, depth, surface_id = render_frame(spec, pose, textures)
        segments = _segments_from_ids(surface_id, spec.segment_grid, spec.min_segment_area)
        bundles.append(FrameBundle(
            image=image,
            normals=normals.astype(np.float32),
            segments=segments,
            intr=spec.intr,
            gt_depth=depth.astype(np.float32),
            gt_pose=pose,
            timestamp=i * spec.frame_dt,
        ))
    return bundles


def visible_fraction(segment: Segment, ref_bundle: FrameBundle,
                     target_bundle: FrameBundle, depth_tol: float = 0.02) -> float:
    """Ground-truth fraction of segment pixels unoccluded and in view in the
    target frame. Oracle-only helper (requires gt depth and poses)."""
    from .geometry import bilinear_sample

    t_rel = target_bundle.gt_pose.inverse().compose(ref_bundle.gt_pose)
    intr = ref_bundle.intr
    d = ref_bundle.gt_depth[segment.vs, segment.us].astype(np.float64)
    ok = d > 0
    x = np.stack([(segment.us - intr.cu) / intr.fu * d,
                  (segment.vs - intr.cv) / intr.fv * d, d], axis=1)
    xt = x @ t_rel.R.T + t_rel.t
    z = np.maximum(xt[:, 2], 1e-9)
    ti = target_bundle.intr
    uv = np.stack([ti.fu * xt[:, 0] / z + ti.cu, ti.fv * xt[:, 1] / z + ti.cv], axis=1)
    # snap float jitter at integer coordinates so border pixels stay in domain
    near = np.abs(uv - np.round(uv)) < 1e-9
    uv[near] = np.round(uv[near])
    z_obs, valid = bilinear_sample(target_bundle.gt_depth.astype(np.float64), uv)
    ok &= valid & (xt[:, 2] > 0) & (z_obs > z - depth_tol)
    return float(ok.mean())


def look_at(position, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-to-world pose at `position` with +z toward `target`.

    Default up follows the image convention (v grows downward).
    """
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z = z / np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(-up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), position)


def default_intrinsics(width: int = 160, height: int = 120) -> Intrinsics:
    f = 0.9 * width
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def cluttered_surfaces(seed: int = 0) -> list:
    """Textured backdrop plane + slanted plane + sphere + box around z ~ 2-3."""
    rng = np.random.default_rng(seed)
    jitter = lambda s: rng.uniform(-s, s)
    back = PlaneSurface(center=[jitter(0.1), jitter(0.1), 3.2 + jitter(0.2)],
                        normal=[0.15 + jitter(0.05), jitter(0.1), -1.0],
                        x_axis=[1.0, 0.0, 0.0], half_extent=(6.0, 6.0))
    slanted = PlaneSurface(center=[-0.8 + jitter(0.1), -0.3 + jitter(0.1), 2.4],
                           normal=[0.5, 0.2 + jitter(0.1), -1.0],
                           x_axis=[1.0, 0.0, 0.2], half_extent=(0.55, 0.5))
    sphere = SphereSurface(center=[0.55 + jitter(0.1), 0.25 + jitter(0.1), 2.4 + jitter(0.1)],
                           radius=0.45)
    box = BoxSurface(lo=[-0.35 + jitter(0.05), 0.25, 2.5],
                     hi=[0.25 + jitter(0.05), 0.95, 3.0])
    return [back, slanted, sphere, box]


def two_view_spec(seed: int = 0, baseline_frac: float = 0.05,
                  intr: Intrinsics | None = None, segment_grid: int = 40,
                  n_targets: int = 1) -> SceneSpec:
    """Reference + n_targets views with baselines ~5% of the mean depth."""
    intr = intr or default_intrinsics()
    mean_depth = 2.5
    baseline = baseline_frac * mean_depth
    rng = np.random.default_rng(seed + 12345)
    target_pt = np.array([0.0, 0.0, mean_depth])
    trajectory = [look_at(np.zeros(3), target_pt)]
    for _ in range(n_targets):
        # dominantly lateral baseline: keeps the epipole far outside the
        # image so every segment observes usable parallax
        direction = rng.normal(size=3)
        direction[2] *= 0.05
        direction /= np.linalg.norm(direction)
        trajectory.append(look_at(baseline * direction, target_pt))
    return SceneSpec(surfaces=cluttered_surfaces(seed), trajectory=trajectory,
                     intr=intr, segment_grid=segment_grid)


def orbit_spec(seed: int = 0, n_frames: int = 30, radius: float = 0.35,
               intr: Intrinsics | None = None, arc: float = math.pi / 3,
               segment_grid: int = 40) -> SceneSpec:
    """Camera arcing around the scene center, always looking at it."""
    intr = intr or default_intrinsics()
    target = np.array([0.0, 0.0, 2.6])
    center = target - np.array([0.0, 0.0, 2.6])
    traj = []
    for i in range(n_frames):
        ang = arc * (i / max(n_frames - 1, 1) - 0.5)
        pos = center + np.array([radius * math.sin(ang), 0.0,
                                 radius * (1 - math.cos(ang))])
        traj.append(look_at(pos, target))
    return SceneSpec(surfaces=cluttered_surfaces(seed), trajectory=traj,
                     intr=intr, segment_grid=segment_grid)


def static_spec(seed: int = 0, n_frames: int = 10,
                intr: Intrinsics | None = None) -> SceneSpec:
    intr = intr or default_intrinsics()
    pose = Pose.identity()
    return SceneSpec(surfaces=cluttered_surfaces(seed),
                     trajectory=[pose.copy() for _ in range(n_frames)], intr=intr)
