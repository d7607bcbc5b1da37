"""Keyframe-based monocular visual odometry.

A sliding window of at most five keyframes, each holding its integrated
segments and per-segment depth scales. New frames are tracked pose-only
against the latest keyframe; when the view changes enough a new keyframe is
spawned, its scales seeded by rendering the previous keyframe's point cloud
into it, and the whole window is refined jointly (poses + scales) against
neighbouring keyframes and a few pose-only supplementary views. Tracking and
mapping are interleaved in a single thread.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .alignment import (AlignmentProblem, AlignmentSettings,
                        DegenerateProblemError, NonFiniteCostError, RefView,
                        ScaledPrimitive, TargetView, optimize, two_view_sfm)
from .bundle import FrameBundle
from .completion import SparseDepth, fit_scale, fuse, render_depth
from .geometry import Pose, PointCloud, so3_log
from .integration import Primitive, integrate_bundle
from .trajectory import Trajectory


class InitializationError(RuntimeError):
    """Two-view bootstrap failed (degenerate alignment)."""


class TrackingLostError(RuntimeError):
    """Photometric tracking collapsed (no signal or non-finite cost)."""


class MappingError(RuntimeError):
    """Window refinement failed; the window was rolled back."""


class SpawnError(RuntimeError):
    """New keyframe shares no geometry with the previous one."""


@dataclass
class VOConfig:
    window_size: int = 5
    max_supplementary: int = 4
    # keyframe trigger: any of these fires a spawn
    trigger_displacement_px: float = 20.0
    trigger_rotation_deg: float = 10.0
    trigger_max_frames: int = 30
    integration_mode: str = "full"   # full | const-normal | const-depth
    # photometric signal floor: a target with less dynamic range is "lost"
    min_image_contrast: float = 1e-4
    min_active_fraction: float = 0.2
    init_settings: AlignmentSettings = field(
        default_factory=lambda: AlignmentSettings(iterations=400, levels=4))
    track_settings: AlignmentSettings = field(
        default_factory=lambda: AlignmentSettings(iterations=120, levels=3))
    map_settings: AlignmentSettings = field(
        default_factory=lambda: AlignmentSettings(
            iterations=80, levels=3, normalize_primitives=False))


@dataclass
class Keyframe:
    """A posed frame carrying integrated segments and their depth scales."""

    bundle: FrameBundle
    pose: Pose
    prims: list[Primitive]
    log_scales: np.ndarray
    kf_id: int
    timestamp: float
    # tracked non-keyframe frames since this keyframe (supplementary views)
    supp_images: list[np.ndarray] = field(default_factory=list)
    supp_poses: list[Pose] = field(default_factory=list)
    _ref_view: RefView = field(default=None, repr=False)

    def ref_view(self, pose_id: int, scales_free: bool,
                 levels: int) -> RefView:
        """RefView over this keyframe's primitives with cached pyramids."""
        if self._ref_view is None:
            self._ref_view = RefView(prims=self.prims,
                                     image=self.bundle.image,
                                     intr=self.bundle.intr, pose_id=pose_id,
                                     log_scales=self.log_scales.copy())
            self._ref_view.prepare(levels)
        rv = self._ref_view
        rv.prepare(levels)
        return replace(rv, pose_id=pose_id,
                       log_scales=self.log_scales.copy(),
                       scales_free=scales_free)

    def scaled_primitives(self) -> list[ScaledPrimitive]:
        return [ScaledPrimitive(p, float(s))
                for p, s in zip(self.prims, self.log_scales)]

    def cloud(self) -> PointCloud:
        """Fused point cloud in this keyframe's camera frame."""
        return fuse(self.scaled_primitives(), self.bundle.intr,
                    image=self.bundle.image)


@dataclass
class WindowState:
    """FIFO keyframe window; the run's first keyframe pose is the gauge."""

    keyframes: list[Keyframe] = field(default_factory=list)
    window_size: int = 5
    next_kf_id: int = 0
    frames_since_kf: int = 0
    first_kf_fixed: bool = True

    def __post_init__(self):
        self._check()

    def _check(self):
        if len(self.keyframes) > self.window_size:
            raise ValueError("window overflow")
        ids = [k.kf_id for k in self.keyframes]
        if ids != sorted(ids):
            raise ValueError("keyframes out of FIFO order")

    @property
    def latest(self) -> Keyframe:
        return self.keyframes[-1]

    def push(self, kf: Keyframe):
        self.keyframes.append(kf)
        if len(self.keyframes) > self.window_size:
            self.keyframes.pop(0)   # evict the earliest
        self._check()


def _fit_scales_from_depthmap(prims: list[Primitive], depth: np.ndarray
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Per-primitive log scale against a rendered depth map.

    Primitives without any rendered support get the median fitted scale.
    Returns (log_scales, supported mask); raises SpawnError when nothing fits.
    """
    vs, us = np.nonzero(depth > 0)
    sparse = SparseDepth(np.stack([us, vs, depth[vs, us]], axis=1))
    fitted = [fit_scale(p, sparse) for p in prims]
    supported = np.array([f is not None for f in fitted])
    if not supported.any():
        raise SpawnError("rendered depth supports no primitive")
    scales = np.array([f if f is not None else 0.0 for f in fitted])
    scales[~supported] = np.median(scales[supported])
    return scales, supported


def initialize(b0: FrameBundle, b1: FrameBundle,
               config: VOConfig | None = None) -> WindowState:
    """Two-view bootstrap: SfM on the first pair, then scales for both."""
    config = config or VOConfig()
    prims0 = integrate_bundle(b0, mode=config.integration_mode)
    prims1 = integrate_bundle(b1, mode=config.integration_mode)
    try:
        res = two_view_sfm(b0, prims0, [b1], config.init_settings)
    except (DegenerateProblemError, NonFiniteCostError) as e:
        raise InitializationError(str(e)) from e
    kf0 = Keyframe(bundle=b0, pose=Pose.identity(), prims=prims0,
                   log_scales=res.log_scales[0], kf_id=0,
                   timestamp=b0.timestamp)
    # seed the second keyframe's scales from the first keyframe's geometry
    rel = kf0.pose.inverse().compose(res.poses[1])
    rendered = render_depth(kf0.cloud(), b1.intr, pose=rel)
    scales1, _ = _fit_scales_from_depthmap(prims1, rendered.depth)
    kf1 = Keyframe(bundle=b1, pose=res.poses[1], prims=prims1,
                   log_scales=scales1, kf_id=1, timestamp=b1.timestamp)
    window = WindowState(window_size=config.window_size)
    window.push(kf0)
    window.push(kf1)
    window.next_kf_id = 2
    return window


def track(window: WindowState, image: np.ndarray,
          init_pose: Pose | None = None,
          config: VOConfig | None = None) -> Pose:
    """Pose of a new frame against the latest keyframe (scales frozen).

    `init_pose` is the motion-model guess (camera-to-world); defaults to the
    keyframe's own pose. Returns the frame's camera-to-world pose.
    """
    config = config or VOConfig()
    kf = window.latest
    if float(np.ptp(image)) < config.min_image_contrast:
        raise TrackingLostError("target image has no photometric signal")
    st = config.track_settings
    ref = kf.ref_view(pose_id=0, scales_free=False, levels=st.levels)
    init = init_pose.copy() if init_pose is not None else kf.pose.copy()
    problem = AlignmentProblem(
        poses=[kf.pose.copy(), init], pose_fixed=[True, False],
        refs=[ref],
        targets=[TargetView(image=image, intr=kf.bundle.intr, pose_id=1)],
        pairs=[(0, 0)], settings=st)
    try:
        res = optimize(problem)
    except (DegenerateProblemError, NonFiniteCostError) as e:
        raise TrackingLostError(str(e)) from e
    active = np.mean(res.valid_fractions[0] >= st.min_valid_fraction)
    if active < config.min_active_fraction:
        raise TrackingLostError(
            f"only {active:.0%} of primitives kept photometric overlap")
    return res.poses[1]


def keyframe_due(window: WindowState, kf: Keyframe, frame_pose: Pose,
                 config: VOConfig) -> bool:
    """Spawn trigger: large pixel displacement, rotation, or frame count."""
    if window.frames_since_kf + 1 >= config.trigger_max_frames:
        return True
    rel = kf.pose.inverse().compose(frame_pose)
    rot_deg = np.degrees(np.linalg.norm(so3_log(rel.R)))
    if rot_deg > config.trigger_rotation_deg:
        return True
    intr = kf.bundle.intr
    disp = []
    t_inv = rel.inverse()
    for sp in kf.scaled_primitives():
        seg = sp.prim.segment
        d = sp.depth()
        x = np.stack([(seg.us - intr.cu) / intr.fu * d,
                      (seg.vs - intr.cv) / intr.fv * d, d], axis=1)
        xt = t_inv.apply(x)
        z = xt[:, 2]
        ok = z > 1e-9
        if not ok.any():
            continue
        u = intr.fu * xt[ok, 0] / z[ok] + intr.cu
        v = intr.fv * xt[ok, 1] / z[ok] + intr.cv
        disp.append(np.hypot(u - seg.us[ok], v - seg.vs[ok]))
    if not disp:
        return True   # nothing reprojects: the view changed completely
    return float(np.concatenate(disp).mean()) > config.trigger_displacement_px


def spawn_keyframe(window: WindowState, bundle: FrameBundle, pose: Pose,
                   config: VOConfig | None = None) -> Keyframe:
    """New keyframe at a tracked pose; scales seeded from the previous one.

    The previous keyframe's point cloud is rendered into the new frame and
    each new primitive's scale is fitted to the rendered depth exactly as in
    depth completion; unsupported primitives inherit the median scale.
    """
    config = config or VOConfig()
    prev = window.latest
    prims = integrate_bundle(bundle, mode=config.integration_mode)
    rel = prev.pose.inverse().compose(pose)
    rendered = render_depth(prev.cloud(), bundle.intr, pose=rel)
    scales, supported = _fit_scales_from_depthmap(prims, rendered.depth)
    kf = Keyframe(bundle=bundle, pose=pose.copy(), prims=prims,
                  log_scales=scales, kf_id=window.next_kf_id,
                  timestamp=bundle.timestamp)
    window.next_kf_id += 1
    window.frames_since_kf = 0
    window.push(kf)
    return kf


def map_window(window: WindowState, config: VOConfig | None = None) -> float:
    """Joint refinement of all keyframe scales and poses in the window.

    Every keyframe's primitives are aligned against its temporally adjacent
    keyframes plus its pose-only supplementary views; the summed cost is
    minimized over all scales and all poses except the gauge (the run's first
    keyframe when present, else the oldest keyframe in the window). Rolls the
    window back and raises MappingError on degenerate problems.
    """
    config = config or VOConfig()
    kfs = window.keyframes
    if len(kfs) < 2:
        raise MappingError("mapping needs at least two keyframes")
    st = config.map_settings
    poses = [k.pose.copy() for k in kfs]
    fixed = [False] * len(kfs)
    fixed[0] = True   # gauge: global first keyframe, or oldest when evicted
    refs, targets, pairs = [], [], []
    for i, kf in enumerate(kfs):
        refs.append(kf.ref_view(pose_id=i, scales_free=True,
                                levels=st.levels))
        targets.append(TargetView(image=kf.bundle.image, intr=kf.bundle.intr,
                                  pose_id=i))
    for i, kf in enumerate(kfs):
        for j in (i - 1, i + 1):   # temporally adjacent keyframes
            if 0 <= j < len(kfs):
                pairs.append((i, j))
        supp = list(zip(kf.supp_images, kf.supp_poses))
        if len(supp) > config.max_supplementary:
            idx = np.linspace(0, len(supp) - 1,
                              config.max_supplementary).round().astype(int)
            supp = [supp[k] for k in idx]   # evenly thinned
        for img, sp_pose in supp:
            poses.append(sp_pose.copy())
            fixed.append(False)
            targets.append(TargetView(image=img, intr=kf.bundle.intr,
                                      pose_id=len(poses) - 1))
            pairs.append((i, len(targets) - 1))
    problem = AlignmentProblem(poses=poses, pose_fixed=fixed, refs=refs,
                               targets=targets, pairs=pairs, settings=st)
    try:
        res = optimize(problem)
    except (DegenerateProblemError, NonFiniteCostError) as e:
        raise MappingError(str(e)) from e   # window state untouched
    for i, kf in enumerate(kfs):
        kf.pose = res.poses[i]
        kf.log_scales = res.log_scales[i]
    return res.final_cost


@dataclass
class VOResult:
    trajectory: Trajectory
    keyframe_clouds: list[tuple[int, PointCloud]]
    log_lines: list[str]
    tracking_lost: bool = False


def run_vo(frames: list[FrameBundle], config: VOConfig | None = None
           ) -> VOResult:
    """Full odometry run: bootstrap, then interleaved tracking and mapping.

    Emits one pose per input frame (TUM order). On tracking loss the partial
    trajectory is returned with `tracking_lost` set; there is no relocalization.
    """
    config = config or VOConfig()
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    window = initialize(frames[0], frames[1], config)
    ts = [frames[0].timestamp, frames[1].timestamp]
    poses = [window.keyframes[0].pose, window.keyframes[1].pose]
    log = [f"init: keyframes 0,1  kfs {len(window.keyframes)}"]
    lost = False
    prev_rel = Pose.identity()   # constant-velocity model
    last_pose = poses[-1]
    for fi in range(2, len(frames)):
        frame = frames[fi]
        guess = last_pose.compose(prev_rel)
        try:
            pose = track(window, frame.image, init_pose=guess, config=config)
        except TrackingLostError as e:
            log.append(f"frame {fi}: tracking lost ({e})")
            lost = True
            break
        window.frames_since_kf += 1
        ts.append(frame.timestamp)
        poses.append(pose)
        kf = window.latest
        if keyframe_due(window, kf, pose, config):
            spawn_keyframe(window, frame, pose, config)
            cost = map_window(window, config)
            poses[-1] = window.latest.pose
            pose = poses[-1]
            log.append(f"frame {fi}: keyframe {window.latest.kf_id} "
                       f"spawned, window cost {cost:.5f}")
        else:
            kf.supp_images.append(frame.image)
            kf.supp_poses.append(pose)
            log.append(f"frame {fi}: tracked")
        prev_rel = last_pose.inverse().compose(pose)
        last_pose = pose
    # keyframe clouds reflect the final refined scales/poses
    kf_clouds = [(k.kf_id, k.cloud()) for k in window.keyframes]
    traj = Trajectory(np.array(ts), poses)
    return VOResult(trajectory=traj, keyframe_clouds=kf_clouds,
                    log_lines=log, tracking_lost=lost)
