"""Per-segment photometric alignment: joint depth-scale and pose estimation.

Each solved segment is warped rigidly (up to its depth scale) into target
views; the cost is the mean per-segment l1 photometric residual, summed over
targets, plus a small quadratic penalty pulling log-scales toward their
initial values. Minimization is first-order (Adam) over log-scales and
6-vector pose increments, scheduled coarse-to-fine over an image pyramid.

The same machinery covers two-view SfM, pose-only tracking, and the joint
sliding-window refinement of the odometry module: a problem is a set of
posed views, some carrying segments with optimizable scales, plus a list of
(reference, target) pairs.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (Intrinsics, Pose, bilinear_sample, bilinear_sample_grad,
                       build_pyramid, intrinsics_pyramid, retract)
from .integration import Primitive


class DegenerateProblemError(RuntimeError):
    """No active primitive remains (no photometric overlap)."""


class NonFiniteCostError(RuntimeError):
    """The cost became non-finite; diagnostics in the message."""


@dataclass
class ScaledPrimitive:
    """A solved primitive plus its log depth-scale (log-depth at the anchor)."""

    prim: Primitive
    log_scale: float

    def depth(self) -> np.ndarray:
        return np.exp(self.log_scale + self.prim.log_udepth)

    def anchor_depth(self) -> float:
        return float(np.exp(self.log_scale))


@dataclass
class AlignmentSettings:
    lr_pose: float = 1e-2
    lr_scale: float = 1e-2
    iterations: int = 200          # Adam steps per pyramid level
    levels: int = 3
    scale_penalty: float = 1e-5
    charbonnier_eps: float = 1e-3  # 0 selects the plain l1 subgradient
    min_valid_fraction: float = 0.3
    normalize_primitives: bool = True   # mean over active segments vs plain sum
    lr_decay: float = 0.01         # cosine-like decay floor within each level


def warp_primitive(sp: ScaledPrimitive, t_tr: Pose, intr_ref: Intrinsics,
                   intr_t: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Target pixel coordinates of every segment pixel under t_tr (ref->target).

    Returns (uv_target (N, 2), valid (N,)); invalid marks points behind the
    camera or outside the target interpolation domain.
    """
    seg = sp.prim.segment
    d = sp.depth()
    x = np.stack([(seg.us - intr_ref.cu) / intr_ref.fu * d,
                  (seg.vs - intr_ref.cv) / intr_ref.fv * d,
                  d], axis=1)
    xt = x @ t_tr.R.T + t_tr.t
    z = xt[:, 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    uv = np.stack([intr_t.fu * xt[:, 0] / zs + intr_t.cu,
                   intr_t.fv * xt[:, 1] / zs + intr_t.cv], axis=1)
    # snap float jitter so border pixels survive a round-trip warp
    near = np.abs(uv - np.round(uv)) < 1e-9
    uv[near] = np.round(uv[near])
    valid &= ((uv[:, 0] >= 0) & (uv[:, 0] <= intr_t.width - 1)
              & (uv[:, 1] >= 0) & (uv[:, 1] <= intr_t.height - 1))
    uv[~valid] = -1.0
    return uv, valid


def primitive_residual(sp: ScaledPrimitive, image_ref: np.ndarray,
                       image_t: np.ndarray, t_tr: Pose, intr_ref: Intrinsics,
                       intr_t: Intrinsics,
                       min_valid_fraction: float = 0.3) -> float | None:
    """Mean l1 photometric error of one warped segment; None when inactive."""
    seg = sp.prim.segment
    uv, valid = warp_primitive(sp, t_tr, intr_ref, intr_t)
    if valid.sum() < min_valid_fraction * seg.area or valid.sum() == 0:
        return None
    vals, _ = bilinear_sample(image_t, uv[valid])
    ref_vals = image_ref[seg.vs[valid], seg.us[valid]]
    return float(np.abs(ref_vals - vals).sum(axis=1).mean())


class _RefBlock:
    """Concatenated per-pixel data of one view's primitives at one level."""

    __slots__ = ("uv", "logud", "ref_vals", "seg_ids", "sizes", "n_prims", "rays")

    def __init__(self, uv, logud, ref_vals, seg_ids, sizes, intr):
        self.uv = uv
        self.logud = logud
        self.ref_vals = ref_vals
        self.seg_ids = seg_ids
        self.sizes = sizes
        self.n_prims = len(sizes)
        # unit-depth rays: x = ray * depth
        self.rays = np.stack([(uv[:, 0] - intr.cu) / intr.fu,
                              (uv[:, 1] - intr.cv) / intr.fv,
                              np.ones(len(uv))], axis=1)


def _build_ref_blocks(prims: list[Primitive], image_pyr: list[np.ndarray],
                      intr_pyr: list[Intrinsics]) -> list[_RefBlock]:
    """Per-level concatenated primitive data; coarse levels pool 2x2 blocks."""
    blocks = []
    for level, (img, intr) in enumerate(zip(image_pyr, intr_pyr)):
        uvs, logs, vals, ids, sizes = [], [], [], [], []
        scale = 2 ** level
        for pid, p in enumerate(prims):
            seg = p.segment
            if level == 0:
                cu, cv, lg = seg.us, seg.vs, p.log_udepth
            else:
                cu = seg.us // scale
                cv = seg.vs // scale
                key = cv * intr.width + cu
                uniq, inv = np.unique(key, return_inverse=True)
                cnt = np.bincount(inv)
                lg = np.bincount(inv, weights=p.log_udepth) / cnt
                cu = uniq % intr.width
                cv = uniq // intr.width
                au, av = seg.anchor[0] // scale, seg.anchor[1] // scale
                akey = av * intr.width + au
                k = np.searchsorted(uniq, akey)
                if k < len(uniq) and uniq[k] == akey:
                    lg = lg - lg[k]
            keep = (cu < intr.width) & (cv < intr.height)
            cu, cv, lg = cu[keep], cv[keep], lg[keep]
            if len(cu) == 0:
                continue
            uvs.append(np.stack([cu, cv], axis=1).astype(np.float64))
            logs.append(lg)
            vals.append(img[cv, cu])
            ids.append(np.full(len(cu), pid, dtype=np.intp))
            sizes.append(len(cu))
        if not uvs:
            blocks.append(None)
            continue
        cat = lambda xs: np.concatenate(xs)
        seg_ids = cat(ids)
        sizes_arr = np.bincount(seg_ids, minlength=len(prims))
        blocks.append(_RefBlock(cat(uvs), cat(logs), cat(vals), seg_ids,
                                sizes_arr, intr))
    return blocks


@dataclass
class RefView:
    """A view contributing primitives whose scales may be optimized."""

    prims: list[Primitive]
    image: np.ndarray
    intr: Intrinsics
    pose_id: int
    log_scales: np.ndarray
    scales_free: bool = True
    blocks: list = field(default=None, repr=False)
    image_pyr: list = field(default=None, repr=False)
    intr_pyr: list = field(default=None, repr=False)

    def prepare(self, levels: int):
        if self.blocks is None or len(self.blocks) < levels:
            self.image_pyr = build_pyramid(self.image, levels)
            self.intr_pyr = intrinsics_pyramid(self.intr, levels)
            self.blocks = _build_ref_blocks(self.prims, self.image_pyr, self.intr_pyr)


@dataclass
class TargetView:
    """A view observed photometrically (image only)."""

    image: np.ndarray
    intr: Intrinsics
    pose_id: int
    image_pyr: list = field(default=None, repr=False)
    intr_pyr: list = field(default=None, repr=False)

    def prepare(self, levels: int):
        if self.image_pyr is None or len(self.image_pyr) < levels:
            self.image_pyr = build_pyramid(self.image, levels)
            self.intr_pyr = intrinsics_pyramid(self.intr, levels)


@dataclass
class AlignmentProblem:
    """Posed views, primitive-bearing references, and (ref, target) pairs."""

    poses: list[Pose]
    pose_fixed: list[bool]
    refs: list[RefView]
    targets: list[TargetView]
    pairs: list[tuple[int, int]]
    settings: AlignmentSettings = field(default_factory=AlignmentSettings)

    def prepare(self):
        for r in self.refs:
            r.prepare(self.settings.levels)
        for t in self.targets:
            t.prepare(self.settings.levels)


@dataclass
class AlignmentResult:
    log_scales: list[np.ndarray]     # per ref view
    poses: list[Pose]
    final_cost: float
    valid_fractions: list[np.ndarray]
    cost_history: list[float]


def _evaluate(problem: AlignmentProblem, level: int, poses: list[Pose],
              scales: list[np.ndarray], with_grad: bool):
    """Cost (+ optional gradients) of the problem at one pyramid level.

    Returns (cost, g_scales per ref, g_poses (n,6), valid_frac per ref).
    """
    st = problem.settings
    eps = st.charbonnier_eps
    g_scales = [np.zeros_like(s) for s in scales] if with_grad else None
    g_poses = np.zeros((len(poses), 6)) if with_grad else None
    valid_fracs = [np.zeros(len(r.prims)) for r in problem.refs]
    cost = 0.0
    any_active = False
    for ref_idx, tgt_idx in problem.pairs:
        ref = problem.refs[ref_idx]
        tgt = problem.targets[tgt_idx]
        block = ref.blocks[level]
        if block is None:
            continue
        t_r = poses[ref.pose_id]
        t_t = poses[tgt.pose_id]
        img_t = tgt.image_pyr[level]
        intr_t = tgt.intr_pyr[level]
        d = np.exp(scales[ref_idx][block.seg_ids] + block.logud)
        x_r = block.rays * d[:, None]
        y = x_r @ t_r.R.T + t_r.t
        xt = (y - t_t.t) @ t_t.R
        z = xt[:, 2]
        valid = z > 1e-9
        zs = np.where(valid, z, 1.0)
        uv = np.stack([intr_t.fu * xt[:, 0] / zs + intr_t.cu,
                       intr_t.fv * xt[:, 1] / zs + intr_t.cv], axis=1)
        uv[~valid] = -10.0
        if with_grad:
            vals, du, dv, v2 = bilinear_sample_grad(img_t, uv)
        else:
            vals, v2 = bilinear_sample(img_t, uv)
        valid &= v2
        diff = block.ref_vals - vals
        if eps > 0:
            rho_c = np.sqrt(diff * diff + eps * eps) - eps
            drho = diff / (rho_c + eps)
        else:
            rho_c = np.abs(diff)
            drho = np.sign(diff)
        rho = rho_c.sum(axis=1)
        rho[~valid] = 0.0
        cnt = np.bincount(block.seg_ids[valid], minlength=block.n_prims)
        frac = cnt / np.maximum(block.sizes, 1)
        active = (frac >= st.min_valid_fraction) & (cnt > 0)
        # a primitive counts as valid if active in at least one pairing
        valid_fracs[ref_idx] = np.maximum(valid_fracs[ref_idx], frac)
        n_active = int(active.sum())
        if n_active == 0:
            continue
        any_active = True
        seg_sums = np.bincount(block.seg_ids, weights=rho, minlength=block.n_prims)
        res = np.where(active, seg_sums / np.maximum(cnt, 1), 0.0)
        norm = 1.0 / n_active if st.normalize_primitives else 1.0
        cost += norm * res[active].sum()
        if not with_grad:
            continue
        w_pix = np.where(valid, active[block.seg_ids] * norm
                         / np.maximum(cnt, 1)[block.seg_ids], 0.0)
        # d rho / d uv_t, folded with per-pixel weights (image moves with
        # -warp: d diff = -dI)
        gu = -np.einsum("ij,ij->i", drho, du) * w_pix
        gv = -np.einsum("ij,ij->i", drho, dv) * w_pix
        g_xt = np.stack([gu * intr_t.fu / zs,
                         gv * intr_t.fv / zs,
                         -(gu * intr_t.fu * xt[:, 0] + gv * intr_t.fv * xt[:, 1])
                         / (zs * zs)], axis=1)
        g_xt[~valid] = 0.0
        g_y = g_xt @ t_t.R.T
        gt_trans = g_y.sum(axis=0)
        gt_rot = np.cross(y, g_y).sum(axis=0)
        if not problem.pose_fixed[ref.pose_id]:
            g_poses[ref.pose_id, :3] += gt_trans
            g_poses[ref.pose_id, 3:] += gt_rot
        if not problem.pose_fixed[tgt.pose_id]:
            g_poses[tgt.pose_id, :3] -= gt_trans
            g_poses[tgt.pose_id, 3:] -= gt_rot
        if ref.scales_free:
            s_pix = np.einsum("ij,ij->i", g_y, x_r @ t_r.R.T)
            g_scales[ref_idx] += np.bincount(block.seg_ids, weights=s_pix,
                                             minlength=block.n_prims)
    if not any_active:
        raise DegenerateProblemError(f"no active primitive at pyramid level {level}")
    # quadratic pull of free log-scales toward their initial values
    w = st.scale_penalty
    if w > 0:
        for ref_idx, ref in enumerate(problem.refs):
            if not ref.scales_free:
                continue
            delta = scales[ref_idx] - ref.log_scales
            cost += w * float(delta @ delta)
            if with_grad:
                g_scales[ref_idx] += 2 * w * delta
    if not np.isfinite(cost):
        raise NonFiniteCostError(f"non-finite cost at level {level}")
    return cost, g_scales, g_poses, valid_fracs


def photometric_cost(problem: AlignmentProblem, level: int = 0,
                     poses: list[Pose] | None = None,
                     scales: list[np.ndarray] | None = None) -> float:
    """Aggregated photometric cost (plus scale penalty) at the given state."""
    problem.prepare()
    poses = poses if poses is not None else problem.poses
    scales = scales if scales is not None else [r.log_scales.copy() for r in problem.refs]
    cost, _, _, _ = _evaluate(problem, level, poses, scales, with_grad=False)
    return cost


def cost_gradients(problem: AlignmentProblem, level: int = 0,
                   poses: list[Pose] | None = None,
                   scales: list[np.ndarray] | None = None):
    """Analytic gradients w.r.t. free log-scales and pose increments."""
    problem.prepare()
    poses = poses if poses is not None else problem.poses
    scales = scales if scales is not None else [r.log_scales.copy() for r in problem.refs]
    cost, g_s, g_p, _ = _evaluate(problem, level, poses, scales, with_grad=True)
    return cost, g_s, g_p


def optimize(problem: AlignmentProblem) -> AlignmentResult:
    """Joint minimization over log-scales and poses, coarse to fine.

    Adam with per-block moments; pose steps are applied by retraction
    (left increment) and the moments live in the drifting tangent frame.
    The finest level tracks the best-seen state, so the returned cost never
    exceeds the cost at initialization.
    """
    problem.prepare()
    st = problem.settings
    poses = [p.copy() for p in problem.poses]
    scales = [r.log_scales.copy() for r in problem.refs]
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    # seed the best-seen state with the initialization so the returned cost
    # can never exceed the cost at init (fixed-point at a perfect start)
    cost0, _, _, fracs0 = _evaluate(problem, 0, poses, scales, False)
    history = [cost0]
    best = (cost0, [s.copy() for s in scales], [p.copy() for p in poses], fracs0)
    for level in range(st.levels - 1, -1, -1):
        m_s = [np.zeros_like(s) for s in scales]
        v_s = [np.zeros_like(s) for s in scales]
        m_p = np.zeros((len(poses), 6))
        v_p = np.zeros((len(poses), 6))
        for it in range(st.iterations):
            cost, g_s, g_p, fracs = _evaluate(problem, level, poses, scales, True)
            if level == 0:
                history.append(cost)
                if best is None or cost < best[0]:
                    best = (cost, [s.copy() for s in scales],
                            [p.copy() for p in poses], fracs)
            k = it + 1
            decay = st.lr_decay ** (it / max(st.iterations - 1, 1))
            for i, ref in enumerate(problem.refs):
                if not ref.scales_free:
                    continue
                m_s[i] = beta1 * m_s[i] + (1 - beta1) * g_s[i]
                v_s[i] = beta2 * v_s[i] + (1 - beta2) * g_s[i] ** 2
                mh = m_s[i] / (1 - beta1**k)
                vh = v_s[i] / (1 - beta2**k)
                scales[i] -= decay * st.lr_scale * mh / (np.sqrt(vh) + adam_eps)
            m_p = beta1 * m_p + (1 - beta1) * g_p
            v_p = beta2 * v_p + (1 - beta2) * g_p**2
            mh = m_p / (1 - beta1**k)
            vh = v_p / (1 - beta2**k)
            step = decay * st.lr_pose * mh / (np.sqrt(vh) + adam_eps)
            for j in range(len(poses)):
                if not problem.pose_fixed[j]:
                    poses[j] = retract(poses[j], -step[j])
    # final state of the finest level
    cost, _, _, fracs = _evaluate(problem, 0, poses, scales, True)
    history.append(cost)
    if best is None or cost < best[0]:
        best = (cost, [s.copy() for s in scales], [p.copy() for p in poses], fracs)
    best_cost, best_scales, best_poses, best_fracs = best
    running = np.minimum.accumulate(history)
    return AlignmentResult(log_scales=best_scales, poses=best_poses,
                           final_cost=float(best_cost),
                           valid_fractions=best_fracs,
                           cost_history=list(running))


def two_view_sfm(ref_bundle, prims: list[Primitive], target_bundles,
                 settings: AlignmentSettings | None = None) -> AlignmentResult:
    """Few-view structure-from-motion with a mirrored-translation restart.

    Small-baseline photometric alignment has a well-known second basin with
    the translation direction flipped; after the first solve we re-optimize
    from the mirrored translation (scales reset) and keep whichever converged
    lower.
    """
    settings = settings or AlignmentSettings(iterations=400, levels=4)
    res = optimize(make_two_view_problem(ref_bundle, prims, target_bundles,
                                         settings))
    mirrored = [Pose(p.R, -p.t) for p in res.poses[1:]]
    alt = optimize(make_two_view_problem(ref_bundle, prims, target_bundles,
                                         settings, init_poses=mirrored))
    return alt if alt.final_cost < res.final_cost else res


def make_two_view_problem(ref_bundle, prims: list[Primitive], target_bundles,
                          settings: AlignmentSettings | None = None,
                          init_poses: list[Pose] | None = None,
                          init_log_scales: np.ndarray | None = None
                          ) -> AlignmentProblem:
    """SfM problem: fixed reference at identity, free targets, free scales.

    Scales start at 0 (unit scale) and target poses at identity unless
    overridden; this is the few-view initialization policy.
    """
    settings = settings or AlignmentSettings()
    n_t = len(target_bundles)
    poses = [Pose.identity()]
    fixed = [True]
    targets = []
    for i, tb in enumerate(target_bundles):
        img = tb.image if hasattr(tb, "image") else tb
        intr = tb.intr if hasattr(tb, "intr") else ref_bundle.intr
        init = init_poses[i] if init_poses else Pose.identity()
        poses.append(init.copy())
        fixed.append(False)
        targets.append(TargetView(image=img, intr=intr, pose_id=1 + i))
    scales0 = (np.asarray(init_log_scales, dtype=np.float64).copy()
               if init_log_scales is not None else np.zeros(len(prims)))
    ref = RefView(prims=prims, image=ref_bundle.image, intr=ref_bundle.intr,
                  pose_id=0, log_scales=scales0, scales_free=True)
    return AlignmentProblem(poses=poses, pose_fixed=fixed, refs=[ref],
                            targets=targets,
                            pairs=[(0, i) for i in range(n_t)],
                            settings=settings)
