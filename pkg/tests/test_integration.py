import time

import numpy as np
import pytest

from segvo.geometry import Intrinsics, Pose
from segvo.integration import (Primitive, assemble, flatten_constant_depth,
                               flatten_constant_normal, integrate_batch,
                               integrate_bundle)
from segvo.segments import Segment
from segvo.synth import SceneSpec, SphereSurface, default_intrinsics, synth_scene

INTR = Intrinsics(144.0, 144.0, 79.5, 59.5, 160, 120)


def square_segment(size, u0=40, v0=30, width=160, height=120):
    us, vs = np.meshgrid(np.arange(u0, u0 + size), np.arange(v0, v0 + size))
    anchor = (u0 + size // 2, v0 + size // 2)
    return Segment(us.ravel(), vs.ravel(), anchor, width, height)


def plane_normal_map(normal, h=120, w=160):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    normals = np.zeros((h, w, 3))
    normals[:] = n
    return normals


def plane_log_depth(seg, normal, intr, d0=2.0):
    """Analytic log-depth of the plane n.x = -c seen through intr.

    For a plane with unit normal n and point p0 = (0, 0, d0) on it, depth
    along pixel ray r(u,v) is  (n . p0) / (n . r).
    """
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    rays = np.stack([(seg.us - intr.cu) / intr.fu,
                     (seg.vs - intr.cv) / intr.fv,
                     np.ones(seg.area)], axis=1)
    depth = (n @ [0, 0, d0]) / (rays @ n)
    zt = np.log(depth)
    return zt - zt[seg.anchor_index]


# ---------------------------------------------------------------- exactness

def test_fronto_parallel_plane_is_flat():
    seg = square_segment(64)
    normals = plane_normal_map([0, 0, -1.0])
    [p] = integrate_batch([(seg, normals)], INTR)
    assert np.abs(p.log_udepth).max() < 1e-8
    assert p.converged


def test_slanted_plane_matches_analytic():
    seg = square_segment(64)
    normal = [np.sin(np.radians(30)), 0.0, -np.cos(np.radians(30))]
    normals = plane_normal_map(normal)
    [p] = integrate_batch([(seg, normals)], INTR)
    want = plane_log_depth(seg, normal, INTR)
    assert np.abs(p.log_udepth - want).max() < 1e-3


def test_analytic_solution_near_zero_residual():
    # the discretization itself is second-order: plugging in the analytic
    # log-depth leaves a tiny per-equation residual
    seg = square_segment(32)
    normal = [np.sin(np.radians(30)), 0.0, -np.cos(np.radians(30))]
    system = assemble(seg, plane_normal_map(normal), INTR)
    want = plane_log_depth(seg, normal, INTR)
    assert np.abs(system.residual(want)).max() < 1e-6


def test_sphere_cap_rmse():
    sphere = SphereSurface(center=[0.0, 0.0, 3.0], radius=1.0)
    intr = default_intrinsics(160, 120)
    spec = SceneSpec(surfaces=[sphere], trajectory=[Pose.identity()],
                     intr=intr, segment_grid=None)
    b = synth_scene(spec, rng_seed=0)[0]
    # central 64x64 cap of the sphere
    mask = (b.gt_depth > 0)
    mask[:28] = mask[92:] = False
    mask[:, :48] = mask[:, 112:] = False
    seg = Segment.from_mask(mask, anchor=(80, 60))
    [p] = integrate_batch([(seg, b.normals.astype(np.float64))], intr)
    want = np.log(b.gt_depth[seg.vs, seg.us].astype(np.float64))
    want -= want[seg.anchor_index]
    rmse = np.sqrt(np.mean((p.log_udepth - want) ** 2))
    assert rmse < 1e-2


# --------------------------------------------------------------- equivalence

def random_segments_and_normals(rng, n, max_px=400):
    out = []
    for _ in range(n):
        size = int(rng.integers(4, int(np.sqrt(max_px))))
        u0 = int(rng.integers(0, INTR.width - size))
        v0 = int(rng.integers(0, INTR.height - size))
        seg = square_segment(size, u0, v0)
        n_dir = rng.normal(size=3)
        n_dir[2] = -abs(n_dir[2]) - 1.0
        out.append((seg, plane_normal_map(n_dir)))
    return out


def test_batched_equals_independent_equals_dense():
    rng = np.random.default_rng(0)
    pairs = random_segments_and_normals(rng, 100)
    batched = integrate_batch(pairs, INTR)
    for (seg, normals), p in zip(pairs, batched):
        [solo] = integrate_batch([(seg, normals)], INTR)
        assert np.abs(p.log_udepth - solo.log_udepth).max() < 1e-6
        # dense direct solve with the anchor pinned (removes the gauge)
        system = assemble(seg, normals, INTR)
        A = system.A.toarray()
        n_pix = seg.area
        pin = np.zeros((1, n_pix))
        pin[0, seg.anchor_index] = 1.0
        Afull = np.vstack([A, pin])
        bfull = np.concatenate([system.b, [0.0]])
        dense, *_ = np.linalg.lstsq(Afull, bfull, rcond=None)
        dense -= dense[seg.anchor_index]
        assert np.abs(p.log_udepth - dense).max() < 1e-6


def test_batch_runtime_200_segments():
    rng = np.random.default_rng(1)
    pairs = []
    for _ in range(200):
        u0 = int(rng.integers(0, INTR.width - 32))
        v0 = int(rng.integers(0, INTR.height - 32))
        seg = square_segment(32, u0, v0)  # ~1000 px each
        n_dir = rng.normal(size=3)
        n_dir[2] = -abs(n_dir[2]) - 1.0
        pairs.append((seg, plane_normal_map(n_dir)))
    t0 = time.time()
    prims = integrate_batch(pairs, INTR)
    elapsed = time.time() - t0
    assert len(prims) == 200
    assert elapsed < 2.0, f"batched solve took {elapsed:.2f}s"


# ----------------------------------------------------------------- Primitive

def test_primitive_anchor_gauge():
    seg = square_segment(4)
    p = Primitive(seg, np.linspace(1.0, 2.0, seg.area))
    assert p.log_udepth[seg.anchor_index] == 0.0


def test_primitive_length_mismatch():
    seg = square_segment(4)
    with pytest.raises(ValueError):
        Primitive(seg, np.zeros(seg.area + 1))


def test_single_pixel_segment():
    seg = Segment(us=[5], vs=[5], anchor=(5, 5), width=160, height=120)
    [p] = integrate_batch([(seg, plane_normal_map([0, 0, -1.0]))], INTR)
    assert p.log_udepth.shape == (1,)
    assert p.log_udepth[0] == 0.0


# ----------------------------------------------------------------- ablations

def test_constant_depth_ablation():
    seg = square_segment(16)
    p = flatten_constant_depth(Primitive(seg, np.linspace(0, 1, seg.area)))
    assert np.all(p.log_udepth == 0.0)


def test_constant_normal_matches_full_on_plane():
    # on a uniform-normal plane, averaging the normals changes nothing
    seg = square_segment(16)
    normal = [0.3, -0.1, -1.0]
    normals = plane_normal_map(normal)
    full = integrate_batch([(seg, normals)], INTR)[0]
    flat = flatten_constant_normal(seg, normals, INTR)
    assert np.abs(full.log_udepth - flat.log_udepth).max() < 1e-8
    assert not flat.constant_normal_fallback


def test_constant_normal_differs_on_sphere():
    sphere = SphereSurface(center=[0.0, 0.0, 3.0], radius=1.0)
    intr = default_intrinsics(160, 120)
    spec = SceneSpec(surfaces=[sphere], trajectory=[Pose.identity()],
                     intr=intr, segment_grid=None)
    b = synth_scene(spec, rng_seed=0)[0]
    mask = b.gt_depth > 0
    mask[:40] = mask[80:] = False
    mask[:, :60] = mask[:, 100:] = False
    seg = Segment.from_mask(mask, anchor=(80, 60))
    normals = b.normals.astype(np.float64)
    full = integrate_batch([(seg, normals)], intr)[0]
    flat = flatten_constant_normal(seg, normals, intr)
    want = np.log(b.gt_depth[seg.vs, seg.us].astype(np.float64))
    want -= want[seg.anchor_index]
    err_full = np.abs(full.log_udepth - want).max()
    err_flat = np.abs(flat.log_udepth - want).max()
    assert err_full < err_flat  # curvature is lost by averaging


def test_integrate_bundle_modes():
    sphere = SphereSurface(center=[0.0, 0.0, 3.0], radius=1.0)
    intr = default_intrinsics(80, 60)
    spec = SceneSpec(surfaces=[sphere], trajectory=[Pose.identity()],
                     intr=intr, segment_grid=20, min_segment_area=32)
    b = synth_scene(spec, rng_seed=0)[0]
    full = integrate_bundle(b, mode="full")
    flat = integrate_bundle(b, mode="const-depth")
    assert len(full) == len(flat) == len(b.segments)
    assert all(np.all(p.log_udepth == 0) for p in flat)
    with pytest.raises(ValueError):
        integrate_bundle(b, mode="bogus")


def test_runtime_single_segment_under_1s():
    seg = square_segment(64)
    normals = plane_normal_map([0.4, 0.2, -1.0])
    t0 = time.time()
    integrate_batch([(seg, normals)], INTR)
    assert time.time() - t0 < 1.0
