"""segvo: segment-based monocular geometry.

Connected image segments with known surface normals are integrated into
per-segment depth maps (each up to one scalar), then jointly scaled and posed
by direct photometric alignment — yielding few-view structure from motion,
sparse depth completion, and keyframe visual odometry on top of the same
machinery.
"""
from .alignment import (AlignmentProblem, AlignmentResult, AlignmentSettings,
                        DegenerateProblemError, NonFiniteCostError, RefView,
                        ScaledPrimitive, TargetView, make_two_view_problem,
                        optimize, photometric_cost, two_view_sfm)
from .bundle import BundleFormatError, FrameBundle, load_bundle, save_bundle
from .completion import (CompletionError, DepthMap, Provenance, SparseDepth,
                         complete, fit_scale, fuse, render_depth)
from .evaluation import (DepthErrorReport, MetricError, Sim3, align_sim3,
                         ate_rmse, depth_metrics, median_scale)
from .geometry import (Intrinsics, PointCloud, Pose, load_ply, project,
                       save_ply, unproject)
from .integration import Primitive, integrate_batch, integrate_bundle
from .odometry import (Keyframe, VOConfig, VOResult, WindowState, initialize,
                       map_window, run_vo, spawn_keyframe, track)
from .segments import Segment, sample_queries, select_masks, split_connected
from .synth import SceneSpec, synth_scene
from .trajectory import Trajectory

__version__ = "0.1.0"
