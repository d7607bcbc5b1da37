"""Timestamped camera trajectories in TUM format.

A TUM line is `timestamp tx ty tz qx qy qz qw` (camera-to-world).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Pose


def pose_to_tum_line(timestamp: float, pose: Pose) -> str:
    q = Rotation.from_matrix(pose.R).as_quat()  # x, y, z, w
    vals = [timestamp, *pose.t, *q]
    return " ".join(f"{v:.9f}" for v in vals)


def pose_from_tum_line(line: str) -> tuple[float, Pose]:
    tok = line.split()
    if len(tok) != 8:
        raise ValueError(f"expected 8 fields in TUM line, got {len(tok)}: {line!r}")
    ts = float(tok[0])
    t = np.array([float(x) for x in tok[1:4]])
    q = np.array([float(x) for x in tok[4:8]])
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion in TUM line")
    R = Rotation.from_quat(q / n).as_matrix()
    return ts, Pose(R, t)


@dataclass
class Trajectory:
    """Ordered timestamped poses, strictly increasing timestamps."""

    timestamps: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps/poses length mismatch")
        if len(self.poses) == 0:
            raise ValueError("empty trajectory")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses])

    def save(self, path) -> None:
        with open(path, "w") as f:
            for ts, p in zip(self.timestamps, self.poses):
                f.write(pose_to_tum_line(ts, p) + "\n")

    @staticmethod
    def load(path) -> "Trajectory":
        ts, poses = [], []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                t, p = pose_from_tum_line(line)
                ts.append(t)
                poses.append(p)
        return Trajectory(np.array(ts), poses)
