"""Spatial types, pose conventions, rigid transforms and voxel union.

Camera frame convention: +Z forward (optical axis), +X right, +Y down.
A pose is a point on a sphere around the object origin; yaw rotates about
world +Z and pitch about the camera's horizontal axis.  At yaw = pitch = 0
the camera sits on the world -X axis looking toward +X.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

YAW_TICKS = 4096
PITCH_TICKS = 2048
DEFAULT_ORBIT_RADIUS = 0.2
DEFAULT_VOXEL = 0.001


@dataclass(frozen=True)
class PointCloud:
    """An unordered set of 3D points (meters), stored as an ``(n, 3)`` array."""

    points: np.ndarray
    source_view: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls, source_view: Optional[int] = None) -> "PointCloud":
        return cls(np.zeros((0, 3)), source_view)


@dataclass(frozen=True)
class ViewPose:
    yaw_ticks: int
    pitch_ticks: int
    yaw_bucket: int
    pitch_bucket: int

    @classmethod
    def from_ticks(cls, yaw_ticks: int, pitch_ticks: int,
                   yaw_buckets: int = 20, pitch_buckets: int = 10) -> "ViewPose":
        if not (0 <= yaw_ticks < YAW_TICKS and 0 <= pitch_ticks < PITCH_TICKS):
            raise ValueError(f"ticks out of range: yaw={yaw_ticks}, pitch={pitch_ticks}")
        return cls(
            int(yaw_ticks),
            int(pitch_ticks),
            yaw_ticks * yaw_buckets // YAW_TICKS,
            pitch_ticks * pitch_buckets // PITCH_TICKS,
        )

    @classmethod
    def bucket_center(cls, yaw_bucket: int, pitch_bucket: int,
                      yaw_buckets: int = 20, pitch_buckets: int = 10) -> "ViewPose":
        """Pose at the center tick of a bucket cell."""
        if not (0 <= yaw_bucket < yaw_buckets and 0 <= pitch_bucket < pitch_buckets):
            raise ValueError(f"bucket out of range: ({yaw_bucket}, {pitch_bucket})")
        yaw_ticks = ((2 * yaw_bucket + 1) * YAW_TICKS) // (2 * yaw_buckets)
        pitch_ticks = ((2 * pitch_bucket + 1) * PITCH_TICKS) // (2 * pitch_buckets)
        return cls.from_ticks(yaw_ticks, pitch_ticks, yaw_buckets, pitch_buckets)

    @property
    def yaw_angle(self) -> float:
        return 2.0 * math.pi * self.yaw_ticks / YAW_TICKS

    @property
    def pitch_angle(self) -> float:
        return math.pi * self.pitch_ticks / PITCH_TICKS - math.pi / 2.0

    def view_direction(self) -> np.ndarray:
        """Unit vector from the object origin toward the camera."""
        cy, sy = math.cos(self.yaw_angle), math.sin(self.yaw_angle)
        cp, sp = math.cos(self.pitch_angle), math.sin(self.pitch_angle)
        return np.array([-cp * cy, -cp * sy, sp])


@dataclass(frozen=True)
class RigidTransform:
    """``p' = rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        """Composition: ``(self @ other)(p) == self(other(p))``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def rotation_angle(self) -> float:
        """Angle (radians) of the rotation part."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(math.acos(min(1.0, max(-1.0, c))))


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


# camera axes (x right, y down, z forward) expressed in world coordinates at yaw = pitch = 0
_CAMERA_BASE = np.array([[0.0, 0.0, 1.0],
                         [-1.0, 0.0, 0.0],
                         [0.0, -1.0, 0.0]])


def pose_to_transform(pose: ViewPose, orbit_radius: float = DEFAULT_ORBIT_RADIUS) -> RigidTransform:
    """Camera-to-world transform for a sensor orbiting the origin."""
    if orbit_radius <= 0:
        raise ValueError("orbit_radius must be positive")
    orient = rotation_z(pose.yaw_angle) @ rotation_y(pose.pitch_angle)
    rotation = orient @ _CAMERA_BASE
    translation = orient @ np.array([-orbit_radius, 0.0, 0.0])
    return RigidTransform(rotation, translation)


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    return PointCloud(t.apply(cloud.points), cloud.source_view)


def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    return np.floor(np.asarray(points) / voxel).astype(np.int64)


def dedup_points(points: np.ndarray, voxel: float) -> np.ndarray:
    """Keep the first point in each occupied voxel, preserving input order."""
    if voxel <= 0:
        raise ValueError("voxel must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return points.copy()
    keys = voxel_keys(points, voxel)
    keys -= keys.min(axis=0)
    span = keys.max(axis=0) + 1
    flat = (keys[:, 0] * span[1] + keys[:, 1]) * span[2] + keys[:, 2]
    _, first = np.unique(flat, return_index=True)
    first.sort()
    return points[first]


def union_dedup(a: PointCloud, b: PointCloud, voxel: float = DEFAULT_VOXEL) -> PointCloud:
    """Concatenate ``a`` then ``b`` keeping one point per voxel cell (first wins)."""
    merged = np.concatenate([a.points, b.points], axis=0)
    return PointCloud(dedup_points(merged, voxel))


def occupied_voxels(cloud: PointCloud, voxel: float) -> set:
    return {tuple(k) for k in voxel_keys(cloud.points, voxel)}


# ---------------------------------------------------------------- file formats

def write_ply(path, cloud: PointCloud) -> None:
    pts = cloud.points
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property float x", "property float y", "property float z", "end_header"]
    lines.extend(f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts)
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path, source_view: Optional[int] = None) -> PointCloud:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        count = None
        for line in fh:
            line = line.strip()
            if line.startswith("format") and "ascii" not in line:
                raise ValueError(f"{path}: only ASCII PLY is supported")
            if line.startswith("element vertex"):
                count = int(line.split()[2])
            if line == "end_header":
                break
        if count is None:
            raise ValueError(f"{path}: missing vertex element")
        if count == 0:
            return PointCloud.empty(source_view)
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2, max_rows=count)
    if data.shape[0] != count:
        raise ValueError(f"{path}: expected {count} vertices, found {data.shape[0]}")
    return PointCloud(data[:, :3], source_view)


POSE_CSV_HEADER = ["view_id", "yaw_ticks", "pitch_ticks", "yaw_bucket", "pitch_bucket"]


def write_pose_csv(path, poses: Sequence[tuple[int, ViewPose]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(POSE_CSV_HEADER)
        for view_id, p in poses:
            writer.writerow([view_id, p.yaw_ticks, p.pitch_ticks, p.yaw_bucket, p.pitch_bucket])


def read_pose_csv(path) -> dict[int, ViewPose]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[int(row["view_id"])] = ViewPose(int(row["yaw_ticks"]), int(row["pitch_ticks"]),
                                                int(row["yaw_bucket"]), int(row["pitch_bucket"]))
    return out


def angular_difference(a: ViewPose, b: ViewPose) -> float:
    """Angle in degrees between the viewing directions of two poses."""
    c = float(np.dot(a.view_direction(), b.view_direction()))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def concat(clouds: Iterable[PointCloud]) -> PointCloud:
    arrays = [c.points for c in clouds]
    return PointCloud(np.concatenate(arrays, axis=0) if arrays else np.zeros((0, 3)))
