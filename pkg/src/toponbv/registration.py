"""Transform / union / registration of depth views.

``icp_align`` is classic point-to-point ICP with an SVD (Kabsch) fit.  The
error it tracks caps every residual at the correspondence gate.  With that
cap the Kabsch step and the re-matching step can each only lower the error,
so it never increases from one iteration to the next.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (DEFAULT_ORBIT_RADIUS, DEFAULT_VOXEL, PointCloud, RigidTransform,
                       ViewPose, dedup_points, pose_to_transform)


class NoCorrespondencesError(RuntimeError):
    pass


class IcpFallbackWarning(RuntimeWarning):
    """ICP found no correspondences; the union used the pose transform alone."""


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 30
    convergence_delta: float = 1e-5
    max_correspondence_dist: float = 0.01
    subsample_count: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_delta <= 0 or self.max_correspondence_dist <= 0:
            raise ValueError("ICP distances must be positive")
        if self.subsample_count < 3:
            raise ValueError("subsample_count must be >= 3")

    def to_dict(self) -> dict:
        return {"max_iterations": self.max_iterations, "convergence_delta": self.convergence_delta,
                "max_correspondence_dist": self.max_correspondence_dist,
                "subsample_count": self.subsample_count, "seed": self.seed}


@dataclass
class IcpResult:
    transform: RigidTransform
    rmse: float
    errors: list = field(default_factory=list)   # truncated RMS error per iteration, starting value first

    @property
    def iterations(self) -> int:
        return len(self.errors) - 1

    def __iter__(self):
        return iter((self.transform, self.rmse))


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation mapping ``src`` onto ``dst``."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, cd - rot @ cs


def icp_align(source, target, params: IcpParams = IcpParams(),
              target_tree: Optional[cKDTree] = None) -> IcpResult:
    """Rigid transform taking ``source`` onto ``target``."""
    src = source.points if isinstance(source, PointCloud) else np.asarray(source, dtype=np.float64)
    tgt = target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=np.float64)
    if len(src) == 0 or len(tgt) == 0:
        raise ValueError("ICP needs non-empty source and target clouds")
    if len(src) > params.subsample_count:
        rng = np.random.default_rng(params.seed)
        src = src[np.sort(rng.choice(len(src), params.subsample_count, replace=False))]
    tree = target_tree if target_tree is not None else cKDTree(tgt)
    gate = params.max_correspondence_dist
    gate2 = gate * gate

    def match(pts):
        dist, idx = tree.query(pts, distance_upper_bound=gate)
        inl = np.isfinite(dist)
        trunc = math.sqrt(float(np.mean(np.minimum(np.where(inl, dist, gate) ** 2, gate2))))
        return dist, idx, inl, trunc

    rot, trans = np.eye(3), np.zeros(3)
    cur = src
    dist, idx, inl, err = match(cur)
    if not inl.any():
        raise NoCorrespondencesError(f"no correspondences within {gate} m")
    errors = [err]
    for _ in range(params.max_iterations):
        if inl.sum() < 3:
            break
        r_step, t_step = kabsch(cur[inl], tgt[idx[inl]])
        cur = cur @ r_step.T + t_step
        rot, trans = r_step @ rot, r_step @ trans + t_step
        dist, idx, inl, err = match(cur)
        errors.append(err)
        if abs(errors[-2] - err) < params.convergence_delta:
            break
    # re-orthonormalize the accumulated product
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    rmse = float(np.sqrt(np.mean(dist[inl] ** 2))) if inl.any() else float("inf")
    return IcpResult(RigidTransform(rot, trans), rmse, errors)


def register_and_union(merged: np.ndarray, world: np.ndarray, icp: Optional[IcpParams],
                       voxel: float, merged_tree: Optional[cKDTree] = None,
                       fallback: bool = True) -> np.ndarray:
    """One TUR step: refine ``world`` against ``merged`` with ICP, then union."""
    if len(merged) == 0:
        return dedup_points(world, voxel)
    if icp is not None and len(world):
        try:
            res = icp_align(world, merged, icp, target_tree=merged_tree)
            world = res.transform.apply(world)
        except NoCorrespondencesError as exc:
            if not fallback:
                raise
            warnings.warn(f"{exc}; using the pose transform only", IcpFallbackWarning, stacklevel=2)
    return dedup_points(np.concatenate([merged, world]), voxel)


def tur_merge(views: Sequence[tuple[PointCloud, ViewPose]],
              orbit_radius: float = DEFAULT_ORBIT_RADIUS,
              icp: Optional[IcpParams] = IcpParams(),
              voxel: float = DEFAULT_VOXEL, fallback: bool = True) -> PointCloud:
    """Merge camera-frame views into one world-frame cloud.

    Views are processed in order; every view after the first is refined by
    ICP against everything merged so far.  With ``fallback`` a failed ICP
    (no correspondences) degrades to a transform-only union.
    """
    if not views:
        raise ValueError("tur_merge needs at least one view")
    merged = np.zeros((0, 3))
    for cloud, pose in views:
        world = pose_to_transform(pose, orbit_radius).apply(cloud.points)
        merged = register_and_union(merged, world, icp, voxel, fallback=fallback)
    return PointCloud(merged)
