"""Synthetic objects and a simulated noisy depth sensor.

Objects are closed triangle meshes centered at the origin.  ``capture_view``
ray casts one ray per pixel, perturbs hits along the ray, and punches holes
the way a stereo depth camera does: random pixel dropout plus elliptical
patches on surfaces seen at grazing incidence.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from .geometry import (DEFAULT_ORBIT_RADIUS, PointCloud, RigidTransform, ViewPose,
                       pose_to_transform, rotation_y, rotation_z, write_ply, write_pose_csv)

log = logging.getLogger(__name__)

MAX_EXTENT = 0.15
GRAZING_DEG = 75.0


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray    # (V, 3) float64
    triangles: np.ndarray   # (T, 3) int64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidParameterError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def extent(self) -> float:
        return float((self.vertices.max(axis=0) - self.vertices.min(axis=0)).max())

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two triangles."""
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def transformed(self, rotation: np.ndarray, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices @ np.asarray(rotation).T + np.asarray(offset), self.triangles)


@dataclass(frozen=True)
class SensorModel:
    image_width: int = 160
    image_height: int = 120
    horizontal_fov: float = math.radians(65.0)
    depth_noise_sigma: float = 0.0003
    dropout_probability: float = 0.05
    max_range: float = 2.0

    def __post_init__(self):
        if not (0 < self.horizontal_fov < math.pi):
            raise InvalidParameterError("horizontal_fov must lie in (0, pi)")
        if not (0.0 <= self.dropout_probability <= 1.0):
            raise InvalidParameterError("dropout_probability must lie in [0, 1]")
        if self.depth_noise_sigma < 0 or self.max_range <= 0:
            raise InvalidParameterError("noise sigma must be >= 0 and max_range > 0")
        if self.image_width < 1 or self.image_height < 1:
            raise InvalidParameterError("image dimensions must be positive")

    @property
    def focal(self) -> float:
        return (self.image_width / 2.0) / math.tan(self.horizontal_fov / 2.0)

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) unnormalized ray directions with unit z."""
        f = self.focal
        u = (np.arange(self.image_width) + 0.5 - self.image_width / 2.0) / f
        v = (np.arange(self.image_height) + 0.5 - self.image_height / 2.0) / f
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv, np.ones_like(uu)], axis=-1)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ objects

def _center(mesh: TriangleMesh) -> TriangleMesh:
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    return TriangleMesh(mesh.vertices - (lo + hi) / 2.0, mesh.triangles)


def _torus(major: float, minor: float, segments: int = 48, rings: int = 16) -> TriangleMesh:
    if major <= 0 or minor <= 0:
        raise InvalidParameterError("torus radii must be positive")
    if minor >= major:
        raise InvalidParameterError("torus minor radius must be smaller than the major radius")
    u = 2 * np.pi * np.arange(segments) / segments
    v = 2 * np.pi * np.arange(rings) / rings
    uu, vv = np.meshgrid(u, v, indexing="ij")
    verts = np.stack([(major + minor * np.cos(vv)) * np.cos(uu),
                      (major + minor * np.cos(vv)) * np.sin(uu),
                      minor * np.sin(vv)], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(segments), np.arange(rings), indexing="ij")
    a = i * rings + j
    b = ((i + 1) % segments) * rings + j
    c = ((i + 1) % segments) * rings + (j + 1) % rings
    d = i * rings + (j + 1) % rings
    tris = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3),
                           np.stack([a, c, d], -1).reshape(-1, 3)])
    return TriangleMesh(verts, tris)


def _box(w: float, h: float, d: float) -> TriangleMesh:
    if min(w, h, d) <= 0:
        raise InvalidParameterError("box dimensions must be positive")
    x, y, z = w / 2, h / 2, d / 2
    verts = np.array([[-x, -y, -z], [x, -y, -z], [x, y, -z], [-x, y, -z],
                      [-x, -y, z], [x, -y, z], [x, y, z], [-x, y, z]])
    tris = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
                     [0, 1, 5], [0, 5, 4], [1, 2, 6], [1, 6, 5],
                     [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])
    return TriangleMesh(verts, tris)


def _extrude(points2d: np.ndarray, tris2d: np.ndarray, thickness: float) -> TriangleMesh:
    """Closed slab from a CCW planar triangulation: top, bottom and boundary walls."""
    n = len(points2d)
    top = np.column_stack([points2d, np.full(n, thickness / 2)])
    bottom = np.column_stack([points2d, np.full(n, -thickness / 2)])
    directed = np.concatenate([tris2d[:, [0, 1]], tris2d[:, [1, 2]], tris2d[:, [2, 0]]])
    undirected = np.sort(directed, axis=1)
    _, inv, counts = np.unique(undirected, axis=0, return_inverse=True, return_counts=True)
    boundary = directed[counts[inv.ravel()] == 1]
    walls = []
    for a, b in boundary:
        walls.append([a, b + n, b])
        walls.append([a, a + n, b + n])
    tris = np.concatenate([tris2d, tris2d[:, ::-1] + n, np.array(walls, dtype=np.int64).reshape(-1, 3)])
    return TriangleMesh(np.concatenate([top, bottom]), tris)


def _plate_with_holes(cell: float, k: int, hole_radius: float, thickness: float,
                      ring_points: int = 32) -> TriangleMesh:
    """A 1 x k strip of square cells, each pierced by a centered circular hole."""
    if cell <= 0 or thickness <= 0 or hole_radius <= 0 or k < 1:
        raise InvalidParameterError("plate dimensions and hole count must be positive")
    if hole_radius >= cell / 2:
        raise InvalidParameterError("hole radius exceeds the plate cell size")
    if ring_points % 8:
        raise InvalidParameterError("ring_points must be a multiple of 8 so cell corners are sampled")
    theta = 2 * np.pi * np.arange(ring_points) / ring_points
    dirs = np.column_stack([np.cos(theta), np.sin(theta)])
    square = dirs * (cell / 2) / np.abs(dirs).max(axis=1, keepdims=True)
    key_to_index: dict = {}
    pts: list = []

    def vid(p):
        key = (round(p[0] * 1e9), round(p[1] * 1e9))
        if key not in key_to_index:
            key_to_index[key] = len(pts)
            pts.append(p)
        return key_to_index[key]

    tris = []
    for c in range(k):
        center = np.array([(c + 0.5 - k / 2) * cell, 0.0])
        outer = [vid(center + q) for q in square]
        inner = [vid(center + hole_radius * q) for q in dirs]
        for i in range(ring_points):
            j = (i + 1) % ring_points
            tris.append([outer[i], outer[j], inner[j]])
            tris.append([outer[i], inner[j], inner[i]])
    return _extrude(np.array(pts), np.array(tris, dtype=np.int64), thickness)


def _merge(meshes) -> TriangleMesh:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def _rotation_from_degrees(rx: float = 0.0, ry: float = 0.0, rz: float = 0.0) -> np.ndarray:
    c, s = math.cos(math.radians(rx)), math.sin(math.radians(rx))
    rot_x = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    return rotation_z(math.radians(rz)) @ rotation_y(math.radians(ry)) @ rot_x


def _two_torus(major: float, minor: float) -> TriangleMesh:
    """Two chain-linked tori: each passes through the other's hole."""
    ring = _torus(major, minor)
    a = ring.transformed(np.eye(3), [-major / 2, 0, 0])
    b = ring.transformed(_rotation_from_degrees(rx=90), [major / 2, 0, 0])
    return _merge([a, b])


DEFAULT_COMPOSITE = (
    {"kind": "box", "params": {"w": 0.06, "h": 0.022, "d": 0.014}, "offset": [0, 0, -0.015]},
    {"kind": "torus", "params": {"major": 0.016, "minor": 0.0045},
     "offset": [0.0, 0, 0.013], "rotation_deg": [90, 0, 0]},
    {"kind": "box", "params": {"w": 0.009, "h": 0.009, "d": 0.036}, "offset": [-0.025, 0, 0.01]},
)


def make_object(kind: str, **params) -> TriangleMesh:
    """Build a closed mesh of the given kind, centered at the origin.

    Kinds: ``torus`` (major, minor), ``plate_with_holes`` (cell, k, hole_radius,
    thickness), ``box`` (w, h, d), ``two_torus`` (major, minor) and
    ``composite`` (parts: list of {kind, params, offset, rotation_deg}).
    """
    for name, value in params.items():
        if isinstance(value, (int, float)) and not isinstance(value, bool) and value <= 0:
            raise InvalidParameterError(f"{kind}: parameter {name!r} must be positive")
    if kind == "torus":
        mesh = _torus(params.get("major", 0.03), params.get("minor", 0.008),
                      params.get("segments", 48), params.get("rings", 16))
    elif kind == "box":
        mesh = _box(params.get("w", 0.05), params.get("h", 0.05), params.get("d", 0.05))
    elif kind == "plate_with_holes":
        mesh = _plate_with_holes(params.get("cell", 0.025), int(params.get("k", 3)),
                                 params.get("hole_radius", 0.008), params.get("thickness", 0.006),
                                 params.get("ring_points", 32))
    elif kind == "two_torus":
        mesh = _two_torus(params.get("major", 0.022), params.get("minor", 0.005))
    elif kind == "composite":
        parts = params.get("parts", DEFAULT_COMPOSITE)
        if not parts:
            raise InvalidParameterError("composite needs at least one part")
        meshes = []
        for part in parts:
            sub = make_object(part["kind"], **part.get("params", {}))
            rot = _rotation_from_degrees(*part.get("rotation_deg", (0, 0, 0)))
            meshes.append(sub.transformed(rot, part.get("offset", (0, 0, 0))))
        mesh = _merge(meshes)
    else:
        raise InvalidParameterError(f"unknown object kind {kind!r}")
    mesh = _center(mesh)
    if mesh.extent() > MAX_EXTENT + 1e-12:
        raise InvalidParameterError(f"{kind}: extent {mesh.extent():.4f} m exceeds {MAX_EXTENT} m")
    if np.any(mesh.triangle_areas() <= 1e-12):
        raise InvalidParameterError(f"{kind}: degenerate triangles")
    return mesh


# ------------------------------------------------------------- ray casting

@numba.njit(cache=True)
def _raycast(verts, tris, width, height, focal, near):
    depth = np.full((height, width), np.inf)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    cx = width / 2.0
    cy = height / 2.0
    eps = 1e-10
    for t in range(tris.shape[0]):
        a = verts[tris[t, 0]]
        b = verts[tris[t, 1]]
        c = verts[tris[t, 2]]
        if a[2] > near and b[2] > near and c[2] > near:
            umin = 1e300
            umax = -1e300
            vmin = 1e300
            vmax = -1e300
            for p in (a, b, c):
                u = focal * p[0] / p[2] + cx
                v = focal * p[1] / p[2] + cy
                umin = min(umin, u)
                umax = max(umax, u)
                vmin = min(vmin, v)
                vmax = max(vmax, v)
            i0 = max(0, int(math.ceil(umin - 0.5 - 1e-9)))
            i1 = min(width - 1, int(math.floor(umax - 0.5 + 1e-9)))
            j0 = max(0, int(math.ceil(vmin - 0.5 - 1e-9)))
            j1 = min(height - 1, int(math.floor(vmax - 0.5 + 1e-9)))
        else:
            i0, i1, j0, j1 = 0, width - 1, 0, height - 1
        e1 = b - a
        e2 = c - a
        for j in range(j0, j1 + 1):
            dy = (j + 0.5 - cy) / focal
            for i in range(i0, i1 + 1):
                dx = (i + 0.5 - cx) / focal
                # Moller-Trumbore with origin at the camera center, direction (dx, dy, 1)
                px = dy * e2[2] - e2[1]
                py = e2[0] - dx * e2[2]
                pz = dx * e2[1] - dy * e2[0]
                det = e1[0] * px + e1[1] * py + e1[2] * pz
                if abs(det) < 1e-20:
                    continue
                inv = 1.0 / det
                tx = -a[0]
                ty = -a[1]
                tz = -a[2]
                u = (tx * px + ty * py + tz * pz) * inv
                if u < -eps or u > 1.0 + eps:
                    continue
                qx = ty * e1[2] - tz * e1[1]
                qy = tz * e1[0] - tx * e1[2]
                qz = tx * e1[1] - ty * e1[0]
                v = (dx * qx + dy * qy + qz) * inv
                if v < -eps or u + v > 1.0 + eps:
                    continue
                dist = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
                if dist > near and dist < depth[j, i]:
                    depth[j, i] = dist
                    tri_id[j, i] = t
    return depth, tri_id


def _streams(seed: int):
    children = np.random.SeedSequence(int(seed)).spawn(3)
    return [np.random.Generator(np.random.Philox(s)) for s in children]


def capture_view(mesh: TriangleMesh, pose: ViewPose, sensor: SensorModel = SensorModel(),
                 seed: int = 0, orbit_radius: float = DEFAULT_ORBIT_RADIUS,
                 camera_to_world: Optional[RigidTransform] = None) -> PointCloud:
    """Simulated depth capture; returns points in the world frame.

    Randomness is drawn per pixel from independent streams whatever the
    scene, so the same seed couples captures across sensor settings.
    """
    if len(mesh.triangles) == 0:
        raise InvalidParameterError("mesh has no triangles")
    cam = camera_to_world if camera_to_world is not None else pose_to_transform(pose, orbit_radius)
    verts_cam = cam.inverse().apply(mesh.vertices)
    h, w = sensor.image_height, sensor.image_width
    depth, tri_id = _raycast(verts_cam, mesh.triangles, w, h, sensor.focal, 1e-6)

    noise_rng, drop_rng, patch_rng = _streams(seed)
    noise = noise_rng.standard_normal((h, w)) * sensor.depth_noise_sigma
    keep_draw = drop_rng.random((h, w))
    n_patches = int(patch_rng.integers(2, 7))
    patch_draws = patch_rng.random((n_patches, 4))

    rays = sensor.pixel_rays()
    ray_len = np.linalg.norm(rays, axis=-1)
    hit = tri_id >= 0
    hit &= np.where(hit, depth, 0.0) * ray_len <= sensor.max_range

    # incidence angle between the ray and the hit triangle's normal
    tv = verts_cam[mesh.triangles]
    normals = np.cross(tv[:, 1] - tv[:, 0], tv[:, 2] - tv[:, 0])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cos_inc = np.zeros((h, w))
    cos_inc[hit] = np.abs(np.einsum("ij,ij->i", normals[tri_id[hit]], rays[hit])) / ray_len[hit]
    grazing = hit & (cos_inc < math.cos(math.radians(GRAZING_DEG)))

    keep = hit & (keep_draw >= sensor.dropout_probability)
    gj, gi = np.nonzero(grazing)
    if len(gj):
        jj, ii = np.mgrid[0:h, 0:w]
        for pick, a_draw, b_draw, ang_draw in patch_draws:
            k = min(int(pick * len(gj)), len(gj) - 1)
            semi_a, semi_b = 1.5 + 3.0 * a_draw, 1.0 + 2.0 * b_draw
            ang = math.pi * ang_draw
            du, dv = ii - gi[k], jj - gj[k]
            x = du * math.cos(ang) + dv * math.sin(ang)
            y = -du * math.sin(ang) + dv * math.cos(ang)
            keep &= (x / semi_a) ** 2 + (y / semi_b) ** 2 > 1.0

    unit = rays[keep] / ray_len[keep][:, None]
    pts_cam = rays[keep] * depth[keep][:, None] + unit * noise[keep][:, None]
    return PointCloud(cam.apply(pts_cam), None)


# ---------------------------------------------------------------- datasets

def view_seed(seed: int, view_id: int) -> int:
    """Independent per-view seed derived from the dataset seed."""
    return int(np.random.SeedSequence([int(seed), int(view_id)]).generate_state(1)[0])


def _capture_to_file(args):
    mesh, pose, sensor, seed, orbit_radius, view_id, path = args
    cam = pose_to_transform(pose, orbit_radius)
    cloud = capture_view(mesh, pose, sensor, view_seed(seed, view_id), orbit_radius, cam)
    # stored in the camera frame, the way a physical sensor delivers it
    write_ply(path, PointCloud(cam.inverse().apply(cloud.points)))
    return view_id, len(cloud)


def generate_dataset(mesh: TriangleMesh, action_space, sensor: SensorModel, seed: int,
                     out_dir, object_name: str = "object",
                     orbit_radius: float = DEFAULT_ORBIT_RADIUS, jobs: int = 1,
                     object_spec: Optional[dict] = None) -> dict:
    """Capture one view per action cell and write PLYs, ``poses.csv`` and ``manifest.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    poses = [(a, action_space.pose(a)) for a in range(action_space.action_count)]
    tasks = [(mesh, pose, sensor, seed, orbit_radius, vid, out / f"view_{vid:03d}.ply")
             for vid, pose in poses]
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                counts = dict(pool.map(_capture_to_file, tasks, chunksize=8))
        else:
            counts = dict(map(_capture_to_file, tasks))
        write_pose_csv(out / "poses.csv", poses)
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out}: {exc}") from exc
    manifest = {
        "object": object_name,
        "object_spec": object_spec,
        "seed": int(seed),
        "frame": "camera",
        "orbit_radius": orbit_radius,
        "action_space": {"yaw_buckets": action_space.yaw_buckets,
                         "pitch_buckets": action_space.pitch_buckets},
        "sensor": sensor.to_dict(),
        "poses": "poses.csv",
        "views": [{"view_id": vid, "yaw_bucket": p.yaw_bucket, "pitch_bucket": p.pitch_bucket,
                   "file": f"view_{vid:03d}.ply", "points": counts[vid]} for vid, p in poses],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d views to %s", len(poses), out)
    return manifest


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
