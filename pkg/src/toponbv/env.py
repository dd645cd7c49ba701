"""Bandit environment: action grid, observations and the Betti/value cache.

The cache holds one entry per captured view (``s:<id>``) and one per
unordered pair of distinct views (``p:<lo>:<hi>``).  Union is commutative and
a view merged with itself gains nothing, so a 200-action space needs 200
singles and C(200, 2) = 19,900 pairs to answer every (initial, action) query.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import DEFAULT_ORBIT_RADIUS, PointCloud, ViewPose, pose_to_transform, read_ply, read_pose_csv
from .metric import MetricConfig, reward, view_value
from .registration import IcpParams, register_and_union
from .tda import FiltrationProfile, filtration_profile

log = logging.getLogger(__name__)

BETTI_SCALE = 0.01
DEFAULT_UNION_VOXEL = 0.001


class MissingCacheEntryError(KeyError):
    pass


@dataclass(frozen=True)
class ActionSpace:
    yaw_buckets: int = 20
    pitch_buckets: int = 10

    def __post_init__(self):
        if self.yaw_buckets < 1 or self.pitch_buckets < 1:
            raise ValueError("bucket counts must be >= 1")

    @property
    def action_count(self) -> int:
        return self.yaw_buckets * self.pitch_buckets

    def index(self, yaw_bucket: int, pitch_bucket: int) -> int:
        if not (0 <= yaw_bucket < self.yaw_buckets and 0 <= pitch_bucket < self.pitch_buckets):
            raise IndexError(f"bucket ({yaw_bucket}, {pitch_bucket}) outside "
                             f"{self.yaw_buckets}x{self.pitch_buckets}")
        return yaw_bucket * self.pitch_buckets + pitch_bucket

    def decompose(self, action: int) -> tuple[int, int]:
        if not 0 <= action < self.action_count:
            raise IndexError(f"action {action} outside [0, {self.action_count})")
        return divmod(int(action), self.pitch_buckets)

    def pose(self, action: int) -> ViewPose:
        yb, pb = self.decompose(action)
        return ViewPose.bucket_center(yb, pb, self.yaw_buckets, self.pitch_buckets)

    def to_dict(self) -> dict:
        return {"yaw_buckets": self.yaw_buckets, "pitch_buckets": self.pitch_buckets}


def observation_size(n_radii: int) -> int:
    return 2 * n_radii + 2


def build_observation(profile: FiltrationProfile, pose: ViewPose, space: ActionSpace) -> np.ndarray:
    """[b0(r1), b1(r1), ..., b0(rk), b1(rk), yaw, pitch], Betti counts scaled by 1/100."""
    obs = np.empty(observation_size(len(profile.radii)))
    obs[0:-2:2] = np.asarray(profile.betti0, dtype=np.float64) * BETTI_SCALE
    obs[1:-2:2] = np.asarray(profile.betti1, dtype=np.float64) * BETTI_SCALE
    obs[-2] = pose.yaw_bucket / space.yaw_buckets
    obs[-1] = pose.pitch_bucket / space.pitch_buckets
    return obs


# ------------------------------------------------------------------ dataset

@dataclass
class Dataset:
    """A captured object: camera-frame views plus their poses."""

    root: Path
    manifest: dict
    poses: dict
    space: ActionSpace
    orbit_radius: float
    _clouds: dict = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        manifest_path = path / "manifest.json" if path.is_dir() else path
        try:
            manifest = json.loads(manifest_path.read_text())
        except OSError as exc:
            raise OSError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
        root = manifest_path.parent
        space = ActionSpace(**manifest["action_space"])
        poses = read_pose_csv(root / manifest.get("poses", "poses.csv"))
        return cls(root, manifest, poses, space, float(manifest.get("orbit_radius", DEFAULT_ORBIT_RADIUS)))

    @property
    def name(self) -> str:
        return self.manifest["object"]

    @property
    def view_ids(self) -> list:
        return [v["view_id"] for v in self.manifest["views"]]

    def cloud(self, view_id: int) -> PointCloud:
        if view_id not in self._clouds:
            entry = next(v for v in self.manifest["views"] if v["view_id"] == view_id)
            self._clouds[view_id] = read_ply(self.root / entry["file"], view_id)
        return self._clouds[view_id]

    def world_points(self, view_id: int) -> np.ndarray:
        return pose_to_transform(self.poses[view_id], self.orbit_radius).apply(self.cloud(view_id).points)


# -------------------------------------------------------------------- cache

def single_key(view_id: int) -> str:
    return f"s:{view_id}"


def pair_key(i: int, j: int) -> str:
    lo, hi = (i, j) if i <= j else (j, i)
    return f"p:{lo}:{hi}"


def _parse_key(key: str):
    parts = key.split(":")
    if parts[0] == "s":
        return (0, int(parts[1]), -1)
    return (1, int(parts[1]), int(parts[2]))


@dataclass
class BettiCache:
    singles: dict = field(default_factory=dict)    # view_id -> (FiltrationProfile, value)
    pairs: dict = field(default_factory=dict)      # (lo, hi) -> value
    pair_profiles: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.singles) + len(self.pairs)

    def single_value(self, view_id: int) -> float:
        try:
            return self.singles[view_id][1]
        except KeyError:
            raise MissingCacheEntryError(single_key(view_id)) from None

    def single_profile(self, view_id: int) -> FiltrationProfile:
        try:
            return self.singles[view_id][0]
        except KeyError:
            raise MissingCacheEntryError(single_key(view_id)) from None

    def pair_value(self, i: int, j: int) -> float:
        if i == j:
            return self.single_value(i)
        key = (i, j) if i < j else (j, i)
        try:
            return self.pairs[key]
        except KeyError:
            raise MissingCacheEntryError(pair_key(i, j)) from None

    def keys(self) -> set:
        return {single_key(v) for v in self.singles} | {pair_key(*p) for p in self.pairs}

    def add(self, entry: dict) -> None:
        kind, a, b = _parse_key(entry["key"])
        profile = FiltrationProfile.from_dict(entry)
        if kind == 0:
            self.singles[a] = (profile, float(entry["value"]))
        else:
            self.pairs[(a, b)] = float(entry["value"])
            self.pair_profiles[(a, b)] = profile

    def entries(self) -> list:
        out = []
        for v, (prof, val) in self.singles.items():
            out.append(_entry(single_key(v), prof, val))
        for (i, j), val in self.pairs.items():
            out.append(_entry(pair_key(i, j), self.pair_profiles[(i, j)], val))
        out.sort(key=lambda e: _parse_key(e["key"]))
        return out

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w") as fh:
            for e in self.entries():
                fh.write(_dump(e))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "BettiCache":
        cache = cls()
        for entry in _read_entries(path):
            cache.add(entry)
        return cache


def _entry(key: str, profile: FiltrationProfile, value: float) -> dict:
    e = {"key": key, "value": value}
    e.update(profile.to_dict())
    return e


def _dump(entry: dict) -> str:
    return json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n"


def _read_entries(path) -> Iterable[dict]:
    path = Path(path)
    if not path.exists():
        return
    with open(path) as fh:
        for line in fh:
            if not line.endswith("\n"):
                break     # torn final line from an interrupted run
            line = line.strip()
            if line:
                yield json.loads(line)


# ---------------------------------------------------------- precomputation

class _Worker:
    """Per-process state: world-frame views, merged singles and their KD-trees."""

    def __init__(self, dataset_path, metric: MetricConfig, icp: Optional[IcpParams], voxel: float):
        self.ds = Dataset.load(dataset_path)
        self.metric = metric
        self.icp = icp
        self.voxel = voxel
        self._world: dict = {}
        self._merged: dict = {}
        self._trees: dict = {}

    def world(self, v):
        if v not in self._world:
            self._world[v] = self.ds.world_points(v)
        return self._world[v]

    def merged(self, v):
        if v not in self._merged:
            self._merged[v] = register_and_union(np.zeros((0, 3)), self.world(v), self.icp, self.voxel)
            self._trees[v] = cKDTree(self._merged[v]) if len(self._merged[v]) else None
        return self._merged[v]

    def single(self, v) -> dict:
        prof = filtration_profile(self.merged(v), self.metric.radii)
        return _entry(single_key(v), prof, view_value(prof, self.metric))

    def pair(self, i, j) -> dict:
        base = self.merged(i)
        pts = register_and_union(base, self.world(j), self.icp, self.voxel, merged_tree=self._trees[i])
        prof = filtration_profile(pts, self.metric.radii)
        return _entry(pair_key(i, j), prof, view_value(prof, self.metric))


_WORKER: Optional[_Worker] = None


def _init_worker(*args):
    global _WORKER
    _WORKER = _Worker(*args)


def _run_task(task):
    kind, i, js = task
    key = single_key(i)
    try:
        if kind == "s":
            return [_WORKER.single(i)]
        out = []
        for j in js:
            key = pair_key(i, j)
            out.append(_WORKER.pair(i, j))
        return out
    except Exception as exc:
        raise RuntimeError(f"{key}: {type(exc).__name__}: {exc}") from exc


def precompute_cache(dataset_path, metric: MetricConfig = MetricConfig(),
                     icp: Optional[IcpParams] = IcpParams(), cache_path=None,
                     voxel: float = DEFAULT_UNION_VOXEL, jobs: int = 1,
                     max_entries: Optional[int] = None, pairs: bool = True) -> BettiCache:
    """Compute (or resume) the single-view and pair-union cache for one dataset.

    Entries are appended to ``cache_path`` as they complete, so an
    interrupted run resumes where it stopped; the finished file is rewritten
    in canonical key order.  ``max_entries`` stops early (for resumption
    tests); ``pairs=False`` computes the single-view entries only.
    """
    ds = Dataset.load(dataset_path)
    ids = sorted(ds.view_ids)
    cache = BettiCache()
    if cache_path is not None:
        cache_path = Path(cache_path)
        try:
            for entry in _read_entries(cache_path):
                cache.add(entry)
        except (ValueError, KeyError) as exc:
            raise ValueError(f"corrupt cache file {cache_path}: {exc}") from exc
        _check_meta(cache_path, metric, icp, voxel)
    done = cache.keys()

    tasks = [("s", v, None) for v in ids if single_key(v) not in done]
    for a, i in enumerate(ids if pairs else ()):
        js = [j for j in ids[a + 1:] if pair_key(i, j) not in done]
        if js:
            tasks.append(("p", i, js))

    sink = open(cache_path, "a") if cache_path is not None else None
    written = 0
    try:
        if cache_path is not None and not cache_path.exists():
            cache_path.touch()
        init = (ds.root / "manifest.json", metric, icp, voxel)
        if jobs > 1:
            pool = ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=init)
            results = pool.map(_run_task, tasks)
        else:
            pool = None
            _init_worker(*init)
            results = map(_run_task, tasks)
        try:
            for batch in results:
                for entry in batch:
                    cache.add(entry)
                    if sink is not None:
                        sink.write(_dump(entry))
                    written += 1
                if sink is not None:
                    sink.flush()
                if max_entries is not None and written >= max_entries:
                    return cache
        finally:
            if pool is not None:
                pool.shutdown(cancel_futures=True)
    except Exception as exc:
        raise RuntimeError(f"cache precompute failed for {ds.root}: {exc}") from exc
    finally:
        if sink is not None:
            sink.close()
    if cache_path is not None:
        cache.save(cache_path)
    log.info("cache for %s: %d singles, %d pairs", ds.name, len(cache.singles), len(cache.pairs))
    return cache


def _check_meta(cache_path: Path, metric: MetricConfig, icp: Optional[IcpParams], voxel: float) -> None:
    """Refuse to resume a cache built under different settings."""
    meta_path = cache_path.with_name(cache_path.name + ".meta.json")
    meta = {"metric": metric.to_dict(), "icp": icp.to_dict() if icp else None, "voxel": voxel}
    if meta_path.exists():
        old = json.loads(meta_path.read_text())
        if old != json.loads(json.dumps(meta)):
            raise ValueError(f"{cache_path} was built with different settings: {old}")
    else:
        meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


# ------------------------------------------------------------------- bandit

def env_step(initial_view: int, action: int, cache: BettiCache) -> float:
    """Reward of taking ``action`` after observing ``initial_view``."""
    if action == initial_view:
        cache.single_value(initial_view)
        return 0.0
    return reward(cache.single_value(initial_view), cache.pair_value(initial_view, action))


def reward_table(cache: BettiCache, action_count: int) -> np.ndarray:
    """Rewards for every (initial view, action); row = initial view."""
    singles = np.array([cache.single_value(v) for v in range(action_count)])
    table = np.empty((action_count, action_count))
    for i in range(action_count):
        for j in range(action_count):
            table[i, j] = cache.pair_value(i, j) - singles[i] if i != j else 0.0
    return table


def observation_table(cache: BettiCache, space: ActionSpace) -> np.ndarray:
    return np.stack([build_observation(cache.single_profile(v), space.pose(v), space)
                     for v in range(space.action_count)])
