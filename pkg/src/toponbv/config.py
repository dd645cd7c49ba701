"""File-backed run configuration (a single JSON document)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .agent import TrainConfig
from .env import DEFAULT_UNION_VOXEL, ActionSpace
from .geometry import DEFAULT_ORBIT_RADIUS
from .metric import MetricConfig
from .registration import IcpParams
from .sensor_sim import SensorModel

# three training shapes and one held-out shape
DEFAULT_OBJECTS = (
    {"name": "torus", "kind": "torus", "params": {}, "role": "train"},
    {"name": "plate", "kind": "plate_with_holes", "params": {}, "role": "train"},
    {"name": "two_torus", "kind": "two_torus", "params": {}, "role": "train"},
    {"name": "composite", "kind": "composite", "params": {}, "role": "test"},
)


@dataclass
class RunConfig:
    metric: MetricConfig = field(default_factory=MetricConfig)
    sensor: SensorModel = field(default_factory=SensorModel)
    action_space: ActionSpace = field(default_factory=ActionSpace)
    icp: IcpParams = field(default_factory=IcpParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    objects: list = field(default_factory=lambda: [dict(o) for o in DEFAULT_OBJECTS])
    output_dir: str = "runs"
    orbit_radius: float = DEFAULT_ORBIT_RADIUS
    union_voxel: float = DEFAULT_UNION_VOXEL

    def __post_init__(self):
        if self.orbit_radius <= 0 or self.union_voxel <= 0:
            raise ValueError("orbit_radius and union_voxel must be positive")
        names = [o["name"] for o in self.objects]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate object names in {names}")
        for o in self.objects:
            if o.get("role", "train") not in ("train", "test"):
                raise ValueError(f"object {o['name']}: role must be 'train' or 'test'")

    def object(self, name: str) -> dict:
        for o in self.objects:
            if o["name"] == name:
                return o
        raise KeyError(f"object {name!r} not in config (have {[o['name'] for o in self.objects]})")

    def objects_with_role(self, role: str) -> list:
        return [o for o in self.objects if o.get("role", "train") == role]

    def dataset_dir(self, name: str) -> Path:
        return Path(self.output_dir) / "datasets" / name

    def cache_path(self, name: str) -> Path:
        return Path(self.output_dir) / "caches" / f"{name}.jsonl"

    def to_dict(self) -> dict:
        sensor = self.sensor.to_dict()
        sensor["horizontal_fov_deg"] = math.degrees(sensor.pop("horizontal_fov"))
        return {
            "metric": self.metric.to_dict(),
            "sensor": sensor,
            "action_space": self.action_space.to_dict(),
            "icp": self.icp.to_dict(),
            "train": self.train.to_dict(),
            "objects": self.objects,
            "output_dir": self.output_dir,
            "orbit_radius": self.orbit_radius,
            "union_voxel": self.union_voxel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        allowed = {f.name for f in fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "metric" in kw:
            kw["metric"] = MetricConfig(**kw["metric"])
        if "sensor" in kw:
            s = dict(kw["sensor"])
            if "horizontal_fov_deg" in s:
                s["horizontal_fov"] = math.radians(s.pop("horizontal_fov_deg"))
            kw["sensor"] = SensorModel(**s)
        if "action_space" in kw:
            kw["action_space"] = ActionSpace(**kw["action_space"])
        if "icp" in kw:
            kw["icp"] = IcpParams(**kw["icp"])
        if "train" in kw:
            kw["train"] = TrainConfig.from_dict(kw["train"])
        return cls(**kw)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(data)
