"""Topology-driven next-best-view planning for a simulated depth sensor."""

__version__ = "0.1.0"

from .geometry import PointCloud, RigidTransform, ViewPose, pose_to_transform  # noqa: E402
from .metric import MetricConfig, reward, view_value  # noqa: E402
from .tda import FiltrationProfile, betti0, betti1, build_vr_complex, filtration_profile  # noqa: E402

__all__ = [
    "PointCloud", "RigidTransform", "ViewPose", "pose_to_transform",
    "MetricConfig", "reward", "view_value",
    "FiltrationProfile", "betti0", "betti1", "build_vr_complex", "filtration_profile",
]
