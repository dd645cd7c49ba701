"""Topological value of a view and the differential reward between views."""

from __future__ import annotations

from dataclasses import dataclass, field

from .tda import DEFAULT_RADII, FiltrationProfile

DEFAULT_ALPHA = 0.15


class RadiiMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    alpha: float = DEFAULT_ALPHA
    radii: tuple = field(default=DEFAULT_RADII)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        radii = tuple(float(r) for r in self.radii)
        if not radii or radii[0] <= 0 or any(b <= a for a, b in zip(radii, radii[1:])):
            raise ValueError("radii must be positive and strictly increasing")
        object.__setattr__(self, "radii", radii)

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "radii": list(self.radii)}


def view_value(profile: FiltrationProfile, config: MetricConfig = MetricConfig()) -> float:
    """alpha * sum(beta_1) - (1 - alpha) * sum(beta_0) over the filtration radii."""
    if tuple(profile.radii) != config.radii:
        raise RadiiMismatchError(f"profile radii {profile.radii} != config radii {config.radii}")
    return config.alpha * sum(profile.betti1) - (1.0 - config.alpha) * sum(profile.betti0)


def reward(v_prev: float, v_union: float) -> float:
    return v_union - v_prev
