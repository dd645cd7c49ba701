"""Glue between caches, the network and evaluation reports."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .agent import ActionValueNet, ObjectData, predict_nbv
from .env import ActionSpace, BettiCache, observation_table, reward_table
from .geometry import angular_difference

ANTIPODE_DEG = 180.0


def object_data(cache: BettiCache, space: ActionSpace, name: str = "object",
                with_rewards: bool = True) -> ObjectData:
    obs = observation_table(cache, space)
    if with_rewards:
        rewards = reward_table(cache, space.action_count)
    else:
        rewards = np.full((space.action_count, space.action_count), np.nan)
    return ObjectData(name, obs, rewards)


def angle_table(space: ActionSpace) -> np.ndarray:
    poses = [space.pose(a) for a in range(space.action_count)]
    n = len(poses)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = angular_difference(poses[i], poses[j])
    return out


@dataclass
class EvalReport:
    object: str
    views: int
    mean_angle_deg: float
    std_angle_deg: float
    frac_near_initial: float
    frac_near_antipode: float
    mean_greedy_reward: Optional[float] = None
    mean_random_reward: Optional[float] = None
    mean_best_reward: Optional[float] = None
    mean_regret: Optional[float] = None
    mean_random_regret: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def predicted_nbvs(net: ActionValueNet, data: ObjectData) -> np.ndarray:
    return np.array([predict_nbv(net, data.observations[v])[0] for v in range(len(data.observations))])


def evaluate(net: ActionValueNet, data: ObjectData, space: ActionSpace,
             angles: Optional[np.ndarray] = None, near_deg: float = 10.0) -> EvalReport:
    """Greedy NBV for every initial view, scored against the cache when rewards exist."""
    if angles is None:
        angles = angle_table(space)
    nbv = predicted_nbvs(net, data)
    views = np.arange(len(nbv))
    ang = angles[views, nbv]
    report = EvalReport(
        object=data.name, views=len(nbv),
        mean_angle_deg=float(ang.mean()), std_angle_deg=float(ang.std()),
        frac_near_initial=float(np.mean(ang < near_deg)),
        frac_near_antipode=float(np.mean(ang > ANTIPODE_DEG - near_deg)))
    if not np.isnan(data.rewards).any():
        chosen = data.rewards[views, nbv]
        best = data.rewards.max(axis=1)
        rand = data.rewards.mean(axis=1)
        report.mean_greedy_reward = float(chosen.mean())
        report.mean_random_reward = float(rand.mean())
        report.mean_best_reward = float(best.mean())
        report.mean_regret = float((best - chosen).mean())
        report.mean_random_regret = float((best - rand).mean())
    return report
