"""Dense action-value network trained by supervised regression on reward vectors.

Layout: ``in -> [Linear -> BatchNorm -> LeakyReLU -> Dropout] x 2 -> Linear``.
The hidden linear layers carry no bias because the batch-norm shift already
plays that role.  Everything is plain numpy with hand-written backprop.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

MODEL_FORMAT = "toponbv-model"
MODEL_VERSION = 1
LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class DivergenceError(FloatingPointError):
    pass


def leaky_relu(x: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


@dataclass
class TrainConfig:
    batch_size: int = 64
    train_batches_per_cycle: int = 512
    test_batches_per_cycle: int = 512
    cycles: int = 50
    epsilon_start: float = 1.0
    epsilon_end: float = 0.0
    epsilon_decay_cycles: Optional[int] = None     # None: 80% of cycles
    learning_rate: float = 1e-3
    momentum: float = 0.9
    l2_lambda: float = 1e-4
    dropout_rate: float = 0.2
    reward_scale: float = 0.01
    hidden: tuple = (64, 128)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.cycles < 0 or self.train_batches_per_cycle < 0 or self.test_batches_per_cycle < 0:
            raise ValueError("cycle and batch counts must be >= 0")
        for name in ("epsilon_start", "epsilon_end", "dropout_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.dropout_rate >= 1.0:
            raise ValueError("dropout_rate must be < 1")
        if self.learning_rate <= 0 or self.reward_scale <= 0 or self.l2_lambda < 0:
            raise ValueError("learning_rate and reward_scale must be positive, l2_lambda >= 0")
        self.hidden = tuple(int(h) for h in self.hidden)

    def epsilon(self, cycle: int) -> float:
        """Linear decay from start to end over the decay window, then flat."""
        span = self.epsilon_decay_cycles
        if span is None:
            span = max(1, round(0.8 * self.cycles))
        frac = min(1.0, cycle / span) if span > 0 else 1.0
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "hidden" in known:
            known["hidden"] = tuple(known["hidden"])
        return cls(**known)


class ActionValueNet:
    """Maps an observation vector to one predicted (scaled) reward per action."""

    def __init__(self, input_size: int, action_count: int, hidden: Sequence[int] = (64, 128),
                 seed: int = 0, reward_scale: float = 0.01):
        self.input_size = int(input_size)
        self.action_count = int(action_count)
        self.hidden = tuple(int(h) for h in hidden)
        self.reward_scale = float(reward_scale)
        rng = np.random.default_rng(seed)
        sizes = (self.input_size,) + self.hidden
        self.params: dict[str, np.ndarray] = {}
        self.running: dict[str, np.ndarray] = {}
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
            bound = 1.0 / math.sqrt(fan_in)
            self.params[f"W{k}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            self.params[f"gamma{k}"] = np.ones(fan_out)
            self.params[f"beta{k}"] = np.zeros(fan_out)
            self.running[f"mean{k}"] = np.zeros(fan_out)
            self.running[f"var{k}"] = np.ones(fan_out)
        out = len(self.hidden) + 1
        bound = 1.0 / math.sqrt(sizes[-1])
        self.params[f"W{out}"] = rng.uniform(-bound, bound, (sizes[-1], self.action_count))
        self.params[f"b{out}"] = np.zeros(self.action_count)

    @property
    def weight_names(self) -> list:
        return [k for k in self.params if k.startswith("W")]

    # -------------------------------------------------------------- forward

    def forward(self, x: np.ndarray, train: bool = False, dropout_rate: float = 0.0,
                rng: Optional[np.random.Generator] = None, cache: Optional[list] = None) -> np.ndarray:
        """Batch forward pass.

        Eval mode uses the running batch-norm statistics and no dropout.  In
        train mode the batch statistics are used (and folded into the running
        ones) and, if ``dropout_rate`` > 0, inverted dropout masks come from ``rng``.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_size:
            raise ValueError(f"observation length {x.shape[1]} != network input {self.input_size}")
        if train and dropout_rate > 0 and rng is None:
            raise ValueError("train-mode dropout needs an rng")
        h = x
        for k in range(1, len(self.hidden) + 1):
            z = h @ self.params[f"W{k}"]
            if train:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                rm, rv = self.running[f"mean{k}"], self.running[f"var{k}"]
                rm += BN_MOMENTUM * (mu - rm)
                rv += BN_MOMENTUM * (var - rv)
            else:
                mu, var = self.running[f"mean{k}"], self.running[f"var{k}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv_std
            a = self.params[f"gamma{k}"] * zhat + self.params[f"beta{k}"]
            act = leaky_relu(a)
            mask = None
            if train and dropout_rate > 0:
                mask = (rng.random(act.shape) >= dropout_rate) / (1.0 - dropout_rate)
                act = act * mask
            if cache is not None:
                cache.append((h, zhat, inv_std, a, mask))
            h = act
        out = len(self.hidden) + 1
        if cache is not None:
            cache.append(h)
        return h @ self.params[f"W{out}"] + self.params[f"b{out}"]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, train=False)

    # ------------------------------------------------------------- training

    def loss_and_grads(self, x: np.ndarray, labels: np.ndarray, l2_lambda: float,
                       dropout_rate: float = 0.0, rng: Optional[np.random.Generator] = None,
                       update_running: bool = True) -> tuple[float, dict]:
        """MSE over all outputs plus ``l2_lambda * sum ||W||^2``, and its gradient."""
        saved = None if update_running else {k: v.copy() for k, v in self.running.items()}
        cache: list = []
        y = self.forward(x, train=True, dropout_rate=dropout_rate, rng=rng, cache=cache)
        if saved is not None:
            self.running = saved
        labels = np.asarray(labels, dtype=np.float64)
        if labels.shape != y.shape:
            raise ValueError(f"labels shape {labels.shape} != output shape {y.shape}")
        resid = y - labels
        loss = float(np.mean(resid ** 2))
        loss += l2_lambda * sum(float(np.sum(self.params[w] ** 2)) for w in self.weight_names)

        grads: dict[str, np.ndarray] = {}
        out = len(self.hidden) + 1
        h_last = cache.pop()
        dy = 2.0 * resid / resid.size
        grads[f"W{out}"] = h_last.T @ dy
        grads[f"b{out}"] = dy.sum(axis=0)
        dh = dy @ self.params[f"W{out}"].T
        for k in range(len(self.hidden), 0, -1):
            h_in, zhat, inv_std, a, mask = cache[k - 1]
            if mask is not None:
                dh = dh * mask
            da = dh * np.where(a > 0, 1.0, LEAKY_SLOPE)
            grads[f"gamma{k}"] = np.sum(da * zhat, axis=0)
            grads[f"beta{k}"] = da.sum(axis=0)
            dzhat = da * self.params[f"gamma{k}"]
            m = dzhat.shape[0]
            dz = inv_std / m * (m * dzhat - dzhat.sum(axis=0) - zhat * np.sum(dzhat * zhat, axis=0))
            grads[f"W{k}"] = h_in.T @ dz
            dh = dz @ self.params[f"W{k}"].T
        for w in self.weight_names:
            grads[w] = grads[w] + 2.0 * l2_lambda * self.params[w]
        return loss, grads

    # ----------------------------------------------------------- persistence

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "input_size": self.input_size,
            "action_count": self.action_count,
            "hidden": list(self.hidden),
            "reward_scale": self.reward_scale,
            "leaky_slope": LEAKY_SLOPE,
            "params": {k: v.tolist() for k, v in self.params.items()},
            "running": {k: v.tolist() for k, v in self.running.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionValueNet":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError(f"not a {MODEL_FORMAT} v{MODEL_VERSION} file")
        net = cls(d["input_size"], d["action_count"], d["hidden"], reward_scale=d["reward_scale"])
        for k in net.params:
            arr = np.asarray(d["params"][k], dtype=np.float64)
            if arr.shape != net.params[k].shape:
                raise ValueError(f"parameter {k} has shape {arr.shape}, expected {net.params[k].shape}")
            net.params[k] = arr
        for k in net.running:
            net.running[k] = np.asarray(d["running"][k], dtype=np.float64)
        return net


def save_model(net: ActionValueNet, path, extra: Optional[dict] = None) -> None:
    d = net.to_dict()
    if extra:
        d["meta"] = extra
    Path(path).write_text(json.dumps(d, sort_keys=True) + "\n")


def load_model(path) -> tuple[ActionValueNet, dict]:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read model {path}: {exc}") from exc
    return ActionValueNet.from_dict(d), d.get("meta", {})


class SgdMomentum:
    def __init__(self, params: dict, lr: float, momentum: float):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        for k, g in grads.items():
            v = self.velocity[k]
            v *= self.momentum
            v -= self.lr * g
            params[k] += v


def train_step(net: ActionValueNet, optimizer: SgdMomentum, x: np.ndarray, labels: np.ndarray,
               config: TrainConfig, rng: Optional[np.random.Generator] = None,
               dropout: bool = True) -> float:
    """One gradient step; returns the loss before the step."""
    rate = config.dropout_rate if dropout else 0.0
    loss, grads = net.loss_and_grads(x, labels, config.l2_lambda, rate, rng)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss}")
    optimizer.step(net.params, grads)
    if not all(np.all(np.isfinite(v)) for v in net.params.values()):
        raise DivergenceError("non-finite weights after update")
    return loss


def select_action(values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy: uniform action with probability epsilon, else the first argmax."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    values = np.asarray(values)
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(len(values)))
    return int(np.argmax(values))


def predict_nbv(net: ActionValueNet, observation: np.ndarray) -> tuple[int, np.ndarray]:
    """Greedy action and the predicted reward (in reward units) for every action."""
    values = net(observation)[0] / net.reward_scale
    return int(np.argmax(values)), values


# ---------------------------------------------------------------- training

@dataclass
class ObjectData:
    """Per-object training tables: observation per initial view, reward per (view, action)."""

    name: str
    observations: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        if self.rewards.shape[0] != self.observations.shape[0]:
            raise ValueError("observation and reward tables disagree on view count")


@dataclass
class CycleLog:
    cycle: int
    epsilon: float
    mean_train_loss: float
    mean_train_reward: float
    mean_test_reward: float


@dataclass
class LearningCurve:
    cycles: list = field(default_factory=list)

    @property
    def test_rewards(self) -> list:
        return [c.mean_test_reward for c in self.cycles]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["cycle", "mean_test_reward"])
            for c in self.cycles:
                w.writerow([c.cycle, repr(c.mean_test_reward)])


def random_policy_reward(objects: Sequence[ObjectData]) -> float:
    """Expected reward of a uniform-random action under uniform (object, view) sampling."""
    return float(np.mean([o.rewards.mean() for o in objects]))


def _sample(objects, rng, n):
    obj = rng.integers(len(objects), size=n)
    view = np.array([rng.integers(objects[o].observations.shape[0]) for o in obj])
    return obj, view


def _gather(objects, obj, view):
    x = np.stack([objects[o].observations[v] for o, v in zip(obj, view)])
    y = np.stack([objects[o].rewards[v] for o, v in zip(obj, view)])
    return x, y


def train(objects: Sequence[ObjectData], config: TrainConfig = TrainConfig(),
          label_check=None) -> tuple[ActionValueNet, LearningCurve]:
    """Train/test cycles with full reward-vector labels.

    Each cycle runs ``train_batches_per_cycle`` gradient steps on uniformly
    sampled (object, initial view) pairs, then ``test_batches_per_cycle``
    greedy (epsilon = 0) batches from the same distribution; the curve
    records the mean greedy test reward per cycle.  ``label_check(obj, view,
    labels)`` is called once per cycle on a sampled label vector.
    """
    if not objects:
        raise ValueError("train needs at least one object")
    in_size = objects[0].observations.shape[1]
    n_actions = objects[0].rewards.shape[1]
    seeds = np.random.SeedSequence(config.seed).spawn(5)
    init_seed, sample_rng, drop_rng, policy_rng, test_rng = (
        int(seeds[0].generate_state(1)[0]), *[np.random.default_rng(s) for s in seeds[1:]])
    net = ActionValueNet(in_size, n_actions, config.hidden, init_seed, config.reward_scale)
    opt = SgdMomentum(net.params, config.learning_rate, config.momentum)
    curve = LearningCurve()

    for cycle in range(config.cycles):
        eps = config.epsilon(cycle)
        losses, train_rewards = [], []
        for _ in range(config.train_batches_per_cycle):
            obj, view = _sample(objects, sample_rng, config.batch_size)
            x, y = _gather(objects, obj, view)
            # the behaviour policy only decides which reward gets logged;
            # the regression target is the full reward vector
            greedy = net(x)
            for b in range(len(obj)):
                a = select_action(greedy[b], eps, policy_rng)
                train_rewards.append(y[b, a])
            losses.append(train_step(net, opt, x, y * config.reward_scale, config, drop_rng))
        if label_check is not None and config.train_batches_per_cycle:
            label_check(int(obj[0]), int(view[0]), y[0])

        test = []
        for _ in range(config.test_batches_per_cycle):
            obj, view = _sample(objects, test_rng, config.batch_size)
            x, y = _gather(objects, obj, view)
            acts = np.argmax(net(x), axis=1)
            test.extend(y[np.arange(len(acts)), acts])
        entry = CycleLog(cycle, eps, float(np.mean(losses)) if losses else float("nan"),
                         float(np.mean(train_rewards)) if train_rewards else float("nan"),
                         float(np.mean(test)) if test else float("nan"))
        curve.cycles.append(entry)
        log.info("cycle %d eps %.3f loss %.5f train reward %.3f test reward %.3f", cycle,
                 eps, entry.mean_train_loss, entry.mean_train_reward, entry.mean_test_reward)
    return net, curve
