"""Self-play, replay and the optimisation loop tying the twin and the planner together."""

from __future__ import annotations

import csv
import logging
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import VoltVarEnv, trajectory_row
from .feeder import FeederSpec
from .nncore import Optimizer
from .planner import PlannerConfig, run_puct_search, run_search
from .twin import TRAINABLE, LossWeights, TwinConfig, TwinModel, UnrollBatch, save_model, unrolled_loss

logger = logging.getLogger(__name__)

METRICS_HEADER = (
    "env_steps", "episode_return", "loss_total", "loss_reward", "loss_policy",
    "loss_value", "loss_consistency", "ts_seconds", "loss_l2",
)


@dataclass(frozen=True)
class TrainerConfig:
    discount: float = 0.99
    n_step: int = 5
    unroll: int = 5
    batch_size: int = 64
    grad_steps_per_episode: int = 40
    env_steps: int = 20_000
    buffer_capacity: int = 500
    learning_rate: float = 0.01
    momentum: float = 0.9
    l2_coefficient: float = 1e-4
    max_grad_norm: float | None = 5.0
    latent_grad_scale: float = 0.5
    loss_weights: LossWeights = field(default_factory=LossWeights)
    checkpoint_every: int = 0  # env steps; 0 disables periodic checkpoints

    def __post_init__(self):
        if self.n_step < 1 or self.unroll < 1:
            raise ValueError("n_step and unroll must be >= 1")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("batch_size and buffer_capacity must be >= 1")
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))

    @classmethod
    def from_dict(cls, data: dict) -> TrainerConfig:
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Trajectory:
    """One episode; ``observations`` has one more row than the other arrays."""

    observations: np.ndarray  # (T + 1, obs_dim): s_0 .. s_T
    policies: np.ndarray  # (T, n_actions)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    reward_terms: np.ndarray  # (T, 3)
    values: np.ndarray | None = None  # z targets, filled by compute_value_targets
    traj_id: int = -1

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


class ReplayBuffer:
    """FIFO ring of complete trajectories with uniform (episode, step) sampling.

    ``add`` and ``sample`` hold the same lock, so a sampler never sees a
    trajectory half-inserted by another thread.
    """

    def __init__(self, capacity: int = 500):
        self.capacity = capacity
        self._episodes: deque[Trajectory] = deque(maxlen=capacity)
        self._lock = threading.Lock()
        self._next_id = 0

    def __len__(self):
        return len(self._episodes)

    def add(self, traj: Trajectory):
        if traj.values is None:
            raise ValueError("trajectory needs value targets before it enters the buffer")
        with self._lock:
            traj.traj_id = self._next_id
            self._next_id += 1
            self._episodes.append(traj)

    def episodes(self) -> list[Trajectory]:
        with self._lock:
            return list(self._episodes)

    def sample_anchors(self, n: int, rng):
        """``n`` (trajectory, t) pairs uniform over all stored steps."""
        with self._lock:
            episodes = list(self._episodes)
        if not episodes:
            raise ValueError("cannot sample from an empty replay buffer")
        lengths = np.array([e.length for e in episodes])
        cum = np.cumsum(lengths)
        flat = rng.integers(0, cum[-1], size=n)
        ep_idx = np.searchsorted(cum, flat, side="right")
        starts = cum - lengths
        return [(episodes[i], int(f - starts[i])) for i, f in zip(ep_idx, flat)]


# ---------------------------------------------------------------------------
# self-play and targets
# ---------------------------------------------------------------------------


def search(kind, obs, model, env_t, cfg: PlannerConfig, rng, horizon, explore=True):
    if kind == "gcdt":
        return run_search(obs, model, env_t, cfg, rng=rng, horizon=horizon)
    if kind == "dt":
        return run_puct_search(obs, model, env_t, cfg, rng=rng, horizon=horizon, explore=explore)
    raise ValueError(f"unknown planner kind {kind!r}")


def self_play_episode(env, model, planner_cfg: PlannerConfig, rng, planner="gcdt", seed=None,
                      greedy=False, timings=None, log_rows=None) -> Trajectory:
    """Play one episode with search at every step.

    ``greedy`` plays argmax of the search policy instead of the searched
    action (used for evaluation).  Per-step wall-clock times are appended to
    ``timings`` when given.
    """
    if seed is None:
        seed = int(rng.integers(2**31))
    obs = env.reset(seed)
    horizon = env.cfg.horizon
    observations, policies, actions, rewards, terms = [obs], [], [], [], []
    while not env.done:
        start = time.perf_counter()
        result = search(planner, obs, model, env.t, planner_cfg, rng, horizon, explore=not greedy)
        action = int(np.argmax(result.policy_target)) if greedy else result.chosen_action
        t = env.t
        outcome = env.step(action)
        if timings is not None:
            timings.append(time.perf_counter() - start)
        if log_rows is not None:
            log_rows.append(trajectory_row(t, action, outcome))
        obs = outcome.observation
        observations.append(obs)
        policies.append(result.policy_target)
        actions.append(action)
        rewards.append(outcome.reward)
        terms.append(outcome.info)
    return Trajectory(
        observations=np.asarray(observations),
        policies=np.asarray(policies),
        actions=np.asarray(actions, dtype=np.int64),
        rewards=np.asarray(rewards, dtype=float),
        reward_terms=np.asarray(terms, dtype=float),
    )


def compute_value_targets(traj: Trajectory, cfg: TrainerConfig, model) -> np.ndarray:
    """n-step bootstrapped returns; no bootstrap at or past the episode end."""
    T = traj.length
    gamma, n = cfg.discount, cfg.n_step
    boot_idx = np.arange(T) + n
    needs = boot_idx < T
    boot = np.zeros(T)
    if needs.any():
        h = model.represent(traj.observations[boot_idx[needs]])
        _, v = model.predict(h)
        boot[needs] = v
    z = np.zeros(T)
    for t in range(T):
        end = min(t + n, T)
        disc = gamma ** np.arange(end - t)
        z[t] = float(np.dot(disc, traj.rewards[t:end]))
        if needs[t]:
            z[t] += gamma**n * boot[t]
    return z


def sample_batch(buffer: ReplayBuffer, cfg: TrainerConfig, rng) -> UnrollBatch:
    anchors = buffer.sample_anchors(cfg.batch_size, rng)
    first = anchors[0][0]
    B, K = cfg.batch_size, cfg.unroll
    obs_dim = first.observations.shape[1]
    n_actions = first.policies.shape[1]
    obs = np.zeros((B, obs_dim))
    actions = np.zeros((B, K), dtype=np.int64)
    rewards = np.zeros((B, K))
    policies = np.zeros((B, K, n_actions))
    values = np.zeros((B, K))
    next_obs = np.zeros((B, K, obs_dim))
    mask = np.zeros((B, K))
    ids = np.zeros(B, dtype=np.int64)
    pos = np.zeros(B, dtype=np.int64)
    for b, (traj, t) in enumerate(anchors):
        ids[b], pos[b] = traj.traj_id, t
        obs[b] = traj.observations[t]
        k = min(K, traj.length - t)
        sl = slice(t, t + k)
        actions[b, :k] = traj.actions[sl]
        rewards[b, :k] = traj.rewards[sl]
        policies[b, :k] = traj.policies[sl]
        values[b, :k] = traj.values[sl]
        next_obs[b, :k] = traj.observations[t + 1 : t + 1 + k]
        mask[b, :k] = 1.0
    return UnrollBatch(obs, actions, rewards, policies, values, next_obs, mask, ids, pos)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    model: TwinModel
    metrics: list[dict]
    checkpoints: list[Path]


def _as_env(env, env_cfg):
    if isinstance(env, FeederSpec):
        return VoltVarEnv(env, env_cfg)
    return env


def make_optimizer(cfg: TrainerConfig) -> Optimizer:
    return Optimizer(cfg.learning_rate, cfg.momentum, cfg.l2_coefficient, cfg.max_grad_norm)


def gradient_step(model: TwinModel, buffer: ReplayBuffer, cfg: TrainerConfig, opt: Optimizer, rng):
    batch = sample_batch(buffer, cfg, rng)
    result = unrolled_loss(model, batch, cfg.loss_weights, cfg.l2_coefficient, cfg.latent_grad_scale)
    opt.step(model.trainable(), [result.grads[n] for n in TRAINABLE], add_l2=False)
    return result


def train_loop(env, trainer_cfg: TrainerConfig, planner_cfg: PlannerConfig, seed: int,
               planner: str = "gcdt", env_cfg=None, twin_kwargs=None, out_dir=None,
               metrics_path=None) -> RunResult:
    """Alternate self-play episodes and gradient steps until the env-step budget is spent.

    ``env`` is a :class:`FeederSpec` (wrapped in a :class:`VoltVarEnv`) or
    any object with the same ``reset``/``step`` interface.
    """
    env = _as_env(env, env_cfg)
    cfg = trainer_cfg
    rng = np.random.default_rng(seed)
    twin_cfg = TwinConfig(env.obs_size, env.n_actions, seed=seed, **(twin_kwargs or {}))
    model = TwinModel(twin_cfg)
    opt = make_optimizer(cfg)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    planner_cfg = replace(planner_cfg, discount=cfg.discount)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    metrics, checkpoints = [], []
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()
    env_steps = 0
    next_ckpt = cfg.checkpoint_every or None
    try:
        while env_steps < cfg.env_steps:
            snapshot = model.copy()
            timings = []
            traj = self_play_episode(env, snapshot, planner_cfg, rng, planner=planner, timings=timings)
            traj.values = compute_value_targets(traj, cfg, snapshot)
            buffer.add(traj)
            env_steps += traj.length

            sums = dict.fromkeys(("total", "reward", "policy", "value", "consistency", "l2"), 0.0)
            for _ in range(cfg.grad_steps_per_episode):
                res = gradient_step(model, buffer, cfg, opt, rng)
                sums["total"] += res.total
                for key, val in res.components.items():
                    sums[key] += val
            g = max(cfg.grad_steps_per_episode, 1)
            row = {
                "env_steps": env_steps,
                "episode_return": traj.episode_return,
                "loss_total": sums["total"] / g,
                "loss_reward": sums["reward"] / g,
                "loss_policy": sums["policy"] / g,
                "loss_value": sums["value"] / g,
                "loss_consistency": sums["consistency"] / g,
                "ts_seconds": float(np.mean(timings)) if timings else 0.0,
                "loss_l2": sums["l2"] / g,
            }
            metrics.append(row)
            if writer is not None:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
                fh.flush()
            if not np.isfinite(row["loss_total"]):
                raise FloatingPointError(f"loss diverged at env step {env_steps} (seed {seed})")
            if out_dir is not None and next_ckpt is not None and env_steps >= next_ckpt:
                checkpoints.append(_checkpoint(out_dir, model, cfg, env_steps, planner))
                while next_ckpt <= env_steps:
                    next_ckpt += cfg.checkpoint_every
            logger.debug("seed %d env_steps %d return %.3f loss %.4f", seed, env_steps,
                         row["episode_return"], row["loss_total"])
        if out_dir is not None and (not checkpoints or checkpoints[-1].name != f"ckpt_{env_steps}.bin"):
            checkpoints.append(_checkpoint(out_dir, model, cfg, env_steps, planner))
    finally:
        if fh is not None:
            fh.close()
    return RunResult(model, metrics, checkpoints)


def _checkpoint(out_dir: Path, model, cfg: TrainerConfig, env_steps: int, planner: str) -> Path:
    path = out_dir / f"ckpt_{env_steps}.bin"
    save_model(path, model, cfg.loss_weights, env_steps=env_steps, planner=planner)
    return path


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        parsed = {k: float(v) for k, v in row.items()}
        parsed["env_steps"] = int(parsed["env_steps"])
        out.append(parsed)
    return out


def trainer_config_dict(cfg: TrainerConfig) -> dict:
    return asdict(cfg)
