"""Rollout collection, GAE, the clipped-surrogate PPO update and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .env import ACT_DIM, OBS_DIM, EnvConfig, QuadNavEnv
from .net import (
    Adam,
    GaussianPolicy,
    Mlp,
    clip_grad_norm,
    gaussian_entropy,
    gaussian_log_prob,
    gaussian_log_prob_grads,
    sample_action,
)

# consecutive control steps of goal_reached that count as a successful arrival (0.5 s)
GOAL_HOLD_STEPS = 25


class TrainingDivergenceError(RuntimeError):
    pass


@dataclass
class PpoConfig:
    rollout_length: int = 32
    epochs: int = 5
    minibatches: int = 4
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    learning_rate: float = 3e-4
    total_env_steps: int = 10_000_000
    advantage_normalization: bool = True
    hidden: int = 128
    log_std_init: float = 0.0

    def __post_init__(self):
        self.total_env_steps = int(self.total_env_steps)
        self.validate()

    def validate(self, num_envs: int | None = None) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.rollout_length < 1 or self.epochs < 1 or self.minibatches < 1:
            raise ValueError("rollout_length, epochs and minibatches must be >= 1")
        if num_envs is not None and (self.rollout_length * num_envs) % self.minibatches:
            raise ValueError("rollout_length * num_envs must be divisible by minibatches")


METRIC_FIELDS = (
    "iteration",
    "env_steps",
    "mean_episodic_return",
    "mean_reward_per_step",
    "mean_episode_length",
    "goal_reach_rate",
    "mean_final_distance",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "approx_kl",
    "wall_clock",
)

METRICS_HEADER_COMMENT = "# quadnav metrics v1"


@dataclass
class TrainMetrics:
    iteration: int
    env_steps: int
    mean_episodic_return: float
    mean_reward_per_step: float
    mean_episode_length: float
    goal_reach_rate: float
    mean_final_distance: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float
    wall_clock: float

    def row(self) -> list[str]:
        return [repr(v) if isinstance(v, float) else str(v) for v in dataclasses.astuple(self)]


@dataclass
class RolloutBuffer:
    observations: np.ndarray  # (T, N, 12)
    actions: np.ndarray  # (T, N, 4), raw unclamped samples
    log_probs: np.ndarray  # (T, N)
    rewards: np.ndarray
    values: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    bootstrap_values: np.ndarray  # critic value of the true final state where truncated
    last_values: np.ndarray  # (N,) value of the observation after the last step
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @classmethod
    def empty(cls, T: int, N: int) -> "RolloutBuffer":
        z = lambda: np.zeros((T, N))
        return cls(
            np.zeros((T, N, OBS_DIM)), np.zeros((T, N, ACT_DIM)), z(), z(), z(),
            np.zeros((T, N), dtype=bool), np.zeros((T, N), dtype=bool), z(), np.zeros(N),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape


class EpisodeTracker:
    """Running per-env episode statistics and a window of finished episodes."""

    def __init__(self, num_envs: int, window: int | None = None):
        window = window or max(num_envs, 16)
        self.ret = np.zeros(num_envs)
        self.length = np.zeros(num_envs, dtype=np.int64)
        self.streak = np.zeros(num_envs, dtype=np.int64)
        self.success = np.zeros(num_envs, dtype=bool)
        self.returns = deque(maxlen=window)
        self.lengths = deque(maxlen=window)
        self.successes = deque(maxlen=window)
        self.final_distances = deque(maxlen=window)

    def update(self, reward, goal_reached, distance, done) -> None:
        self.ret += reward
        self.length += 1
        self.streak = np.where(goal_reached, self.streak + 1, 0)
        self.success |= self.streak >= GOAL_HOLD_STEPS
        for i in np.flatnonzero(done):
            self.returns.append(float(self.ret[i]))
            self.lengths.append(int(self.length[i]))
            self.successes.append(bool(self.success[i]))
            self.final_distances.append(float(distance[i]))
        self.ret[done] = 0.0
        self.length[done] = 0
        self.streak[done] = 0
        self.success[done] = False

    def summary(self) -> dict[str, float]:
        if not self.returns:
            nan = float("nan")
            return dict(mean_episodic_return=nan, mean_episode_length=nan,
                        goal_reach_rate=nan, mean_final_distance=nan)
        return dict(
            mean_episodic_return=float(np.mean(self.returns)),
            mean_episode_length=float(np.mean(self.lengths)),
            goal_reach_rate=float(np.mean(self.successes)),
            mean_final_distance=float(np.mean(self.final_distances)),
        )

    def state_dict(self) -> dict:
        return {
            "ret": self.ret.copy(), "length": self.length.copy(), "streak": self.streak.copy(),
            "success": self.success.copy(), "window": self.returns.maxlen,
            "returns": list(self.returns), "lengths": list(self.lengths),
            "successes": list(self.successes), "final_distances": list(self.final_distances),
        }

    def load_state_dict(self, d: dict) -> None:
        self.ret = np.array(d["ret"], dtype=np.float64)
        self.length = np.array(d["length"], dtype=np.int64)
        self.streak = np.array(d["streak"], dtype=np.int64)
        self.success = np.array(d["success"], dtype=bool)
        w = int(d["window"])
        self.returns = deque(d["returns"], maxlen=w)
        self.lengths = deque(d["lengths"], maxlen=w)
        self.successes = deque(d["successes"], maxlen=w)
        self.final_distances = deque(d["final_distances"], maxlen=w)


def collect_rollout(env, obs, policy: GaussianPolicy, value_net: Mlp, T: int,
                    rng: np.random.Generator, tracker: EpisodeTracker | None = None):
    """Run ``T`` vectorized control steps; returns ``(buffer, next_obs)``."""
    N = env.num_envs
    buf = RolloutBuffer.empty(T, N)
    for t in range(T):
        mean = policy.mean(obs)
        action = sample_action(mean, policy.log_std, rng)
        buf.observations[t] = obs
        buf.actions[t] = action
        buf.log_probs[t] = gaussian_log_prob(mean, policy.log_std, action)
        buf.values[t] = value_net(obs)[:, 0]
        res = env.step_all(action)
        buf.rewards[t] = res.reward
        buf.terminated[t] = res.terminated
        buf.truncated[t] = res.truncated
        if res.truncated.any():
            idx = np.flatnonzero(res.truncated)
            buf.bootstrap_values[t, idx] = value_net(res.final_observation[idx])[:, 0]
        if tracker is not None:
            tracker.update(res.reward, res.goal_reached, res.distance, res.done)
        obs = res.observation
    buf.last_values = value_net(obs)[:, 0]
    return buf, obs


def compute_gae(buf: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    """Fill ``advantages`` and ``returns``.

    A terminated step bootstraps from zero, a truncated step from the critic
    value of its true final state; either way the recursion stops there because
    the next stored step belongs to a fresh episode.
    """
    T, N = buf.shape
    adv = np.zeros((T, N))
    next_adv = np.zeros(N)
    for t in range(T - 1, -1, -1):
        next_value = buf.last_values if t == T - 1 else buf.values[t + 1]
        next_value = np.where(buf.truncated[t], buf.bootstrap_values[t], next_value)
        alive = 1.0 - buf.terminated[t]
        cont = 1.0 - (buf.terminated[t] | buf.truncated[t])
        delta = buf.rewards[t] + gamma * next_value * alive - buf.values[t]
        next_adv = delta + gamma * lam * cont * next_adv
        adv[t] = next_adv
    buf.advantages = adv
    buf.returns = adv + buf.values
    return buf


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


def ppo_loss_and_grads(policy: GaussianPolicy, value_net: Mlp, batch: dict, cfg: PpoConfig):
    """Total PPO loss on one minibatch with exact gradients.

    ``batch`` holds flat arrays ``obs, actions, log_probs, advantages, returns``.
    Gradient keys are ``pi.<param>`` and ``vf.<param>``.
    """
    obs, act = batch["obs"], batch["actions"]
    adv, ret = batch["advantages"], batch["returns"]
    B = obs.shape[0]
    eps = cfg.clip_epsilon

    mean, pcache = policy.mlp.forward(obs)
    logp = gaussian_log_prob(mean, policy.log_std, act)
    ratio = np.exp(logp - batch["log_probs"])
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
    entropy = gaussian_entropy(policy.log_std)

    values, vcache = value_net.forward(obs)
    verr = values[:, 0] - ret
    value_loss = float(np.mean(verr * verr))
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    # the min picks the unclipped branch, or the clipped one while it is not saturated
    passes = (surr1 <= surr2) | ((ratio >= 1.0 - eps) & (ratio <= 1.0 + eps))
    dlogp = np.where(passes, -adv * ratio / B, 0.0)
    dmean, dlogstd = gaussian_log_prob_grads(mean, policy.log_std, act)
    grads = {f"pi.{k}": g for k, g in policy.mlp.backward(pcache, dlogp[:, None] * dmean).items()}
    grads["pi.log_std"] = (dlogp[:, None] * dlogstd).sum(axis=0) - cfg.entropy_coef
    dvalue = (2.0 * cfg.value_coef / B) * verr
    grads.update({f"vf.{k}": g for k, g in value_net.backward(vcache, dvalue[:, None]).items()})

    info = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
        "approx_kl": float(np.mean((ratio - 1.0) - (logp - batch["log_probs"]))),
    }
    return total, grads, info


def agent_params(policy: GaussianPolicy, value_net: Mlp) -> dict[str, np.ndarray]:
    params = {f"pi.{k}": v for k, v in policy.params.items()}
    params.update({f"vf.{k}": v for k, v in value_net.params.items()})
    return params


def ppo_update(buf: RolloutBuffer, policy: GaussianPolicy, value_net: Mlp, optimizer: Adam,
               cfg: PpoConfig, rng: np.random.Generator) -> dict[str, float]:
    if buf.advantages is None:
        raise ValueError("compute_gae must run before ppo_update")
    T, N = buf.shape
    adv = buf.advantages.reshape(-1)
    if cfg.advantage_normalization and adv.size > 1:
        adv = normalize_advantages(adv)
    flat = {
        "obs": buf.observations.reshape(T * N, OBS_DIM),
        "actions": buf.actions.reshape(T * N, ACT_DIM),
        "log_probs": buf.log_probs.reshape(-1),
        "advantages": adv,
        "returns": buf.returns.reshape(-1),
    }
    params = agent_params(policy, value_net)
    mb_size = (T * N) // cfg.minibatches
    sums: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(T * N)
        for m in range(cfg.minibatches):
            idx = perm[m * mb_size:(m + 1) * mb_size]
            batch = {k: v[idx] for k, v in flat.items()}
            loss, grads, info = ppo_loss_and_grads(policy, value_net, batch, cfg)
            if not math.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite PPO loss: {info}")
            clip_grad_norm(grads, cfg.max_grad_norm)
            optimizer.step(params, grads)
            policy.clamp_log_std()
            for k, v in info.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in sums.items()}


class Trainer:
    """Owns the env, the two networks, the optimizer and every RNG of a run."""

    def __init__(self, env_cfg: EnvConfig, ppo_cfg: PpoConfig, seed: int = 0,
                 env_factory: Callable | None = None):
        ppo_cfg.validate(env_cfg.num_envs)
        self.env_cfg = dataclasses.replace(env_cfg, seed=seed)
        self.ppo_cfg = ppo_cfg
        self.seed = seed
        self.env = (env_factory or QuadNavEnv)(self.env_cfg)
        init_rng = np.random.default_rng([seed, 1])
        self.policy = GaussianPolicy(OBS_DIM, ACT_DIM, ppo_cfg.hidden, init_rng,
                                     log_std_init=ppo_cfg.log_std_init)
        self.value_net = Mlp(OBS_DIM, 1, ppo_cfg.hidden, init_rng, out_gain=1.0)
        self.params = agent_params(self.policy, self.value_net)
        self.optimizer = Adam(self.params, lr=ppo_cfg.learning_rate)
        self.rng = np.random.default_rng([seed, 2])
        self.tracker = EpisodeTracker(self.env.num_envs)
        self.obs = self.env.observe()
        self.iteration = 0
        self.env_steps = 0
        self.elapsed = 0.0

    @property
    def steps_per_iteration(self) -> int:
        return self.ppo_cfg.rollout_length * self.env.num_envs

    @property
    def finished(self) -> bool:
        return self.env_steps >= self.ppo_cfg.total_env_steps

    def run_iteration(self) -> TrainMetrics:
        cfg = self.ppo_cfg
        t0 = time.perf_counter()
        buf, self.obs = collect_rollout(self.env, self.obs, self.policy, self.value_net,
                                        cfg.rollout_length, self.rng, self.tracker)
        compute_gae(buf, cfg.gamma, cfg.gae_lambda)
        stats = ppo_update(buf, self.policy, self.value_net, self.optimizer, cfg, self.rng)
        self.iteration += 1
        self.env_steps += buf.rewards.size
        self.elapsed += time.perf_counter() - t0
        return TrainMetrics(
            iteration=self.iteration,
            env_steps=self.env_steps,
            mean_reward_per_step=float(buf.rewards.mean()),
            **self.tracker.summary(),
            **stats,
            wall_clock=self.elapsed,
        )


class MetricsWriter:
    """Append-only metrics CSV with a fixed header."""

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        if not append or not self.path.exists():
            with open(self.path, "w", newline="", encoding="utf-8") as f:
                f.write(METRICS_HEADER_COMMENT + "\n")
                csv.writer(f, lineterminator="\n").writerow(METRIC_FIELDS)

    def append(self, m: TrainMetrics) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(m.row())
            f.flush()
            os.fsync(f.fileno())


def truncate_metrics(path: Path, iteration: int) -> None:
    """Drop rows past ``iteration`` (rows written after the checkpoint being resumed)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines(keepends=True)
    keep = []
    for line in lines:
        if line.startswith("#") or line.startswith("iteration,"):
            keep.append(line)
            continue
        if int(line.split(",", 1)[0]) <= iteration:
            keep.append(line)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text("".join(keep), encoding="utf-8")
    os.replace(tmp, path)


def read_metrics(path) -> list[dict[str, float]]:
    text = Path(path).read_text(encoding="utf-8")
    body = "".join(l for l in io.StringIO(text) if not l.startswith("#"))
    return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(io.StringIO(body))]


def train(env_cfg: EnvConfig, ppo_cfg: PpoConfig, seed: int, output_dir,
          checkpoint_interval: int = 50, resume: str | Path | None = None,
          max_iterations: int | None = None, log: Callable[[str], None] | None = print,
          config_hash: str = "") -> Trainer:
    """Collect -> GAE -> update until the env-step budget is spent.

    Writes ``metrics.csv`` and checkpoints (``checkpoint_<iter>.qnc`` plus
    ``checkpoint_latest.qnc``) into ``output_dir``.
    """
    from .checkpoint import load_checkpoint, save_checkpoint

    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    if resume is not None:
        trainer = load_checkpoint(resume, expected_hash=None)
        if metrics_path.exists():
            truncate_metrics(metrics_path, trainer.iteration)
        writer = MetricsWriter(metrics_path, append=True)
    else:
        trainer = Trainer(env_cfg, ppo_cfg, seed)
        writer = MetricsWriter(metrics_path)

    def checkpoint():
        path = out / f"checkpoint_{trainer.iteration:06d}.qnc"
        save_checkpoint(trainer, path, config_hash=config_hash)
        save_checkpoint(trainer, out / "checkpoint_latest.qnc", config_hash=config_hash)

    done_iters = 0
    try:
        while not trainer.finished and (max_iterations is None or done_iters < max_iterations):
            m = trainer.run_iteration()
            writer.append(m)
            done_iters += 1
            if log is not None:
                log(f"iter {m.iteration:5d}  env-steps {m.env_steps:10d}  "
                    f"return {m.mean_episodic_return:9.3f}  goal-rate {m.goal_reach_rate:5.3f}")
            if checkpoint_interval and trainer.iteration % checkpoint_interval == 0:
                checkpoint()
    finally:
        trainer.env.close()
    if not checkpoint_interval or trainer.iteration % checkpoint_interval:
        checkpoint()
    return trainer
