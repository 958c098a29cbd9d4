"""Vectorized point-to-point quadrotor navigation task.

Each of the ``num_envs`` environments holds one quadrotor and one goal. A control
step maps a normalized 4-vector action to a thrust/torque wrench, holds it for
``decimation`` physics steps, then emits the 12-dim body-frame observation, the
composite shaped reward and the termination flags.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    BodyParams,
    RigidBodyState,
    SimulationDivergenceError,
    WrenchCommand,
    step_rigid_body,
)
from .geom import rotate_world_to_body, subtract_frame_transforms, yaw_quat

OBS_DIM = 12
ACT_DIM = 4
COMPONENT_NAMES = ("lin_vel", "ang_vel", "distance", "goal")
THREADS_ENV_VAR = "QUADNAV_THREADS"

_DOWN = np.array([0.0, 0.0, -1.0])


@dataclass
class EnvConfig:
    num_envs: int = 4096
    physics_dt: float = 0.01
    decimation: int = 2
    episode_length: int = 500
    workspace_min: tuple[float, float, float] = (-2.0, -2.0, 0.1)
    workspace_max: tuple[float, float, float] = (2.0, 2.0, 3.0)
    goal_box_min: tuple[float, float, float] = (-2.0, -2.0, 0.5)
    goal_box_max: tuple[float, float, float] = (2.0, 2.0, 2.0)
    spawn_box_min: tuple[float, float, float] = (-2.0, -2.0, 0.5)
    spawn_box_max: tuple[float, float, float] = (2.0, 2.0, 2.0)
    thrust_to_weight: float = 1.9
    moment_scale: float = 0.01
    w_lin_vel: float = -0.05
    w_ang_vel: float = -0.01
    w_distance: float = 15.0
    w_goal: float = 10.0
    alpha: float = 0.8
    goal_radius: float = 0.2
    goal_vel_threshold: float = 0.1
    # the goal bonus is multiplied by the control period like every other term
    goal_bonus_dt_scaled: bool = True
    body: BodyParams = field(default_factory=BodyParams)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.body, dict):
            self.body = BodyParams(**self.body)
        for name in ("workspace_min", "workspace_max", "goal_box_min", "goal_box_max",
                     "spawn_box_min", "spawn_box_max"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.num_envs < 1:
            raise ValueError("num_envs must be >= 1")
        if self.decimation < 1 or self.episode_length < 1:
            raise ValueError("decimation and episode_length must be >= 1")
        if self.physics_dt <= 0:
            raise ValueError("physics_dt must be positive")
        if self.w_lin_vel > 0 or self.w_ang_vel > 0 or self.w_distance < 0 or self.w_goal < 0:
            raise ValueError("velocity weights must be <= 0 and goal/distance weights >= 0")
        ws_lo, ws_hi = np.array(self.workspace_min), np.array(self.workspace_max)
        for lo, hi, name in ((self.goal_box_min, self.goal_box_max, "goal box"),
                             (self.spawn_box_min, self.spawn_box_max, "spawn box")):
            lo, hi = np.array(lo), np.array(hi)
            if np.any(lo > hi):
                raise ValueError(f"{name} min exceeds max")
            if np.any(lo < ws_lo) or np.any(hi > ws_hi):
                raise ValueError(f"{name} must lie inside the workspace")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def control_dt(self) -> float:
        return self.physics_dt * self.decimation

    @property
    def reward_weights(self) -> np.ndarray:
        return np.array([self.w_lin_vel, self.w_ang_vel, self.w_distance, self.w_goal])


def map_action(action, cfg: EnvConfig) -> WrenchCommand:
    """Clamp to [-1, 1]; a0 -> thrust in [0, t/w · weight], a1..a3 -> body torques."""
    a = np.nan_to_num(np.asarray(action, dtype=np.float64), nan=0.0)
    a = np.clip(a, -1.0, 1.0)
    thrust = (a[..., 0] + 1.0) / 2.0 * cfg.body.mass * cfg.body.gravity * cfg.thrust_to_weight
    torque = a[..., 1:] * cfg.moment_scale
    return WrenchCommand(thrust, torque)


def build_observation(state: RigidBodyState, goal) -> np.ndarray:
    q = state.orientation
    lin_vel_b = rotate_world_to_body(q, state.lin_vel)
    gravity_b = rotate_world_to_body(q, np.broadcast_to(_DOWN, state.lin_vel.shape))
    goal_b = subtract_frame_transforms(state.position, q, goal)
    return np.concatenate([lin_vel_b, state.ang_vel, gravity_b, goal_b], axis=-1)


def compute_reward(state: RigidBodyState, goal, cfg: EnvConfig):
    """Return ``(reward, components, goal_reached, distance)``.

    ``components`` holds the four weighted, dt-scaled terms (linear-velocity
    penalty, angular-velocity penalty, distance shaping, goal bonus) so that
    ``reward == components.sum(-1)``.
    """
    dt = cfg.control_dt
    distance = np.linalg.norm(state.position - np.asarray(goal, dtype=np.float64), axis=-1)
    speed_sq = np.sum(state.lin_vel * state.lin_vel, axis=-1)
    spin_sq = np.sum(state.ang_vel * state.ang_vel, axis=-1)
    goal_reached = (distance < cfg.goal_radius) & (np.sqrt(speed_sq) < cfg.goal_vel_threshold)
    bonus_dt = dt if cfg.goal_bonus_dt_scaled else 1.0
    components = np.stack(
        [
            dt * cfg.w_lin_vel * speed_sq,
            dt * cfg.w_ang_vel * spin_sq,
            dt * cfg.w_distance * (1.0 - np.tanh(distance / cfg.alpha)),
            bonus_dt * cfg.w_goal * goal_reached.astype(np.float64),
        ],
        axis=-1,
    )
    reward = components[..., 0] + components[..., 1] + components[..., 2] + components[..., 3]
    return reward, components, goal_reached, distance


def check_termination(state: RigidBodyState, step_count, cfg: EnvConfig):
    """Crash (outside workspace or non-finite) terminates; timeout truncates."""
    lo = np.asarray(cfg.workspace_min)
    hi = np.asarray(cfg.workspace_max)
    pos = state.position
    outside = np.any((pos < lo) | (pos > hi), axis=-1)
    terminated = outside | ~state.finite_mask()
    truncated = np.asarray(step_count) >= cfg.episode_length
    return terminated, truncated


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV_VAR, "1") or 1)
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


@dataclass
class StepResult:
    """Batched step output; every array has the env axis first."""

    observation: np.ndarray
    reward: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    components: np.ndarray
    distance: np.ndarray
    goal_reached: np.ndarray
    # observation of the true final state for envs that were auto-reset
    final_observation: np.ndarray

    @property
    def done(self) -> np.ndarray:
        return self.terminated | self.truncated


class QuadNavEnv:
    """``num_envs`` independent navigation tasks stepped in lock-step.

    Every reset draws from its own generator seeded by ``(seed, env index,
    episode counter)``, so a given env's trajectory does not depend on how many
    other envs run alongside it or on how the batch is split across threads.
    """

    def __init__(self, cfg: EnvConfig, auto_reset: bool = True, threads: int | None = None):
        cfg.validate()
        self.cfg = cfg
        self.num_envs = cfg.num_envs
        self.auto_reset = auto_reset
        self.threads = resolve_threads(threads)
        n = self.num_envs
        self.state = RigidBodyState.at_rest(n)
        self.goal = np.zeros((n, 3))
        self.step_count = np.zeros(n, dtype=np.int64)
        self.episode_count = np.zeros(n, dtype=np.int64)
        self.total_env_steps = 0
        self._pool = None
        self.reset()

    # ------------------------------------------------------------------ resets
    def episode_rng(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, int(index), int(self.episode_count[index])])

    def reset_env(self, index: int) -> np.ndarray:
        if not 0 <= index < self.num_envs:
            raise IndexError(f"env index {index} out of range")
        cfg = self.cfg
        rng = self.episode_rng(index)
        pos = rng.uniform(cfg.spawn_box_min, cfg.spawn_box_max)
        yaw = rng.uniform(-math.pi, math.pi)
        goal = rng.uniform(cfg.goal_box_min, cfg.goal_box_max)
        self.state.position[index] = pos
        self.state.orientation[index] = yaw_quat(yaw)
        self.state.lin_vel[index] = 0.0
        self.state.ang_vel[index] = 0.0
        self.goal[index] = goal
        self.step_count[index] = 0
        return build_observation(self.state.take(index), goal)

    def reset(self) -> np.ndarray:
        for i in range(self.num_envs):
            self.reset_env(i)
        return self.observe()

    def set_env_state(self, index: int, state: RigidBodyState, goal) -> None:
        """Overwrite one env's body state and goal (used for replay and scripted tests)."""
        self.state.put(index, state)
        self.goal[index] = goal

    def observe(self) -> np.ndarray:
        return build_observation(self.state, self.goal)

    # ------------------------------------------------------------------ stepping
    def _integrate(self, sl: slice, cmd: WrenchCommand) -> None:
        cfg = self.cfg
        state = self.state.take(sl)
        sub_cmd = cmd.take(sl)
        for _ in range(cfg.decimation):
            state = step_rigid_body(state, sub_cmd, cfg.body, cfg.physics_dt)
        self.state.put(sl, state)

    def _chunks(self, idx: np.ndarray) -> list[np.ndarray]:
        n_chunks = min(self.threads, len(idx))
        return [c for c in np.array_split(idx, n_chunks) if len(c)]

    def step_all(self, actions, thrust_scale=None, disturbance=None, active=None) -> StepResult:
        """Advance every env (or only ``active`` ones) by one control step.

        ``thrust_scale`` multiplies the commanded thrust per env and
        ``disturbance`` adds a world-frame force; both are held constant over
        the physics sub-steps. Inactive envs are left untouched and report
        zero reward.
        """
        cfg = self.cfg
        n = self.num_envs
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (n, ACT_DIM):
            raise ValueError(f"expected actions of shape {(n, ACT_DIM)}, got {actions.shape}")
        cmd = map_action(actions, cfg)
        if thrust_scale is not None:
            cmd.thrust = np.maximum(cmd.thrust * np.asarray(thrust_scale, dtype=np.float64), 0.0)
        if disturbance is not None:
            cmd.disturbance_world = np.broadcast_to(
                np.asarray(disturbance, dtype=np.float64), (n, 3)
            ).copy()
        idx = np.arange(n) if active is None else np.flatnonzero(active)

        try:
            chunks = self._chunks(idx)
            if len(chunks) <= 1 or self.threads <= 1:
                for c in chunks:
                    self._integrate(c, cmd)
            else:
                if self._pool is None:
                    self._pool = ThreadPoolExecutor(max_workers=self.threads)
                list(self._pool.map(lambda c: self._integrate(c, cmd), chunks))
        except SimulationDivergenceError as err:
            bad = idx[err.env_indices] if err.env_indices is not None else None
            raise SimulationDivergenceError(
                f"simulation diverged in env(s) {np.atleast_1d(bad).tolist()} "
                f"at env-step {self.total_env_steps}",
                env_indices=bad,
                state=err.state,
            ) from err

        mask = np.zeros(n, dtype=bool)
        mask[idx] = True
        self.step_count[idx] += 1
        self.total_env_steps += len(idx)

        reward, components, goal_reached, distance = compute_reward(self.state, self.goal, cfg)
        terminated, truncated = check_termination(self.state, self.step_count, cfg)
        terminated &= mask
        truncated &= mask & ~terminated
        reward = np.where(mask, reward, 0.0)
        components = np.where(mask[:, None], components, 0.0)
        goal_reached &= mask
        obs = self.observe()
        final_obs = obs.copy()

        if self.auto_reset:
            for i in np.flatnonzero(terminated | truncated):
                self.episode_count[i] += 1
                obs[i] = self.reset_env(i)

        return StepResult(obs, reward, terminated, truncated, components, distance,
                          goal_reached, final_obs)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None
