"""Deterministic policy evaluation, perturbation sweeps and trajectory recording.

All ``n_episodes`` episodes run side by side as one non-resetting vectorized
env; episode ``i`` is env ``i``, seeded by ``(seed, i, 0)``. The policy acts
with its mean action. An episode counts as a success once ``goal_reached`` has
held for ``GOAL_HOLD_STEPS`` consecutive control steps.
"""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import ACT_DIM, EnvConfig, QuadNavEnv
from .ppo import GOAL_HOLD_STEPS

PERTURBATION_STREAM = 0x5E7  # tag separating noise/wind draws from reset draws


@dataclass
class PerturbationConfig:
    thrust_noise_std: float = 0.0  # fraction of commanded thrust, per control step
    wind_force: tuple[float, float, float] = (0.0, 0.0, 0.0)  # N, world frame
    # False: constant wind_force. True: per episode, a random horizontal direction
    # with magnitude |wind_force|.
    wind_random_direction: bool = False

    def __post_init__(self):
        self.wind_force = tuple(float(v) for v in self.wind_force)
        if self.thrust_noise_std < 0:
            raise ValueError("thrust_noise_std must be >= 0")

    @property
    def wind_magnitude(self) -> float:
        return float(np.linalg.norm(self.wind_force))

    @property
    def label(self) -> str:
        wind = "rand" if self.wind_random_direction else "x".join(f"{v:g}" for v in self.wind_force)
        return f"noise={self.thrust_noise_std:g};wind={self.wind_magnitude:g}({wind})"


@dataclass
class EvalReport:
    episodes: int
    successes: int
    success_rate: float
    mean_final_distance: float
    median_final_distance: float
    mean_time_to_goal: float  # s, successful episodes only (nan if none)
    mean_return: float
    component_means: tuple[float, float, float, float]  # per-episode sums, averaged
    mean_final_norm_distance_success: float  # d/d0 at episode end, successful episodes
    mean_final_lateral_error: float  # horizontal distance to goal at episode end
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    final_distances: np.ndarray = field(default=None, repr=False)
    success_mask: np.ndarray = field(default=None, repr=False)
    trajectories: list | None = field(default=None, repr=False)

    def same_results(self, other: "EvalReport") -> bool:
        """Bitwise equality of every aggregate and per-episode result."""
        a, b = self.csv_row(), other.csv_row()
        a.pop("label"), b.pop("label")
        for k in ("thrust_noise_std", "wind_x", "wind_y", "wind_z", "wind_random_direction"):
            a.pop(k), b.pop(k)
        return (a == b and np.array_equal(self.final_distances, other.final_distances)
                and np.array_equal(self.success_mask, other.success_mask))

    def csv_row(self) -> dict:
        p = self.perturbation
        return {
            "label": p.label,
            "thrust_noise_std": repr(float(p.thrust_noise_std)),
            "wind_x": repr(p.wind_force[0]),
            "wind_y": repr(p.wind_force[1]),
            "wind_z": repr(p.wind_force[2]),
            "wind_random_direction": int(p.wind_random_direction),
            "episodes": self.episodes,
            "successes": self.successes,
            "success_rate": repr(self.success_rate),
            "mean_final_distance": repr(self.mean_final_distance),
            "median_final_distance": repr(self.median_final_distance),
            "mean_time_to_goal": repr(self.mean_time_to_goal),
            "mean_return": repr(self.mean_return),
            "comp_lin_vel": repr(self.component_means[0]),
            "comp_ang_vel": repr(self.component_means[1]),
            "comp_distance": repr(self.component_means[2]),
            "comp_goal": repr(self.component_means[3]),
            "mean_final_norm_distance_success": repr(self.mean_final_norm_distance_success),
            "mean_final_lateral_error": repr(self.mean_final_lateral_error),
        }

    def summary(self) -> str:
        p = self.perturbation
        lines = [
            f"perturbation        {p.label}",
            f"episodes            {self.episodes}",
            f"success rate        {self.success_rate:.3f} ({self.successes}/{self.episodes})",
            f"final distance      mean {self.mean_final_distance:.3f} m, "
            f"median {self.median_final_distance:.3f} m",
            f"time to goal        {self.mean_time_to_goal:.2f} s (successful episodes)",
            f"episodic return     {self.mean_return:.3f}",
            "reward components   lin_vel {:.3f}  ang_vel {:.3f}  distance {:.3f}  goal {:.3f}"
            .format(*self.component_means),
            f"final d/d0 (succ.)  {self.mean_final_norm_distance_success:.3f}",
            f"lateral error       {self.mean_final_lateral_error:.3f} m",
        ]
        return "\n".join(lines)


REPORT_FIELDS = tuple(EvalReport(0, 0, 0.0, 0.0, 0.0, 0.0, 0.0, (0.0,) * 4, 0.0, 0.0).csv_row())

TRAJECTORY_FIELDS = (
    "step", "time", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz",
    "wx", "wy", "wz", "a0", "a1", "a2", "a3", "thrust_scale", "fx_dist", "fy_dist", "fz_dist",
    "r_lin_vel", "r_ang_vel", "r_distance", "r_goal", "reward", "distance", "norm_distance",
    "goal_x", "goal_y", "goal_z",
)


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def _wind_forces(pert: PerturbationConfig, rngs) -> np.ndarray:
    n = len(rngs)
    if pert.wind_random_direction:
        mag = pert.wind_magnitude
        out = np.zeros((n, 3))
        for i, rng in enumerate(rngs):
            heading = rng.uniform(-math.pi, math.pi)
            out[i] = (mag * math.cos(heading), mag * math.sin(heading), 0.0)
        return out
    return np.tile(np.asarray(pert.wind_force, dtype=np.float64), (n, 1))


def evaluate(policy, env_cfg: EnvConfig, n_episodes: int,
             perturbation: PerturbationConfig | None = None, seed: int = 0,
             record: bool = False, policy_fn: Callable | None = None,
             step_hook: Callable | None = None) -> EvalReport:
    """Roll out ``n_episodes`` deterministic episodes.

    ``policy_fn(obs) -> actions`` overrides the policy's mean action and
    ``step_hook(env, step)`` may edit the env before each control step; both
    exist for scripted checks.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    pert = perturbation or PerturbationConfig()
    cfg = dataclasses.replace(env_cfg, num_envs=n_episodes, seed=seed)
    env = QuadNavEnv(cfg, auto_reset=False, threads=1)
    act = policy_fn or policy.mean
    dt = cfg.control_dt

    noisy = pert.thrust_noise_std > 0
    windy = pert.wind_magnitude > 0
    rngs = [np.random.default_rng([seed, i, PERTURBATION_STREAM]) for i in range(n_episodes)]
    wind = _wind_forces(pert, rngs) if windy else None

    n = n_episodes
    obs = env.observe()
    d0 = np.linalg.norm(env.state.position - env.goal, axis=1)
    final_distance = d0.copy()
    final_lateral = np.linalg.norm((env.state.position - env.goal)[:, :2], axis=1)
    done = np.zeros(n, dtype=bool)
    streak = np.zeros(n, dtype=np.int64)
    success = np.zeros(n, dtype=bool)
    success_step = np.full(n, -1, dtype=np.int64)
    returns = np.zeros(n)
    comp_sums = np.zeros((n, 4))
    rows: list[list] | None = [[] for _ in range(n)] if record else None

    for step in range(cfg.episode_length):
        if done.all():
            break
        if step_hook is not None:
            step_hook(env, step)
            obs = env.observe()
        actions = np.asarray(act(obs), dtype=np.float64).reshape(n, ACT_DIM)
        scale = None
        if noisy:
            scale = np.ones(n)
            for i in np.flatnonzero(~done):
                scale[i] = 1.0 + pert.thrust_noise_std * rngs[i].standard_normal()
        if record:
            pre = env.state.copy()
            pre_goal = env.goal.copy()
        active = ~done
        res = env.step_all(actions, thrust_scale=scale, disturbance=wind, active=active)

        returns += res.reward
        comp_sums += res.components
        streak = np.where(res.goal_reached, streak + 1, 0)
        newly = active & ~success & (streak >= GOAL_HOLD_STEPS)
        success_step[newly] = env.step_count[newly]
        success |= newly
        final_distance = np.where(active, res.distance, final_distance)
        lateral = np.linalg.norm((env.state.position - env.goal)[:, :2], axis=1)
        final_lateral = np.where(active, lateral, final_lateral)

        if record:
            for i in np.flatnonzero(active):
                d = float(np.linalg.norm(pre.position[i] - pre_goal[i]))
                rows[i].append([
                    step, step * dt, *pre.position[i], *pre.orientation[i], *pre.lin_vel[i],
                    *pre.ang_vel[i], *actions[i], 1.0 if scale is None else scale[i],
                    *(np.zeros(3) if wind is None else wind[i]), *res.components[i],
                    res.reward[i], d, d / d0[i], *pre_goal[i],
                ])
        done |= res.terminated | res.truncated
        obs = res.observation
    env.close()

    succ_idx = np.flatnonzero(success)
    report = EvalReport(
        episodes=n,
        successes=int(success.sum()),
        success_rate=float(success.sum()) / n,
        mean_final_distance=float(np.mean(final_distance)),
        median_final_distance=float(np.median(final_distance)),
        mean_time_to_goal=_mean((success_step[succ_idx] - (GOAL_HOLD_STEPS - 1)) * dt),
        mean_return=float(np.mean(returns)),
        component_means=tuple(float(v) for v in comp_sums.mean(axis=0)),
        mean_final_norm_distance_success=_mean(final_distance[succ_idx] / d0[succ_idx]),
        mean_final_lateral_error=float(np.mean(final_lateral)),
        perturbation=pert,
        final_distances=final_distance,
        success_mask=success,
    )
    if record:
        report.trajectories = [np.array(r, dtype=np.float64).reshape(-1, len(TRAJECTORY_FIELDS))
                               for r in rows]
    return report


def evaluate_checkpoint(path, n_episodes: int, perturbation: PerturbationConfig | None = None,
                        seed: int = 0, record: bool = False) -> EvalReport:
    from .checkpoint import load_policy

    policy, env_cfg, _ = load_policy(path)
    return evaluate(policy, env_cfg, n_episodes, perturbation, seed, record)


def record_trajectory(report: EvalReport, episode: int) -> np.ndarray:
    """Per-control-step record of one episode (columns: ``TRAJECTORY_FIELDS``)."""
    if report.trajectories is None:
        raise ValueError("evaluation ran without recording")
    return report.trajectories[episode]


def replay_trajectory(traj: np.ndarray, env_cfg: EnvConfig) -> np.ndarray:
    """Re-simulate recorded actions from the recorded initial state.

    Returns the positions at the start of every recorded step, comparable with
    ``traj[:, px:pz]``.
    """
    from .dynamics import RigidBodyState

    col = {name: i for i, name in enumerate(TRAJECTORY_FIELDS)}
    env = QuadNavEnv(dataclasses.replace(env_cfg, num_envs=1), auto_reset=False, threads=1)
    first = traj[0]
    state = RigidBodyState(
        first[col["px"]:col["pz"] + 1].copy(), first[col["qw"]:col["qz"] + 1].copy(),
        first[col["vx"]:col["vz"] + 1].copy(), first[col["wx"]:col["wz"] + 1].copy(),
    )
    env.set_env_state(0, state, first[col["goal_x"]:col["goal_z"] + 1])
    positions = [env.state.position[0].copy()]
    for row in traj[:-1]:
        env.step_all(row[col["a0"]:col["a3"] + 1][None, :],
                     thrust_scale=np.array([row[col["thrust_scale"]]]),
                     disturbance=row[col["fx_dist"]:col["fz_dist"] + 1][None, :])
        positions.append(env.state.position[0].copy())
    return np.array(positions)


def sweep_perturbations(policy, env_cfg: EnvConfig, grid: Sequence[PerturbationConfig],
                        n_episodes: int, seed: int = 0) -> list[EvalReport]:
    """One report per grid point; every point reuses ``seed`` so results are paired."""
    if not grid:
        raise ValueError("perturbation grid is empty")
    return [evaluate(policy, env_cfg, n_episodes, p, seed) for p in grid]


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    from .checkpoint import write_atomic

    import io

    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    write_atomic(path, buf.getvalue().encode("utf-8"))


def write_trajectory_csv(traj: np.ndarray, path) -> None:
    from .checkpoint import write_atomic

    lines = [",".join(TRAJECTORY_FIELDS)]
    for row in traj:
        vals = [str(int(row[0]))] + [repr(float(v)) for v in row[1:]]
        lines.append(",".join(vals))
    write_atomic(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_trajectories(report: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    paths = []
    for i, traj in enumerate(report.trajectories or []):
        p = out / f"trajectory_{i:03d}.csv"
        write_trajectory_csv(traj, p)
        paths.append(p)
    return paths
