"""Independent oracles shared by the test modules."""

from __future__ import annotations

import math

import numpy as np


def random_unit_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def quat_matrix_oracle(q):
    """Body->world rotation matrix of a unit (w, x, y, z) quaternion, textbook form."""
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle_matrix(axis, angle):
    """Rodrigues' formula; no quaternions involved."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def finite_difference_grad(f, param: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = param[idx]
        param[idx] = old + h
        fp = f()
        param[idx] = old - h
        fm = f()
        param[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise |a-n| / max(|a|, |n|, floor); the floor keeps ~0 entries from dividing by 0."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def brute_force_advantages(rewards, values, terminated, truncated, bootstrap, last_values, gamma):
    """λ=1 advantages by explicit discounted sums, one env column at a time."""
    T, N = rewards.shape
    adv = np.zeros((T, N))
    for n in range(N):
        for t in range(T):
            total = 0.0
            disc = 1.0
            k = t
            while True:
                total += disc * rewards[k, n]
                disc *= gamma
                if terminated[k, n]:
                    break
                if truncated[k, n]:
                    total += disc * bootstrap[k, n]
                    break
                if k == T - 1:
                    total += disc * last_values[n]
                    break
                k += 1
            adv[t, n] = total - values[t, n]
    return adv


def random_gae_case(rng, max_len: int = 100, n_envs: int = 3):
    """Random rewards/values with sparse terminations and truncations (never both at once)."""
    T = int(rng.integers(1, max_len + 1))
    shape = (T, n_envs)
    rewards = rng.normal(size=shape)
    values = rng.normal(size=shape)
    bootstrap = rng.normal(size=shape)
    terminated = rng.random(shape) < 0.05
    truncated = (rng.random(shape) < 0.05) & ~terminated
    bootstrap[~truncated] = 0.0
    return rewards, values, terminated, truncated, bootstrap, rng.normal(size=n_envs)


def make_buffer(rewards, values, terminated, truncated, bootstrap, last_values):
    from quadnav.ppo import RolloutBuffer

    T, N = rewards.shape
    buf = RolloutBuffer.empty(T, N)
    buf.rewards[:] = rewards
    buf.values[:] = values
    buf.terminated[:] = terminated
    buf.truncated[:] = truncated
    buf.bootstrap_values[:] = bootstrap
    buf.last_values = np.asarray(last_values, dtype=float)
    return buf


def ppo_loss_oracle(params, batch, value_coef, entropy_coef, clip_epsilon=0.2):
    """Clipped-surrogate PPO loss written out directly in extended precision.

    ``params`` uses the ``pi.*`` / ``vf.*`` keys of ``quadnav.ppo.agent_params``.
    Running in ``np.longdouble`` pushes the rounding noise of a central
    difference with h=1e-6 about three orders of magnitude below float64.
    """
    ld = np.longdouble
    P = {k: np.asarray(v, dtype=ld) for k, v in params.items()}
    obs = np.asarray(batch["obs"], dtype=ld)

    def mlp(prefix):
        h = np.maximum(obs @ P[prefix + "W1"] + P[prefix + "b1"], 0)
        h = np.maximum(h @ P[prefix + "W2"] + P[prefix + "b2"], 0)
        return h @ P[prefix + "W3"] + P[prefix + "b3"]

    mean = mlp("pi.")
    log_std = P["pi.log_std"]
    act = np.asarray(batch["actions"], dtype=ld)
    z = (act - mean) / np.exp(log_std)
    two_pi = 2 * np.arccos(ld(-1))
    logp = -np.sum(z * z / 2 + log_std + np.log(two_pi) / 2, axis=1)
    ratio = np.exp(logp - np.asarray(batch["log_probs"], dtype=ld))
    adv = np.asarray(batch["advantages"], dtype=ld)
    clipped = np.clip(ratio, 1 - ld(clip_epsilon), 1 + ld(clip_epsilon))
    policy_loss = -np.mean(np.minimum(ratio * adv, clipped * adv))
    verr = mlp("vf.")[:, 0] - np.asarray(batch["returns"], dtype=ld)
    entropy = np.sum(log_std + (1 + np.log(two_pi)) / 2)
    return policy_loss + ld(value_coef) * np.mean(verr * verr) - ld(entropy_coef) * entropy


def oracle_gradient(params, batch, value_coef, entropy_coef, h: float = 1e-6):
    """Central differences of ``ppo_loss_oracle`` for every parameter entry."""
    ld = np.longdouble
    work = {k: np.asarray(v, dtype=ld).copy() for k, v in params.items()}
    out = {}
    for k, arr in work.items():
        g = np.zeros(arr.shape, dtype=ld)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + ld(h)
            fp = ppo_loss_oracle(work, batch, value_coef, entropy_coef)
            arr[idx] = old - ld(h)
            fm = ppo_loss_oracle(work, batch, value_coef, entropy_coef)
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * ld(h))
        out[k] = g.astype(np.float64)
    return out


def ppo_gradient_case(seed: int, hidden: int = 5):
    """Tiny policy/value pair and a T=4, N=2 minibatch (8 rows).

    Old log-probs are jittered so some ratios land outside the clip range.
    """
    from quadnav.net import GaussianPolicy, Mlp, gaussian_log_prob
    from quadnav.ppo import agent_params

    rng = np.random.default_rng(seed)
    policy = GaussianPolicy(12, 4, hidden, rng, log_std_init=0.0)
    value_net = Mlp(12, 1, hidden, rng)
    params = agent_params(policy, value_net)
    for p in params.values():
        p += rng.normal(scale=0.3, size=p.shape)
    B = 8
    obs = rng.normal(size=(B, 12))
    mean = policy.mean(obs)
    actions = mean + rng.normal(size=(B, 4)) * np.exp(policy.log_std)
    old_logp = gaussian_log_prob(mean, policy.log_std, actions) + rng.normal(scale=0.3, size=B)
    batch = {"obs": obs, "actions": actions, "log_probs": old_logp,
             "advantages": rng.normal(size=B), "returns": rng.normal(size=B)}
    return policy, value_net, params, batch


GRADIENT_TERMS = {
    "policy": dict(value_coef=0.0, entropy_coef=0.0),
    "value": dict(value_coef=0.5, entropy_coef=0.0, zero_adv=True),
    "entropy": dict(value_coef=0.0, entropy_coef=0.01, zero_adv=True),
    "total": dict(value_coef=0.5, entropy_coef=0.01),
}


def ppo_gradient_errors(seed: int, terms=tuple(GRADIENT_TERMS), hidden: int = 5):
    """Max elementwise relative error of the analytic PPO gradients per loss term.

    Also returns, under ``"loss_mismatch"``, the largest gap between the
    package's float64 loss and the extended-precision oracle loss, which shows
    the finite differences are taken of the same function.
    """
    from quadnav.ppo import PpoConfig, ppo_loss_and_grads

    policy, value_net, params, batch = ppo_gradient_case(seed, hidden)
    errors = {"loss_mismatch": 0.0}
    for term in terms:
        kw = dict(GRADIENT_TERMS[term])
        b = dict(batch)
        if kw.pop("zero_adv", False):
            b["advantages"] = np.zeros_like(b["advantages"])
        total, grads, _ = ppo_loss_and_grads(policy, value_net, b, PpoConfig(**kw))
        oracle_total = float(ppo_loss_oracle(params, b, **kw))
        errors["loss_mismatch"] = max(errors["loss_mismatch"], abs(total - oracle_total))
        numeric = oracle_gradient(params, b, **kw)
        errors[term] = max(max_relative_error(grads[k], numeric[k]) for k in params)
    return errors


class BanditEnv:
    """One-step task: fixed observation, reward -||a - a*||^2, every step terminates."""

    TARGET = np.array([0.3, -0.5, 0.2, 0.7])

    def __init__(self, cfg):
        self.num_envs = cfg.num_envs
        self.obs = np.tile(np.linspace(-0.5, 0.5, 12), (self.num_envs, 1))

    def observe(self):
        return self.obs.copy()

    def step_all(self, actions):
        from quadnav.env import StepResult

        n = self.num_envs
        reward = -np.sum((np.asarray(actions) - self.TARGET) ** 2, axis=1)
        return StepResult(self.obs.copy(), reward, np.ones(n, dtype=bool), np.zeros(n, dtype=bool),
                          np.zeros((n, 4)), np.zeros(n), np.zeros(n, dtype=bool), self.obs.copy())

    def close(self):
        pass


def run_bandit(max_iterations: int = 500, num_envs: int = 16, seed: int = 0, tol: float = 0.05):
    """Train PPO on the bandit; returns (iterations used, final distance of the mean action)."""
    from quadnav.env import EnvConfig
    from quadnav.ppo import PpoConfig, Trainer

    tr = Trainer(EnvConfig(num_envs=num_envs), PpoConfig(), seed=seed, env_factory=BanditEnv)
    obs = tr.env.observe()[:1]
    err = float(np.linalg.norm(tr.policy.mean(obs)[0] - BanditEnv.TARGET))
    for it in range(1, max_iterations + 1):
        tr.run_iteration()
        err = float(np.linalg.norm(tr.policy.mean(obs)[0] - BanditEnv.TARGET))
        if err <= tol:
            return it, err
    return max_iterations, err
