"""Dense networks with hand-written backprop, a diagonal Gaussian head and Adam.

The MLPs have exactly two ReLU hidden layers and a linear output. Weights are
stored as ``(fan_in, fan_out)`` so a forward pass is ``x @ W + b`` on a batch of
row vectors.
"""

from __future__ import annotations

import math

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

LAYER_KEYS = ("W1", "b1", "W2", "b2", "W3", "b3")


def orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


class Mlp:
    """in_dim -> hidden -> hidden -> out_dim, ReLU between hidden layers."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int = 128,
                 rng: np.random.Generator | None = None, out_gain: float = 1.0):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden
        rng = np.random.default_rng(0) if rng is None else rng
        hidden_gain = math.sqrt(2.0)
        self.params = {
            "W1": orthogonal(rng, in_dim, hidden, hidden_gain),
            "b1": np.zeros(hidden),
            "W2": orthogonal(rng, hidden, hidden, hidden_gain),
            "b2": np.zeros(hidden),
            "W3": orthogonal(rng, hidden, out_dim, out_gain),
            "b3": np.zeros(out_dim),
        }

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected batch of width {self.in_dim}, got shape {x.shape}")
        p = self.params
        z1 = x @ p["W1"] + p["b1"]
        h1 = np.maximum(z1, 0.0)
        z2 = h1 @ p["W2"] + p["b2"]
        h2 = np.maximum(z2, 0.0)
        y = h2 @ p["W3"] + p["b3"]
        return y, (x, z1, h1, z2, h2)

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, grad_out) -> dict[str, np.ndarray]:
        """Gradients of ``sum(grad_out * y)`` with respect to every parameter."""
        x, z1, h1, z2, h2 = cache
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise ValueError("output gradient does not match the cached batch")
        p = self.params
        g = {"W3": h2.T @ grad_out, "b3": grad_out.sum(axis=0)}
        dz2 = (grad_out @ p["W3"].T) * (z2 > 0)
        g["W2"] = h1.T @ dz2
        g["b2"] = dz2.sum(axis=0)
        dz1 = (dz2 @ p["W2"].T) * (z1 > 0)
        g["W1"] = x.T @ dz1
        g["b1"] = dz1.sum(axis=0)
        return g


class GaussianPolicy:
    """Mean from an MLP, state-independent log standard deviation."""

    def __init__(self, obs_dim: int = 12, act_dim: int = 4, hidden: int = 128,
                 rng: np.random.Generator | None = None, log_std_init: float = 0.0):
        self.mlp = Mlp(obs_dim, act_dim, hidden, rng, out_gain=0.01)
        self.log_std = np.full(act_dim, float(log_std_init))

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {**self.mlp.params, "log_std": self.log_std}

    def mean(self, obs) -> np.ndarray:
        return self.mlp(obs)

    def clamp_log_std(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)


def gaussian_log_prob(mean, log_std, action) -> np.ndarray:
    z = (action - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z + 2.0 * log_std + LOG_2PI, axis=-1)


def gaussian_entropy(log_std, batch: int | None = None):
    ent = float(np.sum(log_std + 0.5 * (1.0 + LOG_2PI)))
    return ent if batch is None else np.full(batch, ent)


def gaussian_head(mean, log_std, action):
    """Return ``(log_prob, entropy)`` per batch row."""
    mean = np.asarray(mean, dtype=np.float64)
    return gaussian_log_prob(mean, log_std, action), gaussian_entropy(log_std, mean.shape[0])


def gaussian_log_prob_grads(mean, log_std, action):
    """d log_prob / d mean (per row) and d log_prob / d log_std (per row)."""
    inv_var = np.exp(-2.0 * log_std)
    diff = action - mean
    return diff * inv_var, diff * diff * inv_var - 1.0


def sample_action(mean, log_std, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    return mean + np.exp(log_std) * rng.standard_normal(mean.shape)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


class Adam:
    """Adam with bias correction; updates the parameter arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
