"""Checkpoint container.

Layout::

    QUADNAV-CHECKPOINT\\n
    <one line of JSON header>\\n
    <payload: little-endian float64 arrays, concatenated in header order>

The header carries the format version, config hash, counters, both configs, the
sampling RNG state and an ``arrays`` table of ``{name, shape, offset}`` entries
(offsets in bytes from the payload start). Integer and boolean arrays are
stored as float64 and cast back on load.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import numpy as np

from .dynamics import BodyParams
from .env import EnvConfig
from .net import GaussianPolicy, Mlp, LAYER_KEYS

MAGIC = b"QUADNAV-CHECKPOINT\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def env_config_to_dict(cfg: EnvConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return json.loads(json.dumps(d))


def env_config_from_dict(d: dict) -> EnvConfig:
    d = dict(d)
    d["body"] = BodyParams(**d["body"])
    return EnvConfig(**d)


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _pack(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        table.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {**header, "arrays": table, "payload_bytes": offset}
    return MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(chunks)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a quadnav checkpoint")
    end = raw.index(b"\n", len(MAGIC))
    try:
        header = json.loads(raw[len(MAGIC):end].decode("utf-8"))
    except ValueError as err:
        raise CheckpointError(f"corrupt checkpoint header in {path}") from err
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version {header.get('format_version')} != supported {FORMAT_VERSION}"
        )
    payload = raw[end + 1:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"truncated checkpoint payload in {path}")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[entry["name"]] = np.frombuffer(
            payload, dtype="<f8", count=count, offset=entry["offset"]
        ).reshape(shape).astype(np.float64)
    return header, arrays


def save_checkpoint(trainer, path, config_hash: str = "") -> None:
    arrays: dict[str, np.ndarray] = {}
    for k in LAYER_KEYS:
        arrays[f"policy.{k}"] = trainer.policy.mlp.params[k]
    arrays["policy.log_std"] = trainer.policy.log_std
    for k in LAYER_KEYS:
        arrays[f"value.{k}"] = trainer.value_net.params[k]
    for k in trainer.params:
        arrays[f"adam.m.{k}"] = trainer.optimizer.m[k]
        arrays[f"adam.v.{k}"] = trainer.optimizer.v[k]
    env = trainer.env
    arrays["env.position"] = env.state.position
    arrays["env.orientation"] = env.state.orientation
    arrays["env.lin_vel"] = env.state.lin_vel
    arrays["env.ang_vel"] = env.state.ang_vel
    arrays["env.goal"] = env.goal
    arrays["env.step_count"] = env.step_count
    arrays["env.episode_count"] = env.episode_count
    tracker = trainer.tracker.state_dict()
    for k in ("ret", "length", "streak", "success", "returns", "lengths", "successes",
              "final_distances"):
        arrays[f"tracker.{k}"] = np.asarray(tracker[k], dtype=np.float64)

    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "seed": trainer.seed,
        "iteration": trainer.iteration,
        "env_steps": trainer.env_steps,
        "env_total_steps": env.total_env_steps,
        "elapsed": trainer.elapsed,
        "env_config": env_config_to_dict(trainer.env_cfg),
        "ppo_config": dataclasses.asdict(trainer.ppo_cfg),
        "adam": {"t": trainer.optimizer.t, "lr": trainer.optimizer.lr,
                 "beta1": trainer.optimizer.beta1, "beta2": trainer.optimizer.beta2,
                 "eps": trainer.optimizer.eps},
        "rng_state": trainer.rng.bit_generator.state,
        "tracker_window": tracker["window"],
        "policy": {"hidden": trainer.policy.mlp.hidden},
    }
    write_atomic(path, _pack(header, arrays))


def _restore_mlp(mlp: Mlp, arrays, prefix: str) -> None:
    for k in LAYER_KEYS:
        src = arrays[f"{prefix}.{k}"]
        if src.shape != mlp.params[k].shape:
            raise CheckpointError(f"shape mismatch for {prefix}.{k}")
        mlp.params[k][...] = src


def load_policy(path) -> tuple[GaussianPolicy, EnvConfig, dict]:
    """Load only what evaluation needs: the policy and the env config."""
    header, arrays = read_container(path)
    env_cfg = env_config_from_dict(header["env_config"])
    W1 = arrays["policy.W1"]
    policy = GaussianPolicy(W1.shape[0], arrays["policy.W3"].shape[1], W1.shape[1])
    _restore_mlp(policy.mlp, arrays, "policy")
    policy.log_std[...] = arrays["policy.log_std"]
    return policy, env_cfg, header


def load_checkpoint(path, expected_hash: str | None = None):
    """Rebuild a :class:`~quadnav.ppo.Trainer` exactly as it was saved."""
    from .ppo import PpoConfig, Trainer

    header, arrays = read_container(path)
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CheckpointError("checkpoint was produced by a different config")
    env_cfg = env_config_from_dict(header["env_config"])
    ppo_cfg = PpoConfig(**header["ppo_config"])
    trainer = Trainer(env_cfg, ppo_cfg, header["seed"])

    _restore_mlp(trainer.policy.mlp, arrays, "policy")
    trainer.policy.log_std[...] = arrays["policy.log_std"]
    _restore_mlp(trainer.value_net, arrays, "value")
    opt = trainer.optimizer
    for k in trainer.params:
        opt.m[k][...] = arrays[f"adam.m.{k}"]
        opt.v[k][...] = arrays[f"adam.v.{k}"]
    a = header["adam"]
    opt.t, opt.lr, opt.beta1, opt.beta2, opt.eps = a["t"], a["lr"], a["beta1"], a["beta2"], a["eps"]

    env = trainer.env
    env.state.position[...] = arrays["env.position"]
    env.state.orientation[...] = arrays["env.orientation"]
    env.state.lin_vel[...] = arrays["env.lin_vel"]
    env.state.ang_vel[...] = arrays["env.ang_vel"]
    env.goal[...] = arrays["env.goal"]
    env.step_count[...] = arrays["env.step_count"].astype(np.int64)
    env.episode_count[...] = arrays["env.episode_count"].astype(np.int64)
    env.total_env_steps = header["env_total_steps"]

    trainer.tracker.load_state_dict({
        "ret": arrays["tracker.ret"],
        "length": arrays["tracker.length"],
        "streak": arrays["tracker.streak"],
        "success": arrays["tracker.success"].astype(bool),
        "window": header["tracker_window"],
        "returns": arrays["tracker.returns"].tolist(),
        "lengths": [int(v) for v in arrays["tracker.lengths"]],
        "successes": [bool(v) for v in arrays["tracker.successes"]],
        "final_distances": arrays["tracker.final_distances"].tolist(),
    })
    trainer.rng.bit_generator.state = header["rng_state"]
    trainer.iteration = header["iteration"]
    trainer.env_steps = header["env_steps"]
    trainer.elapsed = header["elapsed"]
    trainer.obs = env.observe()
    return trainer
