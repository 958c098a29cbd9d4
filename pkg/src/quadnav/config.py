"""Run configuration: one YAML file holding every env, PPO and eval setting."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dynamics import BodyParams
from .env import EnvConfig
from .ppo import PpoConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalDefaults:
    episodes: int = 256
    seed: int = 1000
    record: bool = False


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    eval: EvalDefaults = field(default_factory=EvalDefaults)
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_interval: int = 50


def to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    # tuples become lists so the YAML stays plain
    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v
    return plain(d)


def render(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{where}' must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in '{where}': {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid '{where}' section: {err}") from err


def from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    env = dict(data.pop("env", {}) or {})
    body = _build(BodyParams, env.pop("body", {}) or {}, "env.body")
    cfg = RunConfig(
        env=_build(EnvConfig, {**env, "body": body}, "env"),
        ppo=_build(PpoConfig, data.pop("ppo", {}) or {}, "ppo"),
        eval=_build(EvalDefaults, data.pop("eval", {}) or {}, "eval"),
        **data,
    )
    cfg.ppo.validate(cfg.env.num_envs)
    return cfg


def parse(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"config is not valid YAML: {err}") from err
    return from_dict(data)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text(encoding="utf-8"))


def config_hash(cfg: RunConfig) -> str:
    """Hash of everything that determines training results."""
    d = to_dict(cfg)
    key = yaml.safe_dump({"env": d["env"], "ppo": d["ppo"], "seed": d["seed"]}, sort_keys=True)
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


def _coerce(raw: str, current):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got '{raw}'")
    if isinstance(current, int):
        value = float(raw)
        if value != int(value):
            raise ConfigError(f"expected an integer, got '{raw}'")
        return int(value)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (list, tuple)):
        parts = [p for p in raw.replace(",", " ").split()]
        if len(parts) != len(current):
            raise ConfigError(f"expected {len(current)} values, got '{raw}'")
        return [float(p) for p in parts]
    return raw


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply ``{"env.num-envs": "8", ...}``-style overrides; dashes map to underscores."""
    d = to_dict(cfg)
    for dotted, raw in overrides.items():
        keys = [k.replace("-", "_") for k in dotted.split(".")]
        node = d
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown config key '{dotted}'")
            node = node[k]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(f"unknown config key '{dotted}'")
        try:
            node[keys[-1]] = _coerce(raw, node[keys[-1]])
        except ValueError as err:
            raise ConfigError(f"bad value for '{dotted}': {err}") from err
    return from_dict(d)


def parse_override_args(args: list[str]) -> dict[str, str]:
    """Turn ``['--env.num-envs', '8', '--ppo.gamma=0.9']`` into a mapping."""
    out: dict[str, str] = {}
    i = 0
    while i < len(args):
        arg = args[i]
        if not arg.startswith("--") or "." not in arg:
            raise ConfigError(f"unrecognized argument '{arg}'")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(args):
                raise ConfigError(f"missing value for '{arg}'")
            value = args[i + 1]
            i += 2
        out[key] = value
    return out
