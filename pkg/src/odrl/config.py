"""Flat ``key = value`` run configuration files.

One setting per line, ``#`` starts a comment. Keys cover the environment
(``env_id grid_w grid_h cell_px max_steps``), every agent setting, and a few
run-level settings listed in :data:`RUN_KEYS`. ``seed`` is the agent seed.
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .agents import AgentConfig
from .envsim import EnvConfig
from .exceptions import ConfigError

ENV_KEYS = ("env_id", "grid_w", "grid_h", "cell_px", "max_steps")
AGENT_KEYS = tuple(f.name for f in dataclasses.fields(AgentConfig))
RUN_KEYS = {
    "total_frames": int,
    "checkpoint": str,
    "frames_dir": str,
    "templates": str,
    "layout": str,
    "state_seed": int,
    "state_steps": int,
    "agents": str,
    "seeds": str,
    "n_states": int,
    "n_frames": int,
}
ALL_KEYS = frozenset(ENV_KEYS) | frozenset(AGENT_KEYS) | frozenset(RUN_KEYS)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Raw ``{key: value-string}`` from config text; later lines win."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def read_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {str(path)!r}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def parse_overrides(items) -> dict:
    """``["k=v", ...]`` to a dict, with the same key check as files."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = (p.strip() for p in item.split("=", 1))
        if key not in ALL_KEYS:
            raise ConfigError(f"unknown key {key!r} in override")
        out[key] = value
    return out


def _coerce(key: str, value: str, kind):
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key} (expected {kind.__name__})") from None


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


@dataclass
class RunConfig:
    env: EnvConfig
    agent: AgentConfig
    run: dict = field(default_factory=dict)

    def get(self, key: str, default=None):
        return self.run.get(key, default)

    def require(self, *keys: str) -> None:
        for key in keys:
            if key not in self.run:
                raise ConfigError(f"missing required field {key!r}")


def build_run_config(raw: dict, required=()) -> RunConfig:
    """Typed configs from raw strings; ``required`` keys must be present."""
    for key in required:
        if key not in raw:
            raise ConfigError(f"missing required field {key!r}")
    env_types = _field_types(EnvConfig)
    agent_types = _field_types(AgentConfig)
    env_kw = {k: _coerce(k, raw[k], env_types[k]) for k in ENV_KEYS if k in raw}
    agent_kw = {k: _coerce(k, raw[k], agent_types[k]) for k in AGENT_KEYS if k in raw}
    run = {k: _coerce(k, raw[k], t) for k, t in RUN_KEYS.items() if k in raw}
    if "seed" in agent_kw and not 0 <= agent_kw["seed"] < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {agent_kw['seed']}")
    return RunConfig(EnvConfig(**env_kw), AgentConfig(**agent_kw), run)


def format_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config_text` for a :class:`RunConfig`."""
    lines = [f"{k} = {getattr(cfg.env, k)}" for k in ENV_KEYS]
    lines += [f"{k} = {getattr(cfg.agent, k)}" for k in AGENT_KEYS]
    lines += [f"{k} = {v}" for k, v in cfg.run.items()]
    return "\n".join(lines) + "\n"
