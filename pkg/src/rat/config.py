"""Flat experiment configuration: TOML or JSON files, ``key=value`` overrides, seeds."""

import json
import os
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .optimizer import RatConfig

ENVS = ("point_mass", "chain")
METHODS = ("rat", "vanilla_pg", "exact_tnpg", "cg_fvp")
ABLATION_AXES = ("batch_size", "kaczmarz_iters", "damping", "no_transform", "no_clip")
SEED_ENV_VAR = "RAT_SEED"

# stream ids for SeedSequence(seed, spawn_key=(stream,))
STREAM_INIT = 0
STREAM_ROLLOUT = 1
STREAM_OPTIMIZER = 2
STREAM_EVAL = 3
STREAM_DATA = 4


class ConfigError(ValueError):
    """Invalid configuration file, key or value."""


@dataclass(frozen=True)
class ExperimentConfig:
    # seeds: an explicit list wins over the single master seed
    seed: int = 0
    seeds: tuple = ()

    # training
    env: str = "point_mass"
    method: str = "rat"
    shared_network: bool = False
    n_updates: int = 30
    n_steps: int = 64
    n_envs: int = 16
    gamma: float = 0.99
    gae_lambda: float = 0.95
    hidden_sizes: tuple = ()
    critic_hidden_sizes: tuple = (32,)
    log_std_init: float = 0.0
    normalize_obs: bool = True
    popart: bool = True
    popart_decay: float = 0.99999
    eval_episodes: int = 32
    cg_iters: int = 10
    pm_dt: float = 0.05
    pm_damping: float = 0.95
    pm_step_limit: int = 100
    chain_states: int = 5
    chain_slip: float = 0.1
    chain_horizon: int = 20

    # optimiser (mirrors RatConfig)
    lam: float = 0.1
    pi_lr: float = 0.05
    vf_lr: float = 0.001
    shared_lr: float = 0.1
    pi_clip: float = 0.5
    vf_clip: float = 5.0
    batch_size: int = 256
    epochs_per_update: int = 8
    inner_iters: int = 0
    mode: str = "interleaved"
    advantage_source: str = "pre_normalized"
    average_gram: bool = True
    persist_g: bool = False
    transform: bool = True
    clip: bool = True
    clip_mode: str = "min"
    surrogate: str = "ratio"

    # ablation sweep
    ablate_axis: str = "no_transform"
    ablate_values: tuple = (False, True)

    # Gaussian likelihood illustration
    n_samples: int = 2000
    sample_mean: float = 0.0
    sample_std: float = 1.0
    illus_lam: float = 0.1
    illus_batch_size: int = 256
    illus_steps: int = 16

    # Kaczmarz verification
    n_systems: int = 20
    n_runs: int = 200
    n_iters: int = 200
    sys_rows: int = 240
    sys_params: int = 24
    sys_block: int = 4
    sys_lam: float = 0.1
    noise_std: float = 0.1
    sweep_lams: tuple = (0.01, 0.1, 1.0)
    sweep_rank: int = 2

    figures: bool = False

    def __post_init__(self):
        _validate(self)

    @property
    def seed_list(self):
        return tuple(self.seeds) if self.seeds else (self.seed,)

    def rat_config(self):
        names = {f.name for f in fields(RatConfig)}
        return RatConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_DEFAULTS = ExperimentConfig.__dataclass_fields__


def _validate(cfg):
    if cfg.env not in ENVS:
        raise ConfigError(f"env must be one of {ENVS}, got {cfg.env!r}")
    if cfg.method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {cfg.method!r}")
    if cfg.ablate_axis not in ABLATION_AXES:
        raise ConfigError(f"ablate_axis must be one of {ABLATION_AXES}, got {cfg.ablate_axis!r}")
    for name in ("n_updates", "n_steps", "n_envs", "eval_episodes", "n_samples", "illus_batch_size",
                 "illus_steps", "n_systems", "n_runs", "n_iters", "sys_rows", "sys_params",
                 "sys_block", "sweep_rank", "pm_step_limit", "chain_states", "chain_horizon", "cg_iters"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be at least 1")
    if not 0.0 <= cfg.gamma < 1.0 or not 0.0 <= cfg.gae_lambda <= 1.0:
        raise ConfigError("gamma must lie in [0, 1) and gae_lambda in [0, 1]")
    if cfg.pm_dt <= 0 or not 0.0 < cfg.pm_damping <= 1.0:
        raise ConfigError("pm_dt must be positive and pm_damping in (0, 1]")
    if not 0.0 < cfg.popart_decay < 1.0:
        raise ConfigError("popart_decay must lie in (0, 1)")
    if cfg.illus_lam <= 0 or cfg.sys_lam <= 0 or cfg.sample_std <= 0 or cfg.noise_std < 0:
        raise ConfigError("damping and standard deviations must be positive")
    if cfg.illus_batch_size > cfg.n_samples:
        raise ConfigError("illus_batch_size exceeds n_samples")
    if cfg.sys_rows % cfg.sys_block:
        raise ConfigError("sys_rows must be a multiple of sys_block")
    if any(s < 0 for s in cfg.seed_list):
        raise ConfigError("seeds must be non-negative")
    try:
        cfg.rat_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _coerce(name, value):
    default = _DEFAULTS[name].default
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false"):
                    raise ValueError(value)
                return low == "true"
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            return tuple(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc
    return value


def from_mapping(mapping, base=None):
    """Build a config from a flat mapping; unknown keys and nested tables are rejected."""
    unknown = sorted(set(mapping) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, value in mapping.items():
        if isinstance(value, dict):
            raise ConfigError(f"nested tables are not supported ({key})")
        values[key] = _coerce(key, value)
    try:
        return replace(base or ExperimentConfig(), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_file(path):
    """Parse a ``.json`` file or a TOML file into a flat mapping."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if str(path).endswith(".json"):
            data = json.loads(raw.decode("utf-8"))
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a key-value mapping")
    return data


def parse_override(text):
    """``key=value`` with the value read as JSON when possible, else as a string."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key, value


def resolve(path=None, overrides=(), seed_flag=None, environ=None):
    """Config file, then overrides, then the seed (flag > ``RAT_SEED`` > file)."""
    environ = os.environ if environ is None else environ
    mapping = load_file(path) if path else {}
    for text in overrides:
        key, value = parse_override(text)
        mapping[key] = value
    seed = None
    if seed_flag is not None:
        seed = seed_flag
    elif environ.get(SEED_ENV_VAR, "") != "":
        try:
            seed = int(environ[SEED_ENV_VAR])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from exc
    if seed is not None:
        mapping["seed"] = seed
        mapping["seeds"] = []
    return from_mapping(mapping)


def stream_rng(seed, stream):
    """Independent generator for ``(seed, stream)``; stable under worker count."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))
