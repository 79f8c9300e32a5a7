"""Run configuration: environment parameters, training hyperparameters, presets.

Config fields keep the units these systems are usually quoted in (MB, GHz,
dBm, MJ, dB, MHz).  Everything downstream computes in canonical SI units
(bits, seconds, hertz, joules, watts), exposed here as derived properties so
the conversion happens exactly once.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Mapping

ENV_VAR_PREFIX = "MECOFFLOAD_"

MB_BITS = 8e6        # decimal megabyte -> bits
GHZ = 1e9
MHZ = 1e6
MJ = 1e6

_RANGE_FIELDS = ("task_size_mb", "cycles_per_bit", "deadline_s", "gain_db")


@dataclass(frozen=True)
class EnvConfig:
    """Simulator parameters.  Range fields are (low, high), sampled uniformly."""

    num_users: int = 48
    num_servers: int = 3
    task_size_mb: tuple[float, float] = (1.0, 50.0)
    cycles_per_bit: tuple[float, float] = (300.0, 700.0)
    deadline_s: tuple[float, float] = (0.1, 1.0)
    local_freq_min_ghz: float = 0.4
    local_freq_max_ghz: float = 1.5
    tx_power_min_dbm: float = 1.0
    tx_power_max_dbm: float = 24.0
    battery_min_mj: float = 0.5
    battery_max_mj: float = 3.2
    z_max: int = 16
    num_cpus: int = 8
    server_storage_mb: float = 400.0
    server_freq_ghz: float = 4.0
    gain_db: tuple[float, float] = (5.0, 14.0)
    kappa: float = 5e-27
    bandwidth_mhz: float = 40.0
    num_subchannels: int = 10
    harvested_j: float = 1e-3
    rho1: float = 0.5
    rho2: float = 0.5
    slots_per_episode: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        for name in _RANGE_FIELDS:
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 2:
                raise ValueError(f"{name} must be a (low, high) pair, got {value}")
            if value[0] > value[1]:
                raise ValueError(f"{name} range is inverted: {value}")
            object.__setattr__(self, name, value)
        for name in ("num_users", "num_servers", "num_subchannels", "num_cpus",
                     "z_max", "slots_per_episode"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.local_freq_min_ghz > self.local_freq_max_ghz:
            raise ValueError("local frequency budget is inverted")
        if self.tx_power_min_dbm > self.tx_power_max_dbm:
            raise ValueError("tx power budget is inverted")
        if self.battery_min_mj > self.battery_max_mj:
            raise ValueError("battery thresholds are inverted")
        for name in ("kappa", "bandwidth_mhz", "server_freq_ghz",
                     "server_storage_mb", "harvested_j", "rho1", "rho2"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    # -- canonical SI values ------------------------------------------------

    @property
    def task_size_bits(self) -> tuple[float, float]:
        return (self.task_size_mb[0] * MB_BITS, self.task_size_mb[1] * MB_BITS)

    @property
    def local_freq_min_hz(self) -> float:
        return self.local_freq_min_ghz * GHZ

    @property
    def local_freq_max_hz(self) -> float:
        return self.local_freq_max_ghz * GHZ

    @property
    def battery_min_j(self) -> float:
        return self.battery_min_mj * MJ

    @property
    def battery_max_j(self) -> float:
        return self.battery_max_mj * MJ

    @property
    def storage_bits(self) -> float:
        return self.server_storage_mb * MB_BITS

    @property
    def server_freq_hz(self) -> float:
        return self.server_freq_ghz * GHZ

    @property
    def bandwidth_hz(self) -> float:
        return self.bandwidth_mhz * MHZ

    @property
    def deadline_max_s(self) -> float:
        return self.deadline_s[1]


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop hyperparameters."""

    episodes: int = 2000
    updates_per_episode: int = 1
    gamma: float = 0.99
    batch_size: int = 64
    buffer_capacity: int = 100_000
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    tau: float = 0.01
    noise_start: float = 0.2
    noise_decay: float = 0.999
    noise_floor: float = 0.01
    reward_weight: float = 0.5
    td_weight: float = 0.5
    priority_floor: float = 1e-6
    # ablation switch: replace the literal priority weighting of the critic
    # loss with standard inverse-importance correction weights
    importance_correction: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.updates_per_episode < 1:
            raise ValueError("updates_per_episode must be >= 1")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("batch_size/buffer_capacity inconsistent")
        if abs(self.reward_weight + self.td_weight - 1.0) > 1e-12:
            raise ValueError("reward_weight + td_weight must equal 1")
        if self.priority_floor <= 0:
            raise ValueError("priority_floor must be positive")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")


@dataclass(frozen=True)
class ExperimentPreset:
    """Named bundle of configs, policies and seeds for one experiment."""

    name: str
    env: EnvConfig
    train: TrainConfig
    policies: tuple[str, ...] = ("ucms",)
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("preset name must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("preset seeds must be unique")


ALL_POLICIES = ("ucms", "rd_ucms", "maddpg", "offload_cost", "deadline")

_STRESS_BMAX_MJ = 1.0 / MJ                      # 1 J battery cap
_STRESS_BMIN_MJ = _STRESS_BMAX_MJ * (0.5 / 3.2)  # keep the default threshold ratio

PRESETS: dict[str, ExperimentPreset] = {
    # Full-scale configuration: 48 users, 3 servers, 2000 episodes of 10 slots.
    "paper": ExperimentPreset(
        name="paper",
        env=EnvConfig(),
        train=TrainConfig(episodes=2000),
        policies=ALL_POLICIES,
        seeds=tuple(range(10)),
    ),
    # Desk-scale run that still shows the learning trend in a few minutes.
    "smoke": ExperimentPreset(
        name="smoke",
        env=EnvConfig(
            num_users=6,
            num_servers=2,
            z_max=4,
            num_cpus=2,
            num_subchannels=4,
            server_storage_mb=100.0,
        ),
        train=TrainConfig(episodes=300, updates_per_episode=4),
        policies=ALL_POLICIES,
        seeds=tuple(range(10)),
    ),
    # Long-horizon energy-stressed variant: tiny battery, energy-heavy cost.
    "stress": ExperimentPreset(
        name="stress",
        env=EnvConfig(
            battery_max_mj=_STRESS_BMAX_MJ,
            battery_min_mj=_STRESS_BMIN_MJ,
            rho1=1.0,
            rho2=5.0,
            slots_per_episode=100,
        ),
        train=TrainConfig(episodes=2000),
        policies=ALL_POLICIES,
        seeds=tuple(range(10)),
    ),
}


def _coerce(field_type: Any, raw: Any) -> Any:
    if isinstance(raw, list):
        return tuple(raw)
    return raw


def env_config_from_dict(doc: Mapping[str, Any]) -> EnvConfig:
    known = {f.name for f in fields(EnvConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown environment config keys: {sorted(unknown)}")
    return EnvConfig(**{k: _coerce(None, v) for k, v in doc.items()})


def train_config_from_dict(doc: Mapping[str, Any]) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**dict(doc))


def load_config(path: str) -> tuple[EnvConfig, TrainConfig]:
    """Load configs from a JSON document.

    Accepts either {"env": {...}, "train": {...}} or a flat document of
    environment keys only.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "env" in doc or "train" in doc:
        env = env_config_from_dict(doc.get("env", {}))
        train = train_config_from_dict(doc.get("train", {}))
    else:
        env = env_config_from_dict(doc)
        train = TrainConfig()
    return env, train


def apply_value_overrides(env: EnvConfig, train: TrainConfig,
                          overrides: Mapping[str, Any]) -> tuple[EnvConfig, TrainConfig]:
    """Apply key=value overrides by field name; env and train keys are disjoint."""
    env_fields = {f.name for f in fields(EnvConfig)}
    train_fields = {f.name for f in fields(TrainConfig)}
    env_kw: dict[str, Any] = {}
    train_kw: dict[str, Any] = {}
    for key, value in overrides.items():
        if key in env_fields:
            env_kw[key] = _coerce(None, value)
        elif key in train_fields:
            train_kw[key] = value
        else:
            raise ValueError(f"unknown config key: {key}")
    if env_kw:
        env = replace(env, **env_kw)
    if train_kw:
        train = replace(train, **train_kw)
    return env, train


def apply_env_var_overrides(env: EnvConfig, train: TrainConfig,
                            environ: Mapping[str, str] | None = None
                            ) -> tuple[EnvConfig, TrainConfig]:
    """Override any config field from MECOFFLOAD_<FIELD> environment variables."""
    environ = os.environ if environ is None else environ
    overrides: dict[str, Any] = {}
    names = {f.name for f in fields(EnvConfig)} | {f.name for f in fields(TrainConfig)}
    for name in names:
        raw = environ.get(ENV_VAR_PREFIX + name.upper())
        if raw is None:
            continue
        try:
            overrides[name] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[name] = raw
    return apply_value_overrides(env, train, overrides)


def configs_to_dict(env: EnvConfig, train: TrainConfig) -> dict[str, Any]:
    return {"env": asdict(env), "train": asdict(train)}
