"""Run configuration: one TOML file with [env], [features], [policy], [ppo] and [run] tables.

Every key has a default, so an empty file is a valid configuration.  Unknown
tables or keys are rejected.  Keys whose value is ``None`` are left out when
writing, which keeps ``load(dump(cfg)) == cfg``.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .envs import EnvConfig
from .features import FeatureSpec, make_feature_spec
from .policies import XiSpec, make_xi_spec
from .ppo import PpoConfig, Setup


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


@dataclass(frozen=True)
class FeatureConfig:
    mode: str = "rbf"
    points_per_axis: int = 5
    per_axis: bool = False
    scale: float = 1.0
    sigma_pos_mult: float = 1.0
    sigma_angle_mult: float = 1.0
    time_feature: bool = True


@dataclass(frozen=True)
class PolicyConfig:
    obs_mode: str = "rbf"
    points_per_axis: int = 5
    per_axis: bool = False
    shared: bool = False
    scale: float | None = None  # None picks the per-environment default
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    init_log_std: float = 0.0


@dataclass(frozen=True)
class RunMeta:
    out_dir: str = "runs/default"
    seed: int = 0
    eval_episodes: int = 50
    eval_agents: list[int] = field(default_factory=lambda: [25, 50, 100, 200])
    chaos_agents: list[int] = field(default_factory=lambda: [10, 100, 1000, 10000])
    chaos_horizon: int = 10
    chaos_replications: int = 200
    bench_dims: list[int] = field(default_factory=lambda: [2, 3, 4, 5])
    bench_steps: int = 20


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    run: RunMeta = field(default_factory=RunMeta)

    def setup(self) -> Setup:
        return Setup(self.env, feature_spec(self), xi_spec(self))

    def replace(self, **sections) -> "RunConfig":
        """Copy with per-section overrides: ``cfg.replace(env={"n_agents": 100})``."""
        kw = {}
        for name, over in sections.items():
            kw[name] = dataclasses.replace(getattr(self, name), **over)
        return dataclasses.replace(self, **kw)


SECTIONS = {"env": EnvConfig, "features": FeatureConfig, "policy": PolicyConfig,
            "ppo": PpoConfig, "run": RunMeta}


def feature_spec(cfg: RunConfig) -> FeatureSpec:
    f = cfg.features
    return make_feature_spec(cfg.env, mode=f.mode, points_per_axis=f.points_per_axis,
                             per_axis=f.per_axis, scale=f.scale, sigma_pos_mult=f.sigma_pos_mult,
                             sigma_angle_mult=f.sigma_angle_mult, time_feature=f.time_feature)


def xi_spec(cfg: RunConfig) -> XiSpec:
    p = cfg.policy
    return make_xi_spec(cfg.env, points_per_axis=p.points_per_axis, per_axis=p.per_axis,
                        shared=p.shared, obs_mode=p.obs_mode, scale=p.scale)


def _coerce(tp, value, where: str):
    # TOML has no distinction between 1 and 1.0 for our purposes
    if tp in ("float", "float | None") and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp.startswith("list") and not isinstance(value, list):
        raise ConfigError(f"{where}: expected a list")
    return value


def from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config table(s): {sorted(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        table = data.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        known = {f.name: f for f in fields(cls)}
        bad = set(table) - set(known)
        if bad:
            raise ConfigError(f"unknown key(s) in [{name}]: {sorted(bad)}")
        kw = {k: _coerce(str(known[k].type), v, f"{name}.{k}") for k, v in table.items()}
        try:
            parts[name] = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return RunConfig(**parts)


def to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in SECTIONS:
        table = dataclasses.asdict(getattr(cfg, name))
        out[name] = {k: v for k, v in table.items() if v is not None}
    return out


def loads(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return from_dict(data)


def load(path: str | Path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from exc
    try:
        return loads(text)
    except ConfigError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))


def default_config(env: str = "vicsek", manifold: str = "torus", **env_kw) -> RunConfig:
    """Defaults for one of the three environments (Aggregation takes ``dim``)."""
    if env == "vicsek":
        e = EnvConfig(env="vicsek", manifold=manifold, **env_kw)
    elif env == "kuramoto":
        e = EnvConfig(**{"env": "kuramoto", "manifold": manifold, "v0": 0.0, "sigma_phi": 0.0, **env_kw})
    elif env == "aggregation":
        from .envs import aggregation_config

        e = aggregation_config(manifold=manifold, **env_kw)
    else:
        raise ConfigError(f"unknown environment {env!r}")
    return RunConfig(env=e)
