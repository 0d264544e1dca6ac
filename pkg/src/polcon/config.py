"""Experiment configuration: one TOML (or JSON) tree, dotted-path overrides.

The file has four sections: [experiment], [ppo], [cascade], [synapse].
Unknown keys are rejected. The resolved configuration is written into
every run directory so any run can be replayed exactly.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .cascade import CascadeConfig
from .envs import ENV_NAMES
from .ppo import PpoConfig

AGENTS = ("pc", "clipped", "fixed_kl", "adaptive_kl", "synaptic")
PROTOCOLS = ("alternating", "single", "selfplay")
ENV_PAIRS = ("pointgoal", "pointdyn")
SCHEDULE_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)


class ConfigError(ValueError):
    pass


@dataclass
class SynapseConfig:
    n_beakers: int = 8
    g12: float = 0.01
    eta: float = 1.0

    def validate(self):
        if self.n_beakers < 2:
            raise ConfigError("synapse.n_beakers must be >= 2")
        if self.g12 < 0 or self.eta <= 0:
            raise ConfigError("synapse.g12 must be >= 0 and synapse.eta > 0")
        return self


@dataclass
class ExperimentConfig:
    protocol: str = "alternating"
    agent: str = "pc"
    env: str = "pointgoal"  # pair base name (alternating) or full env name
    seed: int = 0
    # desk-scale defaults: ~500k steps, ~50k-step switch blocks (10 switches),
    # rounded to multiples of the horizon
    total_steps: int = 495616
    switch_period: int = 45056
    schedule_factor: float = 1.0
    horizon: int = 512
    n_envs: int = 1
    gamma: float = 0.99
    lam: float = 0.95
    snapshot_every: int = 100  # updates; 0 disables periodic snapshots
    eval_episodes: int = 10
    max_episode_steps: int = 500  # self-play training episodes
    eval_max_episode_steps: int = 5000
    curriculum_frac: float = 0.15
    timing: str = "none"  # "wall" records real wall_ms but breaks byte-determinism
    ppo: PpoConfig = field(default_factory=PpoConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    synapse: SynapseConfig = field(default_factory=SynapseConfig)

    @property
    def steps_per_update(self):
        return self.horizon * self.n_envs

    @property
    def n_updates(self):
        return self.total_steps // self.steps_per_update

    @property
    def effective_switch_period(self):
        return int(round(self.switch_period * self.schedule_factor))

    @property
    def switch_every_updates(self):
        return self.effective_switch_period // self.steps_per_update

    def env_variants(self):
        if self.protocol == "alternating":
            return (f"{self.env}-a", f"{self.env}-b")
        return (self.env,)

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"experiment.protocol: unknown value {self.protocol!r}")
        if self.agent not in AGENTS:
            raise ConfigError(f"experiment.agent: unknown value {self.agent!r}")
        if self.protocol == "alternating":
            if self.env not in ENV_PAIRS:
                raise ConfigError(
                    f"experiment.env: alternating protocol needs a task pair "
                    f"{ENV_PAIRS}, got {self.env!r}"
                )
        elif self.protocol == "single":
            if self.env not in ENV_NAMES or self.env == "sumoline":
                raise ConfigError(
                    f"experiment.env: single protocol needs a single-agent task, "
                    f"got {self.env!r}"
                )
        else:
            if self.env != "sumoline":
                raise ConfigError("experiment.env: selfplay protocol requires 'sumoline'")
        if self.horizon < 1 or self.n_envs < 1:
            raise ConfigError("experiment.horizon and experiment.n_envs must be >= 1")
        if self.total_steps % self.steps_per_update != 0:
            raise ConfigError(
                f"experiment.total_steps ({self.total_steps}) must be a multiple of "
                f"horizon * n_envs ({self.steps_per_update})"
            )
        if self.protocol == "alternating":
            if self.effective_switch_period % self.steps_per_update != 0:
                raise ConfigError(
                    f"experiment.switch_period * schedule_factor "
                    f"({self.effective_switch_period}) must be a multiple of "
                    f"horizon * n_envs ({self.steps_per_update})"
                )
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.lam <= 1.0:
            raise ConfigError("experiment.gamma and experiment.lam must lie in [0, 1]")
        if self.timing not in ("none", "wall"):
            raise ConfigError(f"experiment.timing: unknown value {self.timing!r}")
        if not 0.0 < self.curriculum_frac <= 1.0:
            raise ConfigError("experiment.curriculum_frac must lie in (0, 1]")
        if self.eval_episodes < 1:
            raise ConfigError("experiment.eval_episodes must be >= 1")
        n_minibatches = (self.cascade.n_minibatches if self.agent == "pc"
                         else self.ppo.n_minibatches)
        if self.steps_per_update % n_minibatches != 0:
            raise ConfigError(
                f"n_minibatches ({n_minibatches}) must divide horizon * n_envs "
                f"({self.steps_per_update})"
            )
        try:
            self.ppo.validate()
            self.cascade.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.synapse.validate()
        return self


_SECTIONS = {"experiment": None, "ppo": PpoConfig, "cascade": CascadeConfig,
             "synapse": SynapseConfig}
# set by the harness, not by config files
_EXCLUDED_FIELDS = {"ppo": {"variant"}}


def _section_fields(section, cls):
    excluded = _EXCLUDED_FIELDS.get(section, set())
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in excluded}


def _coerce(section, key, value, current):
    target = type(current)
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1"):
            return True
        if str(value).lower() in ("false", "0"):
            return False
        raise ConfigError(f"{section}.{key}: expected boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            if isinstance(value, float) and value != int(value):
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key}: expected integer, got {value!r}") from None
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key}: expected number, got {value!r}") from None
    if isinstance(current, str):
        return str(value)
    raise ConfigError(f"{section}.{key}: unsupported value type {target.__name__}")


def from_dict(tree):
    """Build an ExperimentConfig from a nested dict, rejecting unknown keys."""
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a table")
    cfg = ExperimentConfig()
    for section, content in tree.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(content, dict):
            raise ConfigError(f"section [{section}] must be a table")
        target = cfg if section == "experiment" else getattr(cfg, section)
        known = _section_fields(section, type(target))
        for key, value in content.items():
            if key not in known or key in ("ppo", "cascade", "synapse"):
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _coerce(section, key, value, getattr(target, key)))
    return cfg


def apply_overrides(cfg, overrides):
    """Apply `section.key=value` (or `key=value` for [experiment]) pairs."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        path, _, raw = item.partition("=")
        parts = path.strip().split(".")
        if len(parts) == 1:
            section, key = "experiment", parts[0]
        elif len(parts) == 2:
            section, key = parts
        else:
            raise ConfigError(f"override path {path!r} too deep")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section in override: {section!r}")
        target = cfg if section == "experiment" else getattr(cfg, section)
        if not hasattr(target, key) or key in ("ppo", "cascade", "synapse") or \
                key in _EXCLUDED_FIELDS.get(section, set()):
            raise ConfigError(f"unknown key {section}.{key}")
        setattr(target, key, _coerce(section, key, raw.strip(), getattr(target, key)))
    return cfg


def load_config(path):
    path = str(path)
    try:
        if path.endswith(".json"):
            with open(path, "r", encoding="utf-8") as fh:
                tree = json.load(fh)
        else:
            with open(path, "rb") as fh:
                tree = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config file {path} failed to parse: {exc}") from None
    return from_dict(tree)


def resolved_dict(cfg):
    """Plain nested dict of the full resolved configuration."""
    out = {"experiment": {}, "ppo": {}, "cascade": {}, "synapse": {}}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in ("ppo", "cascade", "synapse"):
            continue
        out["experiment"][f.name] = getattr(cfg, f.name)
    for section in ("ppo", "cascade", "synapse"):
        sub = getattr(cfg, section)
        excluded = _EXCLUDED_FIELDS.get(section, set())
        for f in dataclasses.fields(sub):
            if f.name not in excluded:
                out[section][f.name] = getattr(sub, f.name)
    return out


def config_hash(cfg):
    """Content hash of (resolved config, seed); doubles as the run id."""
    blob = json.dumps(resolved_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def dump_resolved(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(resolved_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
