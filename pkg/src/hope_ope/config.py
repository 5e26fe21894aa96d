"""Experiment configuration: versioned JSON schema, strict validation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .env_sepsis import SimConfig
from .estimators import ESTIMATOR_NAMES

SCHEMA_VERSION = 1

POLICY_NAMES = ("optimal", "always_antibiotics", "never_antibiotics")
H_MODES = ("elbow", "all_critical", "fixed")
CHANNELS = ("sparse", "reconstructed", "ground_truth")
BEHAVIOR_MODES = ("stored", "cloned")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    n_trajectories: int = 10_000
    policies: tuple[str, ...] = POLICY_NAMES
    estimators: tuple[str, ...] = ESTIMATOR_NAMES
    k_neighbors: int = 5
    h_mode: str = "all_critical"
    h: float | None = None
    bootstrap_b: int = 500
    reward_channels: dict[str, str] = field(default_factory=dict)
    behavior_mode: str = "stored"
    smoothing: float = 0.01
    solver: str = "closed_form"
    ridge: float = 1e-6
    rand_hope_repeats: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.n_trajectories < 1:
            raise ConfigError("n_trajectories must be positive")
        if self.bootstrap_b < 1:
            raise ConfigError("bootstrap_b must be positive")
        if self.k_neighbors < 1:
            raise ConfigError("k_neighbors must be positive")
        if self.rand_hope_repeats < 1:
            raise ConfigError("rand_hope_repeats must be positive")
        for name in self.policies:
            if name not in POLICY_NAMES:
                raise ConfigError(f"unknown policy {name!r}")
        for name in self.estimators:
            if name not in ESTIMATOR_NAMES:
                raise ConfigError(f"unknown estimator {name!r}")
        if self.h_mode not in H_MODES:
            raise ConfigError(f"unknown h_mode {self.h_mode!r}")
        if self.h_mode == "fixed" and self.h is None:
            raise ConfigError("h_mode 'fixed' requires the field 'h'")
        if self.behavior_mode not in BEHAVIOR_MODES:
            raise ConfigError(f"unknown behavior_mode {self.behavior_mode!r}")
        if self.solver not in ("closed_form", "iterative"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        for est, channel in self.reward_channels.items():
            if est not in ESTIMATOR_NAMES:
                raise ConfigError(f"reward_channels: unknown estimator {est!r}")
            if channel not in CHANNELS:
                raise ConfigError(f"reward_channels: unknown channel {channel!r}")

    def to_dict(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "sim": self.sim.to_dict(),
            "n_trajectories": self.n_trajectories,
            "policies": list(self.policies),
            "estimators": list(self.estimators),
            "k_neighbors": self.k_neighbors,
            "h_mode": self.h_mode,
            "h": self.h,
            "bootstrap_b": self.bootstrap_b,
            "reward_channels": dict(self.reward_channels),
            "behavior_mode": self.behavior_mode,
            "smoothing": self.smoothing,
            "solver": self.solver,
            "ridge": self.ridge,
            "rand_hope_repeats": self.rand_hope_repeats,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = dict(data)
        version = data.pop("version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(
                f"config field 'version' must equal {SCHEMA_VERSION}")
        known = {
            "sim", "n_trajectories", "policies", "estimators", "k_neighbors",
            "h_mode", "h", "bootstrap_b", "reward_channels", "behavior_mode",
            "smoothing", "solver", "ridge", "rand_hope_repeats", "seed",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config field {sorted(unknown)[0]!r}")
        kwargs = {}
        if "sim" in data:
            try:
                kwargs["sim"] = SimConfig.from_dict(data.pop("sim"))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config field 'sim': {exc}") from exc
        for key in ("policies", "estimators"):
            if key in data:
                kwargs[key] = tuple(data.pop(key))
        kwargs.update(data)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def channel_for(self, estimator: str) -> str:
        default = ("reconstructed"
                   if estimator in ("hope", "sparse_hope", "soft_hope",
                                    "rand_hope") else "sparse")
        return self.reward_channels.get(estimator, default)
