"""Experiment configuration: YAML sections, content hash and derived seeds.

Hyperparameter keys under ``generative`` and ``reinforcement`` keep the names of
the hyperparameter tables, so a config file reads like those tables.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..gridworld import ALL_KINDS, TopologyKind
from ..models import ModelConfig, TrainConfig
from ..successor_rl import AgentConfig, DynaConfig

VARIANTS = ("WORLD", "DSWM", "DSWM+DYNA", "ONEHOT")


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "master_seed": 0,
    "topologies": [k.value for k in ALL_KINDS],
    "generative": {
        "z total size": 128,
        "z number distributions": 8,
        "s total size": 49,
        "s number distributions": 1,
        "Learning rate": 5e-4,
        "h size": 256,
        "beta_z": 0.001,
        "beta_s": 0.001,
        "Iterations": 5000,
        "Batch size": 3,
        # not in the tables
        "hidden units": 256,
        "gumbel temperature": 1.0,
        "dnd top k": 5,
        "dnd kappa": 0.1,
        "position scale": 10.0,
        "checkpoint every": 500,
    },
    "reinforcement": {
        "gamma": 0.99,
        "alpha": 0.1,
        "Dyna rollout length": 5,
        "Dyna rollout frequency": 0.2,
        "tau": 0.001,
        "episodes": 100,
        "seeds": 5,
        "variants": list(VARIANTS),
    },
    "environment": {
        "train pattern maps": 100,
        "test pattern maps": 5,
        "episodes": 1000,
        "episode length": 50,
        "repeat probability": 0.7,
    },
    "evaluation": {
        "warmup steps": 30,
        "rollout steps": 20,
        "rollout seeds": 5,
        "place field episodes": 50,
        "active peak": 0.05,
    },
}


def _merge(base: dict, override: dict, where="") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where + k!r} must be a section")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self._validate()

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return cls(_merge(DEFAULTS, d or {}))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML: {e}") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        d["master_seed"] = int(seed)
        return ExperimentConfig(d)

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False, default_flow_style=False)

    def save(self, path) -> None:
        Path(path).write_text(self.dump())

    # -- identity -------------------------------------------------------------

    def digest(self) -> str:
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def stage_digest(self, *sections) -> str:
        """Hash of the named sections plus the master seed: a stage reruns only if these change."""
        part = {s: self.data[s] for s in sections}
        part["master_seed"] = self.data["master_seed"]
        return hashlib.sha256(json.dumps(part, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def master_seed(self) -> int:
        return int(self.data["master_seed"])

    def derive_seed(self, stage: str, topology: str = "", index: int = 0) -> int:
        return derive_seed(self.master_seed, stage, topology, index)

    # -- typed views ----------------------------------------------------------

    @property
    def topologies(self) -> list[str]:
        return [TopologyKind.parse(t).value for t in self.data["topologies"]]

    @property
    def env(self) -> dict:
        return self.data["environment"]

    @property
    def evaluation(self) -> dict:
        return self.data["evaluation"]

    @property
    def variants(self) -> list[str]:
        return list(self.data["reinforcement"]["variants"])

    @property
    def rl_seeds(self) -> int:
        return int(self.data["reinforcement"]["seeds"])

    def model_config(self) -> ModelConfig:
        g = self.data["generative"]
        return ModelConfig(z_total=g["z total size"], z_groups=g["z number distributions"],
                           s_total=g["s total size"], s_groups=g["s number distributions"],
                           hidden=g["hidden units"], h_size=g["h size"], temperature=g["gumbel temperature"],
                           top_k=g["dnd top k"], kappa=g["dnd kappa"], beta_z=g["beta_z"], beta_s=g["beta_s"],
                           position_scale=g["position scale"])

    def train_config(self) -> TrainConfig:
        g = self.data["generative"]
        return TrainConfig(iterations=g["Iterations"], batch_size=g["Batch size"],
                           learning_rate=g["Learning rate"], checkpoint_every=g["checkpoint every"])

    def agent_config(self, use_dyna: bool) -> AgentConfig:
        r = self.data["reinforcement"]
        dyna = DynaConfig(r["Dyna rollout length"], r["Dyna rollout frequency"]) if use_dyna else None
        return AgentConfig(gamma=r["gamma"], alpha=r["alpha"], tau=r["tau"], episodes=r["episodes"], dyna=dyna)

    # -- checks ---------------------------------------------------------------

    def _validate(self):
        d = self.data
        try:
            if not d["topologies"]:
                raise ConfigError("topologies must be non-empty")
            for t in d["topologies"]:
                TopologyKind.parse(t)
            for v in d["reinforcement"]["variants"]:
                if v not in VARIANTS:
                    raise ConfigError(f"unknown agent variant {v!r}; expected one of {VARIANTS}")
            env = d["environment"]
            for k in ("train pattern maps", "test pattern maps", "episodes", "episode length"):
                if int(env[k]) < 1:
                    raise ConfigError(f"environment.{k} must be >= 1")
            ev = d["evaluation"]
            if int(ev["warmup steps"]) < 1 or int(ev["rollout steps"]) < 1:
                raise ConfigError("evaluation windows must be >= 1 step")
            if int(ev["rollout seeds"]) < 1 or int(d["reinforcement"]["seeds"]) < 1:
                raise ConfigError("seed counts must be >= 1")
            self.model_config()
            self.train_config()
            self.agent_config(True)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"invalid config: {e}") from None


def derive_seed(master: int, stage: str, topology: str = "", index: int = 0) -> int:
    """Stable 63-bit seed from (master, stage, topology, index); independent of Python's hash salt."""
    key = f"{int(master)}/{stage}/{topology}/{int(index)}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1
