"""Experiment configuration loaded from JSON."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np

from cadelac.harness import HarnessConfig
from cadelac.rigid_body import ManipulatorModel
from cadelac.sim import CollectConfig, NoiseSpec, config_hash, sample_environments
from cadelac.trainer import TrainConfig


@dataclass
class EvalSettings:
    n_envs: int = 10
    n_traj: int = 5
    seed: int = 1000
    duration: float = 10.0
    reference: str = "chirp"
    controllers: tuple = ("nominal", "ekf", "cadelac")
    inner_loop: bool = False
    var_dq: float | list = 0.0
    bounds: dict | None = None

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["controllers"] = tuple(d.get("controllers", cls.controllers))
        return cls(**d)

    def to_dict(self):
        d = dict(self.__dict__)
        d["controllers"] = list(self.controllers)
        return d


@dataclass
class ExperimentConfig:
    raw: dict
    nominal: ManipulatorModel
    collect: CollectConfig
    n_envs: int
    n_traj: int
    duration: float
    seed: int
    payload_mass: tuple
    payload_offset: float
    noise: NoiseSpec
    train: TrainConfig
    harness: HarnessConfig
    eval: EvalSettings

    @property
    def hash(self):
        return config_hash(self.raw)

    def environments(self):
        return sample_environments(np.random.default_rng([self.seed, 0]), self.n_envs, tuple(self.payload_mass),
                                   self.payload_offset)

    def eval_environments(self):
        envs = sample_environments(np.random.default_rng([self.eval.seed, 0]), self.eval.n_envs,
                                   tuple(self.payload_mass), self.payload_offset, include_unloaded=False,
                                   prefix="eval")
        return envs

    @classmethod
    def from_dict(cls, d):
        nominal = ManipulatorModel.from_dict(d["nominal"])
        c = dict(d["collect"])
        data = {k: c.pop(k) for k in ("n_envs", "n_traj", "duration", "seed", "payload_mass", "payload_offset")}
        collect = CollectConfig.from_dict({"nominal": d["nominal"], **c})
        noise = NoiseSpec.from_dict(d["noise"])
        train = TrainConfig.from_dict({**d["train"], "noise": d["noise"]})
        harness = HarnessConfig.from_dict({"nominal": d["nominal"], **d["harness"]})
        return cls(d, nominal, collect, noise=noise, train=train, harness=harness,
                   eval=EvalSettings.from_dict(d.get("eval", {})), **data)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def builtin(cls, name="desk"):
        text = resources.files("cadelac.configs").joinpath(f"{name}.json").read_text()
        return cls.from_dict(json.loads(text))
