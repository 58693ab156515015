"""Flat dotted-key experiment configuration (JSON on disk)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attack import AttackConfig, DistortionSearchConfig
from .iwi import IwiConfig
from .lottery import LotteryConfig
from .pruning import METHODS
from .training import FixedEpochs, StopC, StopE, TrainConfig, desk_batch_size

PIPELINES = ("train", "prune", "lottery", "iwi", "certify")

DEFAULTS = {
    "pipeline": "train",
    "seeds": [0, 1, 2],
    "out": "runs/default",
    "dataset.name": "two_moons",
    "dataset.n": 1000,
    "dataset.noise": 0.1,
    "dataset.seed": 0,
    "dataset.images": None,
    "dataset.labels": None,
    "dataset.limit": None,
    "net.dims": [2, 16, 16, 2],
    "train.lr": 0.1,
    "train.momentum": 0.9,
    "train.weight_decay": 5e-4,
    "train.batch_size": 0,
    "train.mode": "stop_e",
    "train.epochs": 30,
    "train.patience": 10,
    "train.threshold": 1e-5,
    "train.max_decays": 2,
    "train.max_epochs": 300,
    "train.ns_l1": 1e-4,
    "train.monitor": "adversarial",
    "attack.eps": 0.1,
    "attack.step": 0.025,
    "attack.iters": 10,
    "attack.rand_start": False,
    "attack.clamp": None,
    "eval.iters": 100,
    "eval.rand_start": True,
    "eval.restarts": 1,
    "eval.points": 250,
    "prune.methods": ["gup", "lup", "fp", "ns"],
    "prune.ratios": [50.0, 80.0],
    "prune.rand": True,
    "prune.include_final": True,
    "lottery.p": 20.0,
    "lottery.k": 3,
    "lottery.n": 3,
    "lottery.method": "gup",
    "lottery.schedule": "additive",
    "lottery.train_epochs": 30,
    "iwi.nf": 30,
    "iwi.continue_epochs": 12,
    "iwi.stop_c": False,
    "iwi.resume_lr": False,
    "certify.pairs": ["l2", "linf"],
    "certify.points": 64,
    "certify.grid": True,
    "certify.grid_div": 50,
    "certify.r_max": 10.0,
    "distortion.eps_max": 2.0,
    "distortion.resolution": 1e-3,
    "distortion.points": 64,
    "hist.bins": 40,
    "hist.range": [-2.0, 2.0],
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        unknown = sorted(set(flat) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values = dict(DEFAULTS)
        values.update(flat)
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        flat = json.loads(Path(path).read_text())
        if not isinstance(flat, dict):
            raise ConfigError("config file must hold a flat JSON object")
        if overrides:
            flat.update(overrides)
        return cls.from_flat(flat)

    def __getitem__(self, key):
        return self.values[key]

    def with_values(self, **kw) -> "ExperimentConfig":
        flat = dict(self.values)
        flat.update({k.replace("__", "."): v for k, v in kw.items()})
        return ExperimentConfig.from_flat(flat)

    def dumps(self) -> str:
        return json.dumps(self.values, indent=1, sort_keys=True)

    def digest(self, exclude=("out", "seeds")) -> str:
        """sha256 of the canonical config; the output path and seed list do not affect results per seed."""
        body = {k: v for k, v in self.values.items() if k not in exclude}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def validate(self) -> None:
        v = self.values
        if v["pipeline"] not in PIPELINES:
            raise ConfigError(f"pipeline must be one of {PIPELINES}, got {v['pipeline']!r}")
        if not v["seeds"]:
            raise ConfigError("seeds must be non-empty")
        bad = [m for m in v["prune.methods"] if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown pruning methods {bad}")
        if v["train.mode"] not in ("stop_e", "stop_c"):
            raise ConfigError(f"train.mode must be stop_e or stop_c, got {v['train.mode']!r}")
        try:
            self.train_config(0, 500)
            self.eval_attack()
            self.distortion_config()
            self.iwi_config(0, 500)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # -- typed views ----------------------------------------------------------

    def attack(self) -> AttackConfig:
        v = self.values
        clamp = v["attack.clamp"]
        return AttackConfig(float(v["attack.eps"]), float(v["attack.step"]), int(v["attack.iters"]),
                            random_start=bool(v["attack.rand_start"]), clamp=tuple(clamp) if clamp else None)

    def eval_attack(self, clamp=None) -> AttackConfig:
        v = self.values
        base = self.attack()
        return AttackConfig(base.epsilon, base.step_size, int(v["eval.iters"]), random_start=bool(v["eval.rand_start"]),
                            clamp=base.clamp or clamp, restarts=int(v["eval.restarts"]))

    def _mode(self, epochs):
        v = self.values
        if v["train.mode"] == "stop_c":
            return StopC(int(v["train.patience"]), float(v["train.threshold"]), int(v["train.max_decays"]),
                         int(v["train.max_epochs"]))
        epochs = int(epochs)
        return StopE(epochs) if epochs >= 3 else FixedEpochs(epochs)

    def train_config(self, seed: int, n_train: int, epochs: int | None = None, clamp=None) -> TrainConfig:
        v = self.values
        att = self.attack()
        if clamp is not None and att.clamp is None:
            att = AttackConfig(att.epsilon, att.step_size, att.iterations, att.random_start, clamp)
        bs = int(v["train.batch_size"]) or desk_batch_size(n_train)
        return TrainConfig(float(v["train.lr"]), float(v["train.momentum"]), float(v["train.weight_decay"]), bs,
                           self._mode(v["train.epochs"] if epochs is None else epochs), att,
                           float(v["train.ns_l1"]), int(seed), v["train.monitor"])

    def lottery_config(self, seed: int, n_train: int, clamp=None) -> LotteryConfig:
        v = self.values
        return LotteryConfig(float(v["lottery.p"]), int(v["lottery.k"]), int(v["lottery.n"]),
                             self.train_config(seed, n_train, clamp=clamp),
                             v["lottery.method"], v["lottery.schedule"])

    def ticket_train_config(self, seed: int, n_train: int, clamp=None) -> TrainConfig:
        return self.train_config(seed, n_train, epochs=int(self.values["lottery.train_epochs"]), clamp=clamp)

    def iwi_config(self, seed: int, n_train: int, clamp=None) -> IwiConfig:
        v = self.values
        cont = self._mode(v["iwi.continue_epochs"]) if not v["iwi.stop_c"] else StopC(
            int(v["train.patience"]), float(v["train.threshold"]), int(v["train.max_decays"]), int(v["train.max_epochs"]))
        return IwiConfig(self.lottery_config(seed, n_train, clamp), int(v["iwi.nf"]), cont, bool(v["iwi.resume_lr"]))

    def distortion_config(self, clamp=None) -> DistortionSearchConfig:
        v = self.values
        return DistortionSearchConfig(float(v["distortion.eps_max"]), float(v["distortion.resolution"]),
                                      self.eval_attack(clamp))


def parse_override(text: str):
    """``key=value`` with the value parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip(), val
