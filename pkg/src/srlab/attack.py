"""L-infinity PGD adversary, robust evaluation and the distortion-bound search."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .net import Mask, Network, correct, forward, loss_input_grad


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: float
    iterations: int
    random_start: bool = False
    clamp: tuple | None = None
    restarts: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be a positive integer, got {self.iterations}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.clamp is not None:
            lo, hi = self.clamp
            if not lo < hi:
                raise ValueError(f"clamp needs low < high, got {self.clamp}")
            object.__setattr__(self, "clamp", (float(lo), float(hi)))

    @classmethod
    def standard_train(cls, **kw):
        """8/255 ball, 2/255 steps, 10 iterations on [0, 1] images."""
        return cls(8 / 255, 2 / 255, 10, clamp=(0.0, 1.0), **kw)

    @classmethod
    def standard_eval(cls, **kw):
        return cls(8 / 255, 2 / 255, 100, clamp=(0.0, 1.0), random_start=True, **kw)

    def to_dict(self) -> dict:
        return {"eps": self.epsilon, "step": self.step_size, "iters": self.iterations,
                "rand_start": self.random_start, "clamp": list(self.clamp) if self.clamp else None,
                "restarts": self.restarts}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        clamp = d.get("clamp")
        return cls(float(d["eps"]), float(d["step"]), int(d["iters"]),
                   random_start=bool(d.get("rand_start", False)),
                   clamp=tuple(clamp) if clamp else None,
                   restarts=int(d.get("restarts", 1)))


@dataclass(frozen=True)
class DistortionSearchConfig:
    epsilon_max: float
    resolution: float
    attack: AttackConfig

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be > 0")
        if not self.epsilon_max > self.resolution:
            raise ValueError("epsilon_max must exceed resolution")


def _project(x_adv, x, eps, clamp):
    x_adv = np.clip(x_adv, x - eps, x + eps)
    if clamp is not None:
        x_adv = np.clip(x_adv, clamp[0], clamp[1])
    return x_adv


def pgd_attack(net: Network, mask: Mask | None, x, label, cfg: AttackConfig, rng=None,
               callback=None) -> np.ndarray:
    """Untargeted sign-gradient ascent on cross-entropy, projected every step.

    Works on a single vector or a batch (rows).  ``callback(i, x_adv)`` sees
    every iterate, including the start point.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    y = np.atleast_1d(np.asarray(label))
    if cfg.random_start:
        rng = np.random.default_rng(rng)
        x_adv = X + rng.uniform(-cfg.epsilon, cfg.epsilon, size=X.shape)
        x_adv = _project(x_adv, X, cfg.epsilon, cfg.clamp)
    else:
        x_adv = X.copy()
    if callback:
        callback(0, x_adv)
    for i in range(cfg.iterations):
        _, g = loss_input_grad(net, mask, x_adv, y)
        x_adv = _project(x_adv + cfg.step_size * np.sign(g), X, cfg.epsilon, cfg.clamp)
        if callback:
            callback(i + 1, x_adv)
    return x_adv[0] if single else x_adv


def robust_correct(net, mask, X, y, cfg: AttackConfig, rng=None):
    """Per-sample (clean_correct, adversarially_correct) flags.

    A sample is adversarially correct only if it is cleanly correct and no
    restart of the attack changes its prediction.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y)
    clean = correct(forward(net, mask, X), y)
    adv = clean.copy()
    rng = np.random.default_rng(rng)
    for _ in range(cfg.restarts):
        idx = np.flatnonzero(adv)
        if idx.size == 0:
            break
        x_adv = pgd_attack(net, mask, X[idx], y[idx], cfg, rng)
        adv[idx] &= correct(forward(net, mask, x_adv), y[idx])
    return clean, adv


def evaluate(net: Network, mask: Mask | None, X, y, cfg: AttackConfig, rng=None):
    """(clean_accuracy, adversarial_accuracy) on a labelled set."""
    if len(y) == 0:
        raise ValueError("empty dataset")
    clean, adv = robust_correct(net, mask, X, y, cfg, rng)
    return float(clean.mean()), float(adv.mean())


def _flips(net, mask, x, label, eps, template: AttackConfig, rng) -> bool:
    cfg = replace(template, epsilon=eps, step_size=eps * template.step_size / template.epsilon)
    for _ in range(cfg.restarts):
        x_adv = pgd_attack(net, mask, x, label, cfg, rng)
        if not correct(forward(net, mask, x_adv[None, :]), [label])[0]:
            return True
    return False


def distortion_bound(net: Network, mask: Mask | None, x, label: int, cfg: DistortionSearchConfig,
                     rng=None):
    """Smallest PGD radius that flips the prediction, to within ``cfg.resolution``.

    Exponential bracketing from ``resolution`` up to ``epsilon_max``, then
    bisection.  The inner attack keeps the template's step/epsilon ratio.
    Returns 0.0 for a cleanly misclassified input and None when even
    ``epsilon_max`` fails.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(rng)
    if not correct(forward(net, mask, x[None, :]), [label])[0]:
        return 0.0
    lo, hi = 0.0, cfg.resolution
    while not _flips(net, mask, x, label, hi, cfg.attack, rng):
        lo = hi
        if hi >= cfg.epsilon_max:
            return None
        hi = min(2 * hi, cfg.epsilon_max)
    while hi - lo > cfg.resolution:
        mid = 0.5 * (lo + hi)
        if _flips(net, mask, x, label, mid, cfg.attack, rng):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class DistortionSummary:
    mean: float | None
    none_count: int
    bounds: list
    clean_correct: list


def mean_distortion(net: Network, mask: Mask | None, X, y, cfg: DistortionSearchConfig,
                    rng=None) -> DistortionSummary:
    """Average of per-sample bounds over samples where a bound exists."""
    if len(y) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(rng)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    clean = correct(forward(net, mask, X), y)
    bounds = [distortion_bound(net, mask, xi, int(yi), cfg, rng) for xi, yi in zip(X, y)]
    finite = [b for b in bounds if b is not None]
    mean = math.fsum(finite) / len(finite) if finite else None
    return DistortionSummary(mean, len(bounds) - len(finite), bounds, clean.tolist())


def write_distortion_csv(summary: DistortionSummary, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample_index", "clean_correct", "bound_or_NA"])
        for i, (c, b) in enumerate(zip(summary.clean_correct, summary.bounds)):
            w.writerow([i, int(c), "NA" if b is None else repr(b)])
