"""Iterative adversarial lottery-ticket search with rewind to the initialization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

from .net import Mask, Network, rewind
from .pruning import METHODS, PruningError, prune
from .training import TrainConfig, adversarial_train


@dataclass(frozen=True)
class LotteryConfig:
    p_percent: float = 20.0
    iterations: int = 3
    epochs_per_iteration: int = 3
    train: TrainConfig = field(default_factory=TrainConfig)
    method: str = "gup"
    # "additive": iteration k reaches k*p% of the original count;
    # "of_remaining": iteration k reaches 1-(1-p%)^k
    schedule: str = "additive"

    def __post_init__(self):
        if self.iterations < 1 or self.epochs_per_iteration < 1:
            raise ValueError("iterations and epochs_per_iteration must be >= 1")
        if not 0 < self.p_percent < 100:
            raise ValueError("p_percent must lie in (0, 100)")
        if self.schedule == "additive" and not self.p_percent * self.iterations < 100:
            raise ValueError(f"K*p = {self.p_percent * self.iterations} must stay below 100")
        if self.schedule not in ("additive", "of_remaining"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown pruning method {self.method!r}")

    def cumulative_percent(self, k: int) -> float:
        if self.schedule == "additive":
            return k * self.p_percent
        return 100.0 * (1.0 - (1.0 - self.p_percent / 100.0) ** k)

    def iteration_train_config(self, k: int) -> TrainConfig:
        return replace(self.train.with_epochs(self.epochs_per_iteration), seed=self.train.seed + 1000 * k)


@dataclass
class IterationRecord:
    iteration: int
    cumulative_ratio: float
    post_train_clean_acc: float
    post_train_adv_acc: float
    mask: Mask = None
    history: object = None


@dataclass
class LotteryResult:
    mask: Mask
    ticket: Network
    iterations: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "cumulative_ratio", "post_train_clean_acc", "post_train_adv_acc"])
            for r in self.iterations:
                w.writerow([r.iteration, repr(r.cumulative_ratio), repr(r.post_train_clean_acc),
                            repr(r.post_train_adv_acc)])


def find_winning_ticket(theta0: Network, train, val, cfg: LotteryConfig, on_rewind=None) -> LotteryResult:
    """K rounds of: adversarially train theta0*M, prune the trained weights, rewind.

    ``on_rewind(k, net, mask)`` is called with each rewound network.
    """
    mask = Mask.ones(theta0)
    net = theta0
    records = []
    for k in range(1, cfg.iterations + 1):
        trained, hist = adversarial_train(net, mask, train, val, cfg.iteration_train_config(k))
        try:
            new_mask = prune(cfg.method, trained, mask, cfg.cumulative_percent(k))
        except PruningError as exc:
            raise PruningError(f"iteration {k}: {exc}") from None
        mask = new_mask & mask
        net = rewind(trained, theta0, mask)
        if on_rewind:
            on_rewind(k, net, mask)
        last = hist.rows[-1]
        records.append(IterationRecord(k, mask.ratio, last["clean_acc"], last["adv_acc"], mask, hist))
    return LotteryResult(mask, net, records)


def train_ticket(ticket: Network, mask: Mask, train, val, cfg: TrainConfig):
    """Train a ticket to completion with its mask held fixed."""
    return adversarial_train(ticket, mask, train, val, cfg)

