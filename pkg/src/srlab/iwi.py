"""Inverse weights inheritance: grow a trained winning ticket back into the full network."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .lottery import LotteryConfig, LotteryResult, find_winning_ticket, train_ticket
from .net import Mask, Network
from .training import ExperimentRecord, FixedEpochs, StopC, StopE, TrainConfig, adversarial_train, final_lr


@dataclass(frozen=True)
class IwiConfig:
    lottery: LotteryConfig = field(default_factory=LotteryConfig)
    finetune_epochs: int = 120
    continuation: StopE | StopC | FixedEpochs = field(default_factory=lambda: StopE(45))
    resume_lr: bool = False

    def __post_init__(self):
        if self.finetune_epochs < 1:
            raise ValueError("finetune_epochs must be >= 1")

    @property
    def train(self) -> TrainConfig:
        return self.lottery.train

    def finetune_config(self) -> TrainConfig:
        return replace(self.train.with_epochs(self.finetune_epochs), seed=self.train.seed + 1)

    def continuation_config(self) -> TrainConfig:
        return replace(self.train, mode=self.continuation, seed=self.train.seed + 2)

    def budget_epochs(self) -> int:
        """Epochs of the matched dense baseline: search + fine-tune + continuation."""
        cont = 0 if isinstance(self.continuation, StopC) else self.continuation.total_epochs
        search = self.lottery.iterations * self.lottery.epochs_per_iteration
        return search + self.finetune_epochs + cont

    def baseline_config(self) -> TrainConfig:
        """Continuation config with only the epoch budget changed."""
        cont = self.continuation_config()
        if isinstance(cont.mode, StopC):
            return cont
        return cont.with_epochs(self.budget_epochs())


def inherit(theta_prime: Network, theta0: Network, mask: Mask) -> Network:
    """``theta' ⊙ M + theta0 ⊙ (1 - M)``, entry for entry."""
    if theta_prime.dims != theta0.dims:
        raise ValueError(f"dims differ: {theta_prime.dims} vs {theta0.dims}")
    ws = [np.where(k, a, b) for a, b, k in zip(theta_prime.weights, theta0.weights, mask.keep)]
    return Network(tuple(ws), theta_prime.scaling)


@dataclass
class IwiResult:
    network: Network
    lottery: LotteryResult
    theta_prime: Network
    inherited: Network
    finetune: ExperimentRecord
    continuation: ExperimentRecord

    @property
    def epochs_by_phase(self) -> dict:
        return {
            "search": sum(len(r.history.rows) for r in self.lottery.iterations),
            "finetune": len(self.finetune.rows),
            "continuation": len(self.continuation.rows),
        }


def inverse_weights_inheritance(theta0: Network, train, val, cfg: IwiConfig, lottery: LotteryResult | None = None,
                                on_inherit=None) -> IwiResult:
    """Ticket search, ticket fine-tuning, weight transplant, then full-network training.

    A precomputed ``lottery`` result skips the search.  ``on_inherit`` sees
    the composed network before any continuation step.
    """
    if lottery is None:
        lottery = find_winning_ticket(theta0, train, val, cfg.lottery)
    theta_prime, ft = train_ticket(lottery.ticket, lottery.mask, train, val, cfg.finetune_config())
    inherited = inherit(theta_prime, theta0, lottery.mask)
    if on_inherit:
        on_inherit(inherited)
    lr = final_lr(ft) if cfg.resume_lr else None
    final, cont = adversarial_train(inherited, None, train, val, cfg.continuation_config(), initial_lr=lr)
    return IwiResult(final, lottery, theta_prime, inherited, ft, cont)


def baseline_train(theta0: Network, train, val, cfg: IwiConfig):
    """Dense adversarial training from ``theta0`` with the IWI pipeline's epoch budget."""
    return adversarial_train(theta0, None, train, val, cfg.baseline_config())
