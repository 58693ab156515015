"""SGD-with-momentum adversarial training with Stop-E / Stop-C stopping."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attack import AttackConfig, pgd_attack, robust_correct
from .net import Grads, Mask, Network, cross_entropy, forward, loss_and_grads


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class StopE:
    total_epochs: int

    def __post_init__(self):
        if self.total_epochs < 3:
            raise ValueError(f"Stop-E needs total_epochs >= 3, got {self.total_epochs}")


@dataclass(frozen=True)
class FixedEpochs:
    """Constant learning rate for a fixed number of epochs (runs too short to split in thirds)."""

    total_epochs: int

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")


@dataclass(frozen=True)
class StopC:
    patience: int = 10
    relative_threshold: float = 1e-5
    max_decays: int = 2
    max_epochs: int = 1000

    def __post_init__(self):
        if self.patience < 1 or not self.relative_threshold > 0 or self.max_decays < 1:
            raise ValueError("Stop-C needs patience >= 1, relative_threshold > 0, max_decays >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    mode: StopE | StopC | FixedEpochs = field(default_factory=lambda: StopE(240))
    attack: AttackConfig = field(default_factory=AttackConfig.standard_train)
    ns_l1_lambda: float = 0.0
    seed: int = 0
    monitor: str = "adversarial"

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.ns_l1_lambda < 0:
            raise ValueError("weight_decay and ns_l1_lambda must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.monitor not in ("adversarial", "natural"):
            raise ValueError(f"monitor must be 'adversarial' or 'natural', got {self.monitor!r}")

    def with_epochs(self, epochs: int) -> "TrainConfig":
        """Stop-E over ``epochs``; below 3 epochs the rate stays constant."""
        return replace(self, mode=StopE(epochs) if epochs >= 3 else FixedEpochs(epochs))


def desk_batch_size(n_train: int) -> int:
    return max(1, min(128, n_train // 4))


# -- optimizer -------------------------------------------------------------

@dataclass
class MomentumState:
    weights: list
    scaling: list

    @classmethod
    def zeros_like(cls, net: Network) -> "MomentumState":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(g) for g in net.scaling])


def sgd_step(net: Network, mask: Mask | None, grads: Grads, state: MomentumState | None,
             lr: float, momentum: float = 0.9, weight_decay: float = 0.0, ns_l1_lambda: float = 0.0):
    """One momentum step: ``v = m*v + g + wd*w``, ``w -= lr*v``.

    Masked entries keep zero velocity and stay exactly zero.  Scaling
    factors get the L1 subgradient instead of weight decay.
    """
    for j, g in enumerate(list(grads.weights) + list(grads.scaling)):
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter block {j}")
    if state is None:
        state = MomentumState.zeros_like(net)
    keep = mask.keep if mask is not None else [None] * net.depth
    new_w, new_vw = [], []
    for w, g, v, k in zip(net.weights, grads.weights, state.weights, keep):
        v = momentum * v + g + weight_decay * w
        if k is not None:
            v = np.where(k, v, 0.0)
        w = w - lr * v
        if k is not None:
            w = np.where(k, w, 0.0)
        new_w.append(w)
        new_vw.append(v)
    new_g, new_vg = [], []
    for gam, g, v in zip(net.scaling, grads.scaling, state.scaling):
        v = momentum * v + g + ns_l1_lambda * np.sign(gam)
        new_g.append(gam - lr * v)
        new_vg.append(v)
    return Network(tuple(new_w), tuple(new_g)), MomentumState(new_vw, new_vg)


# -- schedules ---------------------------------------------------------------

def lr_schedule_stop_e(total_epochs: int, initial_lr: float, epoch: int) -> float:
    """Divide the rate by 10 at each third of the run."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return initial_lr / 10 ** ((3 * epoch) // total_epochs)


CONTINUE, DECAY, STOP = "continue", "decay_lr", "stop"


class StopCController:
    """Plateau detector on the validation loss.

    An epoch counts as an improvement only when the loss beats the best so
    far by a relative margin strictly greater than the threshold.  After
    ``patience`` stagnant epochs the rate decays (counter resets); the
    stagnation window after the last allowed decay emits ``stop``.
    """

    def __init__(self, patience=10, relative_threshold=1e-5, max_decays=2):
        self.patience = patience
        self.threshold = relative_threshold
        self.max_decays = max_decays
        self.best = np.inf
        self.bad_epochs = 0
        self.decays = 0

    def step(self, loss: float) -> str:
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite validation loss {loss}")
        if self.best == np.inf or self.best - loss > self.threshold * abs(self.best):
            self.best = loss
            self.bad_epochs = 0
            return CONTINUE
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return CONTINUE
        self.bad_epochs = 0
        if self.decays >= self.max_decays:
            return STOP
        self.decays += 1
        return DECAY


def stop_c_controller(losses, patience=10, relative_threshold=1e-5, max_decays=2) -> list:
    """Action emitted after each epoch of a loss trace (stops at the first ``stop``)."""
    ctl = StopCController(patience, relative_threshold, max_decays)
    actions = []
    for loss in losses:
        actions.append(ctl.step(loss))
        if actions[-1] == STOP:
            break
    return actions


# -- experiment record ------------------------------------------------------------

HISTORY_COLUMNS = ("epoch", "lr", "train_adv_loss", "val_loss", "clean_acc", "adv_acc")


@dataclass
class ExperimentRecord:
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, **row):
        if self.rows:
            if row["epoch"] <= self.rows[-1]["epoch"]:
                raise ValueError("epochs must be strictly increasing")
            if row["lr"] > self.rows[-1]["lr"]:
                raise ValueError("learning rate must be non-increasing")
        self.rows.append({k: row[k] for k in HISTORY_COLUMNS})

    def __eq__(self, other):
        return isinstance(other, ExperimentRecord) and self.rows == other.rows and _strip_time(
            self.summary) == _strip_time(other.summary)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(HISTORY_COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in HISTORY_COLUMNS[1:]])

    @classmethod
    def from_csv(cls, path) -> "ExperimentRecord":
        rec = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                rec.rows.append({"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_COLUMNS[1:]}})
        return rec


def _strip_time(summary: dict) -> dict:
    return {k: v for k, v in summary.items() if k != "wall_clock_s"}


def layer_norms(net: Network) -> list:
    return [{"layer": j + 1, "l0": int(np.count_nonzero(w)), "l1": float(np.abs(w).sum()),
             "l2": float(np.sqrt((w * w).sum()))} for j, w in enumerate(net.weights)]


# -- training loop ---------------------------------------------------------------

def _epoch_rng(seed, epoch, stream):
    return np.random.default_rng([seed, epoch, stream])


def _validate(net, mask, X, y, cfg: TrainConfig, rng):
    if cfg.monitor == "adversarial":
        X_eval = pgd_attack(net, mask, X, y, cfg.attack, rng)
    else:
        X_eval = X
    val_loss = float(cross_entropy(forward(net, mask, X_eval), y).mean())
    clean, adv = robust_correct(net, mask, X, y, cfg.attack, rng)
    return val_loss, float(clean.mean()), float(adv.mean())


def adversarial_train(net: Network, mask: Mask | None, train, val, cfg: TrainConfig,
                      initial_lr: float | None = None, on_step=None):
    """Madry-style training: each minibatch is replaced by its PGD perturbation.

    ``train`` and ``val`` are ``(X, y)`` pairs.  ``initial_lr`` overrides the
    config's starting rate (used to resume a decayed rate).  ``on_step``
    receives the network after every optimizer step.  If the loss diverges
    the partial record is attached to the raised ``TrainingDiverged``.
    """
    Xtr, ytr = (np.asarray(a) for a in train)
    Xva, yva = (np.asarray(a) for a in val)
    if len(ytr) == 0 or len(yva) == 0:
        raise ValueError("train and validation sets must be non-empty")
    lr0 = cfg.initial_lr if initial_lr is None else initial_lr
    t0 = time.perf_counter()
    record = ExperimentRecord()
    state = None
    if mask is not None:
        net = net.replace(weights=[np.where(k, w, 0.0) for w, k in zip(net.weights, mask.keep)])
    stop_c = isinstance(cfg.mode, StopC)
    ctl = StopCController(cfg.mode.patience, cfg.mode.relative_threshold, cfg.mode.max_decays) if stop_c else None
    max_epochs = cfg.mode.max_epochs if stop_c else cfg.mode.total_epochs
    lr = lr0
    best = (-np.inf, -1)
    try:
        for epoch in range(max_epochs):
            if isinstance(cfg.mode, StopE):
                lr = lr_schedule_stop_e(cfg.mode.total_epochs, lr0, epoch)
            order = _epoch_rng(cfg.seed, epoch, 0).permutation(len(ytr))
            attack_rng = _epoch_rng(cfg.seed, epoch, 1)
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb = pgd_attack(net, mask, Xtr[idx], ytr[idx], cfg.attack, attack_rng)
                loss, grads = loss_and_grads(net, mask, xb, ytr[idx])
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
                net, state = sgd_step(net, mask, grads, state, lr, cfg.momentum, cfg.weight_decay,
                                      cfg.ns_l1_lambda)
                if on_step:
                    on_step(net)
                losses.append(loss * len(idx))
            val_loss, clean_acc, adv_acc = _validate(net, mask, Xva, yva, cfg, _epoch_rng(cfg.seed, epoch, 2))
            record.add(epoch=epoch, lr=lr, train_adv_loss=sum(losses) / len(ytr), val_loss=val_loss,
                       clean_acc=clean_acc, adv_acc=adv_acc)
            if clean_acc + adv_acc > best[0]:
                best = (clean_acc + adv_acc, epoch)
            if stop_c:
                action = ctl.step(val_loss)
                if action == STOP:
                    break
                if action == DECAY:
                    lr = lr / 10
    except TrainingDiverged as exc:
        record.summary["error"] = str(exc)
        exc.record = record
        raise
    record.summary.update(best_sum_epoch=best[1], final_lr=lr, epochs=len(record.rows),
                          layer_norms=layer_norms(net), wall_clock_s=time.perf_counter() - t0)
    return net, record


def final_lr(record: ExperimentRecord) -> float:
    return record.summary.get("final_lr", record.rows[-1]["lr"])
