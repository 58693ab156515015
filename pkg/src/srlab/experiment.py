"""Seeded, resumable experiment runs and side-by-side comparison reports."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint
from .attack import evaluate, mean_distortion
from .certify import NormPair, certified_radius, grid_soundness_check, weight_histogram, write_certificates_csv
from .config import ExperimentConfig
from .data import Dataset, load_mnist_idx, make_dataset
from .iwi import inherit
from .lottery import IterationRecord, LotteryResult, find_winning_ticket
from .net import Mask, Network, init_network
from .pruning import ns, prune, rand_reinit, sparsity_report
from .training import ExperimentRecord, adversarial_train, final_lr

log = logging.getLogger(__name__)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg["dataset.name"] == "mnist":
        if not cfg["dataset.images"] or not cfg["dataset.labels"]:
            raise ValueError("mnist needs dataset.images and dataset.labels")
        return load_mnist_idx(cfg["dataset.images"], cfg["dataset.labels"], cfg["dataset.limit"],
                              seed=cfg["dataset.seed"])
    return make_dataset(cfg["dataset.name"], int(cfg["dataset.n"]), float(cfg["dataset.noise"]),
                        int(cfg["dataset.seed"]))


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def digest(obj) -> str:
    return hashlib.sha256(_canon(obj).encode()).hexdigest()


def evaluate_model(net: Network, mask: Mask | None, ds: Dataset, cfg: ExperimentConfig, seed: int) -> dict:
    """Test-set clean/adversarial accuracy, mean distortion bound and norms."""
    Xte, yte = ds.test
    n_eval = min(len(yte), int(cfg["eval.points"]))
    clean, adv = evaluate(net, mask, Xte[:n_eval], yte[:n_eval], cfg.eval_attack(ds.clamp), [seed, 7])
    n_dist = min(len(yte), int(cfg["distortion.points"]))
    dist = mean_distortion(net, mask, Xte[:n_dist], yte[:n_dist], cfg.distortion_config(ds.clamp), [seed, 8])
    rep = sparsity_report(net, mask)["global"]
    return {"clean_acc": clean, "adv_acc": adv, "distortion_mean": dist.mean, "distortion_none": dist.none_count,
            "l0": rep["l0"], "l1": rep["l1"], "l2": rep["l2"]}


class Phase:
    """Checkpointed unit of work inside a seed directory; reused when its digest matches."""

    def __init__(self, root: Path, name: str, cfg_digest: str, seed: int):
        self.root, self.name, self.cfg_digest, self.seed = root, name, cfg_digest, seed
        self.ckpt = root / f"{name}.ckpt.json"
        self.history = root / f"{name}.history.csv"

    def done(self) -> bool:
        if not self.ckpt.exists():
            return False
        try:
            _, _, meta = checkpoint.load_checkpoint_meta(self.ckpt)
        except checkpoint.CheckpointError:
            return False
        return meta.get("config_digest") == self.cfg_digest

    def load(self):
        net, mask = checkpoint.load_checkpoint(self.ckpt)
        rec = ExperimentRecord.from_csv(self.history) if self.history.exists() else ExperimentRecord()
        return net, mask, rec

    def save(self, net, mask, rec: ExperimentRecord | None):
        if rec is not None:
            rec.to_csv(self.history)
        checkpoint.save_checkpoint(net, mask, self.ckpt, seed=self.seed, config_digest=self.cfg_digest)


def _phase_train(phase: Phase, net, mask, train, val, tcfg, initial_lr=None):
    if phase.done():
        log.info("reusing %s", phase.ckpt)
        return phase.load()
    out, rec = adversarial_train(net, mask, train, val, tcfg, initial_lr=initial_lr)
    phase.save(out, mask, rec)
    return out, mask, rec


def _histogram_dict(net, mask, cfg):
    h = weight_histogram(net, mask, int(cfg["hist.bins"]), tuple(cfg["hist.range"]))
    return {"edges": h.edges.tolist(), "counts": h.counts.tolist(), "underflow": h.underflow,
            "overflow": h.overflow, "masked": h.masked}


def run_seed(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    ds = load_dataset(cfg)
    root = out / f"seed_{seed}"
    root.mkdir(parents=True, exist_ok=True)
    cd = cfg.digest()
    n_train = len(ds.train_idx)
    dims = list(cfg["net.dims"])
    if dims[0] != ds.dim or dims[-1] < ds.n_classes:
        raise ValueError(f"net.dims {dims} incompatible with dataset dim {ds.dim} / {ds.n_classes} classes")
    theta0 = init_network(dims, seed)
    pipeline = cfg["pipeline"]
    result = {"seed": seed, "pipeline": pipeline}
    tcfg = cfg.train_config(seed, n_train, clamp=ds.clamp)

    if pipeline in ("train", "prune", "certify"):
        dense, _, _ = _phase_train(Phase(root, "dense", cd, seed), theta0, None, ds.train, ds.val, tcfg)
        result["dense"] = evaluate_model(dense, None, ds, cfg, seed)
        result["dense_hist"] = _histogram_dict(dense, None, cfg)

    if pipeline == "prune":
        rows = []
        for method in cfg["prune.methods"]:
            for ratio in cfg["prune.ratios"]:
                tag = f"{method}_{ratio:g}"
                if method == "ns":
                    res = ns(dense, None, ratio)
                    mask, achieved = res.mask, res.effective_ratio
                else:
                    mask = prune(method, dense, None, ratio, bool(cfg["prune.include_final"]))
                    achieved = mask.ratio
                arms = [("inherit", dense)]
                if cfg["prune.rand"]:
                    arms.append(("rand", rand_reinit(dense, mask, [seed, 99])))
                for arm, start in arms:
                    net, _, _ = _phase_train(Phase(root, f"{tag}_{arm}", cd, seed), start, mask, ds.train, ds.val, tcfg)
                    m = evaluate_model(net, mask, ds, cfg, seed)
                    rows.append({"method": method if arm == "inherit" else f"{method}-rand", "ratio": ratio,
                                 "achieved_ratio": achieved, "weight_ratio": mask.ratio, **m})
        result["table"] = rows
        _write_table(root / "table.csv", rows)

    if pipeline in ("lottery", "iwi"):
        lcfg = cfg.lottery_config(seed, n_train, ds.clamp)
        lot = _lottery_phase(root, cd, seed, theta0, ds, lcfg)
        result["lottery"] = [{"iteration": r.iteration, "cumulative_ratio": r.cumulative_ratio,
                              "post_train_clean_acc": r.post_train_clean_acc,
                              "post_train_adv_acc": r.post_train_adv_acc} for r in lot.iterations]
        lot.to_csv(root / "lottery.csv")

    if pipeline == "lottery":
        ttcfg = cfg.ticket_train_config(seed, n_train, ds.clamp)
        ticket, _, _ = _phase_train(Phase(root, "ticket", cd, seed), lot.ticket, lot.mask, ds.train, ds.val, ttcfg)
        dense, _, _ = _phase_train(Phase(root, "dense", cd, seed), theta0, None, ds.train, ds.val, ttcfg)
        result["ticket"] = evaluate_model(ticket, lot.mask, ds, cfg, seed)
        result["dense"] = evaluate_model(dense, None, ds, cfg, seed)
        result["ticket_hist"] = _histogram_dict(ticket, lot.mask, cfg)

    if pipeline == "iwi":
        icfg = cfg.iwi_config(seed, n_train, ds.clamp)
        ft_net, _, ft = _phase_train(Phase(root, "finetune", cd, seed), lot.ticket, lot.mask, ds.train, ds.val,
                                     icfg.finetune_config())
        inherited = inherit(ft_net, theta0, lot.mask)
        lr = final_lr(ft) if icfg.resume_lr and ft.rows else None
        iwi_net, _, cont = _phase_train(Phase(root, "iwi", cd, seed), inherited, None, ds.train, ds.val,
                                        icfg.continuation_config(), initial_lr=lr)
        base, _, _ = _phase_train(Phase(root, "baseline", cd, seed), theta0, None, ds.train, ds.val,
                                  icfg.baseline_config())
        a = evaluate_model(base, None, ds, cfg, seed)
        b = evaluate_model(iwi_net, None, ds, cfg, seed)
        rep = compare_report(a, b, base, iwi_net, bins=int(cfg["hist.bins"]), range=tuple(cfg["hist.range"]))
        result["baseline"], result["iwi"] = a, b
        result["comparison"] = rep["deltas"]
        result["epochs_by_phase"] = {"search": lot_epochs(lot, icfg), "finetune": len(ft.rows),
                                     "continuation": len(cont.rows)}
        write_comparison_csv(rep, root / "comparison.csv", root / "histograms.csv")

    if pipeline == "certify":
        result["certificates"] = _certify_phase(root, dense, ds, cfg)
    return result


def lot_epochs(lot: LotteryResult, icfg) -> int:
    return sum(len(r.history.rows) for r in lot.iterations if r.history is not None) or \
        icfg.lottery.iterations * icfg.lottery.epochs_per_iteration


def _lottery_phase(root, cd, seed, theta0, ds, lcfg) -> LotteryResult:
    phase = Phase(root, "lottery_mask", cd, seed)
    table = root / "lottery.csv"
    if phase.done() and table.exists():
        ticket, mask, _ = phase.load()
        with open(table, newline="") as f:
            its = [IterationRecord(int(r["iteration"]), float(r["cumulative_ratio"]), float(r["post_train_clean_acc"]),
                                   float(r["post_train_adv_acc"])) for r in csv.DictReader(f)]
        return LotteryResult(mask, ticket, its)
    lot = find_winning_ticket(theta0, ds.train, ds.val, lcfg)
    lot.to_csv(table)
    phase.save(lot.ticket, lot.mask, None)
    return lot


def _certify_phase(root, net, ds, cfg):
    Xte, _ = ds.test
    n = min(len(Xte), int(cfg["certify.points"]))
    out = {}
    for name in cfg["certify.pairs"]:
        pair = NormPair.parse(name)
        rows = []
        for i, x in enumerate(Xte[:n]):
            cert = certified_radius(net, None, x, pair)
            viol = None
            if cfg["certify.grid"] and x.size <= 3 and cert.radius > 0:
                r = min(cert.radius, float(cfg["certify.r_max"]))
                viol = grid_soundness_check(net, None, x, r, pair, r / int(cfg["certify.grid_div"]))
            rows.append({"sample": i, "yhat": cert.yhat, "margin_min": cert.margin_min, "L_min": cert.bound_min,
                         "radius": cert.radius, "grid_violations": viol})
        write_certificates_csv(rows, root / f"certificates_{name}.csv")
        radii = [r["radius"] for r in rows]
        out[name] = {"mean_radius": math.fsum(radii) / len(radii),
                     "violations": sum(r["grid_violations"] or 0 for r in rows)}
    return out


def _write_table(path, rows):
    if not rows:
        return
    cols = ["method", "ratio", "achieved_ratio", "weight_ratio", "clean_acc", "adv_acc", "distortion_mean"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow(["NA" if r[c] is None else r[c] for c in cols])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SRL_THREADS", "1")))
    except ValueError:
        return 1


def run_experiment(cfg: ExperimentConfig, out=None) -> Path:
    """Run the configured pipeline for every seed and write ``summary.json``.

    Completed phase checkpoints carrying the same config digest are reused,
    so an interrupted run resumes.  Wall-clock time goes to ``timing.json``
    so the summary itself is reproducible.
    """
    out = Path(out or cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.dumps() + "\n")
    t0 = time.perf_counter()
    seeds = list(cfg["seeds"])
    results, errors = {}, {}
    workers = min(_threads(), len(seeds))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futs = {s: pool.submit(run_seed, cfg, s, out) for s in seeds}
            for s, fut in futs.items():
                try:
                    results[s] = fut.result()
                except Exception as exc:  # recorded in the summary
                    errors[s] = f"{type(exc).__name__}: {exc}"
    else:
        for s in seeds:
            try:
                results[s] = run_seed(cfg, s, out)
            except Exception as exc:
                log.exception("seed %s failed", s)
                errors[s] = f"{type(exc).__name__}: {exc}"
    body = {"config_digest": cfg.digest(), "pipeline": cfg["pipeline"],
            "seeds": {str(s): {"result": r, "digest": digest(r)} for s, r in results.items()},
            "errors": {str(s): e for s, e in errors.items()}}
    body["digest"] = digest(body["seeds"])
    (out / "summary.json").write_text(_canon(body) + "\n")
    (out / "timing.json").write_text(json.dumps({"wall_clock_s": time.perf_counter() - t0}) + "\n")
    return out


METRIC_KEYS = ("clean_acc", "adv_acc", "distortion_mean", "l0", "l1", "l2")


def compare_report(record_a: dict, record_b: dict, net_a: Network | None = None, net_b: Network | None = None,
                   bins: int = 40, range=(-2.0, 2.0), mask_a=None, mask_b=None) -> dict:
    """Per-metric deltas ``b - a`` plus histograms on shared bin edges."""
    if set(record_a) != set(record_b):
        raise ValueError(f"record schemas differ: {sorted(set(record_a) ^ set(record_b))}")
    deltas = {}
    for k in sorted(record_a):
        a, b = record_a[k], record_b[k]
        if isinstance(a, (int, float)) and isinstance(b, (int, float)) and not isinstance(a, bool):
            deltas[k] = b - a
        elif a is None or b is None:
            deltas[k] = None
    if "l1" in deltas and deltas["l1"] is not None:
        deltas["l1_sign"] = int(np.sign(deltas["l1"]))
    report = {"a": record_a, "b": record_b, "deltas": deltas}
    if net_a is not None and net_b is not None:
        ha = weight_histogram(net_a, mask_a, bins, range)
        hb = weight_histogram(net_b, mask_b, bins, range)
        report["histogram"] = {"edges": ha.edges.tolist(), "a": ha.counts.tolist(), "b": hb.counts.tolist(),
                               "a_out": [ha.underflow, ha.overflow], "b_out": [hb.underflow, hb.overflow]}
    return report


def write_comparison_csv(report: dict, path, hist_path=None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "a", "b", "delta"])
        for k in sorted(report["a"]):
            d = report["deltas"].get(k)
            w.writerow([k, report["a"][k], report["b"][k], "NA" if d is None else d])
    if hist_path is not None and "histogram" in report:
        h = report["histogram"]
        with open(hist_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_lo", "bin_hi", "count_a", "count_b"])
            for lo, hi, a, b in zip(h["edges"][:-1], h["edges"][1:], h["a"], h["b"]):
                w.writerow([repr(lo), repr(hi), a, b])
