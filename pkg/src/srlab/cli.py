"""Command-line entry point: ``srlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .attack import AttackConfig, DistortionSearchConfig, evaluate, mean_distortion, write_distortion_csv
from .certify import (NormPair, certified_radius, grid_soundness_check, weight_histogram,
                      write_certificates_csv, write_histogram_csv)
from .config import DEFAULTS, ExperimentConfig, parse_override
from .experiment import compare_report, evaluate_model, load_dataset, run_experiment, write_comparison_csv
from .iwi import baseline_train, inverse_weights_inheritance
from .lottery import find_winning_ticket, train_ticket
from .net import init_network
from .pruning import ns, prune, sparsity_report
from .training import adversarial_train


def _pair(text):
    lo, hi = (float(t) for t in text.split(","))
    return lo, hi


def _load_cfg(args) -> ExperimentConfig:
    overrides = dict(parse_override(s) for s in args.set or [])
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.config:
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_flat(overrides)


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else int(cfg["seeds"][0])


def _json(obj):
    print(json.dumps(obj, indent=1, sort_keys=True, default=float))


def cmd_train(args):
    cfg = _load_cfg(args)
    ds = load_dataset(cfg)
    seed = _seed(args, cfg)
    tcfg = cfg.train_config(seed, len(ds.train_idx), clamp=ds.clamp)
    net, rec = adversarial_train(init_network(cfg["net.dims"], seed), None, ds.train, ds.val, tcfg)
    checkpoint.save_checkpoint(net, None, args.out, seed=seed, config_digest=cfg.digest())
    if args.history:
        rec.to_csv(args.history)
    _json(rec.rows[-1])


def cmd_attack(args):
    cfg = _load_cfg(args)
    ds = load_dataset(cfg)
    net, mask = checkpoint.load_checkpoint(args.ckpt)
    att = AttackConfig(args.eps, args.step, args.iters, random_start=args.rand_start,
                       clamp=_pair(args.clamp) if args.clamp else ds.clamp, restarts=args.restarts)
    X, y = ds.test
    clean, adv = evaluate(net, mask, X, y, att, _seed(args, cfg))
    out = {"clean_acc": clean, "adv_acc": adv}
    if args.distortion_csv:
        dcfg = DistortionSearchConfig(args.eps_max, args.resolution, att)
        n = args.points or len(y)
        summ = mean_distortion(net, mask, X[:n], y[:n], dcfg, _seed(args, cfg))
        write_distortion_csv(summ, args.distortion_csv)
        out.update(distortion_mean=summ.mean, distortion_none=summ.none_count)
    _json(out)


def cmd_prune(args):
    net, mask = checkpoint.load_checkpoint(args.inp)
    if args.method == "ns":
        res = ns(net, mask, args.ratio)
        new, extra = res.mask, {"effective_ratio": res.effective_ratio, "warning": res.warning}
    else:
        new, extra = prune(args.method, net, mask, args.ratio), {}
    checkpoint.save_checkpoint(net, new, args.out)
    rep = sparsity_report(net, new)
    rep.update(extra, pruning_ratio=new.ratio)
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            cols = ["layer", "l0", "density", "l1", "l2", "linf_induced", "spectral"]
            w.writerow(cols)
            for r in rep["layers"]:
                w.writerow([r[c] for c in cols])
    _json(rep)


def _lottery_cfg(args, cfg, ds, seed):
    over = {"lottery.p": args.p, "lottery.k": args.k}
    if getattr(args, "epochs_per_iter", None):
        over["lottery.n"] = args.epochs_per_iter
    if getattr(args, "n", None):
        over["lottery.n"] = args.n
    cfg = cfg.with_values(**{k.replace(".", "__"): v for k, v in over.items() if v is not None})
    return cfg, cfg.lottery_config(seed, len(ds.train_idx), ds.clamp)


def cmd_lottery(args):
    cfg = _load_cfg(args)
    ds = load_dataset(cfg)
    seed = _seed(args, cfg)
    cfg, lcfg = _lottery_cfg(args, cfg, ds, seed)
    theta0 = init_network(cfg["net.dims"], seed)
    lot = find_winning_ticket(theta0, ds.train, ds.val, lcfg)
    net, mask = lot.ticket, lot.mask
    if args.train_epochs:
        net, rec = train_ticket(lot.ticket, lot.mask, ds.train, ds.val,
                                cfg.train_config(seed, len(ds.train_idx), args.train_epochs, ds.clamp))
    checkpoint.save_checkpoint(net, mask, args.out, seed=seed, config_digest=cfg.digest())
    if args.csv:
        lot.to_csv(args.csv)
    _json({"cumulative_ratio": mask.ratio, "iterations": len(lot.iterations)})


def cmd_iwi(args):
    cfg = _load_cfg(args)
    ds = load_dataset(cfg)
    seed = _seed(args, cfg)
    over = {"iwi.nf": args.nf}
    if args.continue_epochs:
        over["iwi.continue_epochs"] = args.continue_epochs
    if args.stop_c:
        over["iwi.stop_c"] = True
    cfg = cfg.with_values(**{k.replace(".", "__"): v for k, v in over.items() if v is not None})
    cfg, _ = _lottery_cfg(args, cfg, ds, seed)
    icfg = cfg.iwi_config(seed, len(ds.train_idx), ds.clamp)
    theta0 = init_network(cfg["net.dims"], seed)
    res = inverse_weights_inheritance(theta0, ds.train, ds.val, icfg)
    base, _ = baseline_train(theta0, ds.train, ds.val, icfg)
    checkpoint.save_checkpoint(res.network, None, args.out, seed=seed, config_digest=cfg.digest())
    report_dir = Path(args.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    res.lottery.to_csv(report_dir / "lottery.csv")
    res.finetune.to_csv(report_dir / "finetune.history.csv")
    res.continuation.to_csv(report_dir / "continuation.history.csv")
    a = evaluate_model(base, None, ds, cfg, seed)
    b = evaluate_model(res.network, None, ds, cfg, seed)
    rep = compare_report(a, b, base, res.network, int(cfg["hist.bins"]), tuple(cfg["hist.range"]))
    write_comparison_csv(rep, report_dir / "comparison.csv", report_dir / "histograms.csv")
    _json({"baseline": a, "iwi": b, "deltas": rep["deltas"]})


def cmd_certify(args):
    cfg = _load_cfg(args)
    ds = load_dataset(cfg)
    net, mask = checkpoint.load_checkpoint(args.ckpt)
    pair = NormPair.parse(args.pair)
    X, _ = ds.test
    n = min(len(X), args.points)
    rows = []
    for i, x in enumerate(X[:n]):
        cert = certified_radius(net, mask, x, pair)
        viol = None
        if args.grid_check and cert.radius > 0:
            r = min(cert.radius, args.r_max)
            viol = grid_soundness_check(net, mask, x, r, pair, r / args.grid_div)
        rows.append({"sample": i, "yhat": cert.yhat, "margin_min": cert.margin_min, "L_min": cert.bound_min,
                     "radius": cert.radius, "grid_violations": viol})
    if args.csv:
        write_certificates_csv(rows, args.csv)
    radii = [r["radius"] for r in rows]
    _json({"pair": pair.name, "points": n, "mean_radius": float(np.mean(radii)),
           "violations": sum(r["grid_violations"] or 0 for r in rows)})


def cmd_hist(args):
    net, mask = checkpoint.load_checkpoint(args.ckpt)
    h = weight_histogram(net, mask, args.bins, _pair(args.range))
    if args.csv:
        write_histogram_csv(h, args.csv)
    _json({"bins": h.rows(), "underflow": h.underflow, "overflow": h.overflow, "masked": h.masked})


def cmd_run(args):
    cfg = _load_cfg(args)
    out = run_experiment(cfg, args.out)
    summary = json.loads((out / "summary.json").read_text())
    _json({"out": str(out), "digest": summary["digest"], "errors": summary["errors"]})
    if summary["errors"]:
        raise SystemExit(1)


def cmd_compare(args):
    cfg = _load_cfg(args)
    ds = load_dataset(cfg)
    seed = _seed(args, cfg)
    (na, ma), (nb, mb) = checkpoint.load_checkpoint(args.a), checkpoint.load_checkpoint(args.b)
    a, b = evaluate_model(na, ma, ds, cfg, seed), evaluate_model(nb, mb, ds, cfg, seed)
    rep = compare_report(a, b, na, nb, int(cfg["hist.bins"]), tuple(cfg["hist.range"]), ma, mb)
    if args.csv:
        write_comparison_csv(rep, args.csv, args.hist_csv)
    _json({"a": a, "b": b, "deltas": rep["deltas"]})


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config with dotted keys")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="srlab", description="Adversarial pruning and Lipschitz certification lab")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="adversarially train a dense network")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--history", help="history CSV path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("attack", parents=[common], help="PGD evaluation and distortion bounds")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--eps", type=float, default=DEFAULTS["attack.eps"])
    s.add_argument("--step", type=float, default=DEFAULTS["attack.step"])
    s.add_argument("--iters", type=int, default=DEFAULTS["eval.iters"])
    s.add_argument("--rand-start", action="store_true")
    s.add_argument("--restarts", type=int, default=1)
    s.add_argument("--clamp", help="lo,hi")
    s.add_argument("--distortion-csv")
    s.add_argument("--eps-max", type=float, default=DEFAULTS["distortion.eps_max"])
    s.add_argument("--resolution", type=float, default=DEFAULTS["distortion.resolution"])
    s.add_argument("--points", type=int, default=0)
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("prune", parents=[common], help="one-shot pruning of a checkpoint")
    s.add_argument("--method", choices=["gup", "lup", "fp", "ns"], required=True)
    s.add_argument("--ratio", type=float, required=True, help="percent")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("lottery", parents=[common], help="adversarial lottery-ticket search")
    s.add_argument("--p", type=float, default=DEFAULTS["lottery.p"])
    s.add_argument("--k", type=int, default=DEFAULTS["lottery.k"])
    s.add_argument("--epochs-per-iter", type=int)
    s.add_argument("--train-epochs", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_lottery)

    s = sub.add_parser("iwi", parents=[common], help="inverse weights inheritance vs baseline")
    s.add_argument("--p", type=float, default=DEFAULTS["lottery.p"])
    s.add_argument("--k", type=int, default=DEFAULTS["lottery.k"])
    s.add_argument("--n", type=int)
    s.add_argument("--nf", type=int, default=DEFAULTS["iwi.nf"])
    g = s.add_mutually_exclusive_group()
    g.add_argument("--continue-epochs", type=int)
    g.add_argument("--stop-c", action="store_true")
    s.add_argument("--out", required=True)
    s.add_argument("--report-dir", default="iwi_report")
    s.set_defaults(func=cmd_iwi)

    s = sub.add_parser("certify", parents=[common], help="Lipschitz certified radii")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pair", choices=["l2", "linf"], default="l2")
    s.add_argument("--points", type=int, default=DEFAULTS["certify.points"])
    s.add_argument("--grid-check", action="store_true")
    s.add_argument("--grid-div", type=int, default=DEFAULTS["certify.grid_div"])
    s.add_argument("--r-max", type=float, default=DEFAULTS["certify.r_max"])
    s.add_argument("--csv")
    s.set_defaults(func=cmd_certify)

    s = sub.add_parser("hist", parents=[common], help="weight histogram of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--bins", type=int, default=DEFAULTS["hist.bins"])
    s.add_argument("--range", default="-2,2")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_hist)

    s = sub.add_parser("run", parents=[common], help="run a configured experiment")
    s.add_argument("--out")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("compare", parents=[common], help="compare two checkpoints")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--csv")
    s.add_argument("--hist-csv")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except SystemExit:
        raise
    except Exception as exc:
        print(f"srlab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
