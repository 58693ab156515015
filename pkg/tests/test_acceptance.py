"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import itertools
import json
import time
import warnings

import numpy as np
import pytest

from conftest import random_dims, random_net
from oracles import fd_grad, gup_oracle_pruned, lup_oracle_pruned, pruned_positions, spectral_norm_jacobi
from srlab import checkpoint
from srlab.attack import AttackConfig, DistortionSearchConfig, distortion_bound
from srlab.certify import (L2, LINF, certified_radius, empirical_lipschitz, grid_soundness_check, induced_norm,
                           lipschitz_bound, spectral_norm)
from srlab.config import ExperimentConfig
from srlab.data import gen_two_moons, load_mnist_idx
from srlab.experiment import run_experiment
from srlab.iwi import inherit
from srlab.lottery import LotteryConfig, find_winning_ticket
from srlab.net import Mask, Network, forward, init_network, loss_and_grads
from srlab.pruning import fp, gup, lup, ns
from srlab.training import DECAY, STOP, StopE, TrainConfig, adversarial_train, lr_schedule_stop_e, stop_c_controller


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, elapsed, budget):
        ok = ok and elapsed < budget
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail} ({elapsed:.2f}s / budget {budget}s)")
        assert ok, detail
    return emit


def _min_abs_preact(net, X):
    a, out = X, np.inf
    for w, g in zip(net.weights[:-1], net.scaling):
        z = a @ w
        out = min(out, float(np.abs(z).min()))
        a = np.maximum(z, 0) * g
    return out


def test_c01_gradient_correctness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst, nets = 0.0, 0
    while nets < 100:
        dims = random_dims(rng, max_width=8, max_depth=4)
        net = random_net(rng, dims, scaling=True)
        # fan-in scaling keeps logits moderate so no entry sits below the FD noise floor
        net = Network(tuple(w * np.sqrt(2 / w.shape[0]) for w in net.weights), net.scaling)
        X = rng.normal(size=(4, dims[0]))
        if _min_abs_preact(net, X) < 1e-3:
            continue  # finite differences are meaningless across a kink
        y = rng.integers(0, dims[-1], size=4)
        _, grads = loss_and_grads(net, None, X, y)
        params = [np.array(w) for w in net.weights] + [np.array(g) for g in net.scaling]
        d = len(net.weights)

        def f():
            return loss_and_grads(Network(tuple(params[:d]), tuple(params[d:])), None, X, y)[0]

        for p, g in zip(params, list(grads.weights) + list(grads.scaling)):
            fd = fd_grad(f, p)
            rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-7)
            worst = max(worst, float(rel.max()) if rel.size else 0.0)
        nets += 1
    report(1, worst < 1e-4, f"max relative FD error {worst:.2e} over 100 nets", time.perf_counter() - t0, 5)


def test_c02_lipschitz_dominance(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    violations, checks = 0, 0
    for _ in range(20):
        dims = random_dims(rng, max_width=8, max_depth=4, n_in=2)
        net = random_net(rng, dims, scaling=True)
        for _ in range(5):
            x = rng.normal(size=2)
            yhat = int(np.argmax(forward(net, None, x)))
            for pair in (L2, LINF):
                for k in range(dims[-1]):
                    if k == yhat:
                        continue
                    emp = empirical_lipschitz(net, None, x, k, yhat, 0.1, 1000, pair, rng)
                    checks += 1
                    violations += emp > lipschitz_bound(net, None, yhat, k, pair)
    report(2, violations == 0, f"{violations} violations in {checks} (net, x, k, pair) checks",
           time.perf_counter() - t0, 30)


def test_c03_certified_radius_soundness(report):
    t0 = time.perf_counter()
    ds = gen_two_moons(1000, 0.1, 0)
    cfg = TrainConfig(batch_size=125, mode=StopE(30), attack=AttackConfig(0.1, 0.025, 10), seed=0)
    net, rec = adversarial_train(init_network([2, 16, 16, 2], 0), None, ds.train, ds.val, cfg)
    Xte, _ = ds.test
    total, certified = 0, 0
    for pair in (L2, LINF):
        for x in Xte[:64]:
            r = certified_radius(net, None, x, pair).radius
            if r > 0:
                certified += 1
                total += grid_soundness_check(net, None, x, r, pair, r / 50)
    report(3, total == 0 and certified > 0,
           f"{total} grid violations over 64 points x 2 norm pairs ({certified} nonzero radii, "
           f"net clean acc {rec.rows[-1]['clean_acc']:.3f})", time.perf_counter() - t0, 60)


def test_c04_norm_identities(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    bad_d = 0
    for _ in range(1000):
        n = int(rng.integers(1, 33))
        d = rng.random(n) < rng.uniform(0.1, 0.9)
        d[rng.integers(n)] = True
        D = np.diag(d.astype(np.float64))
        bad_d += induced_norm(D, 2) != 1.0 or induced_norm(D, np.inf) != 1.0
    worst = 0.0
    for _ in range(200):
        W = rng.normal(size=tuple(rng.integers(1, 17, size=2)))
        ref = spectral_norm_jacobi(W)
        worst = max(worst, abs(spectral_norm(W) - ref) / ref)
    report(4, bad_d == 0 and worst <= 1e-6,
           f"{bad_d} activation diagonals with norm != 1; max spectral rel err {worst:.1e} on 200 matrices",
           time.perf_counter() - t0, 10)


def test_c05_pruning_exactness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(505)
    mismatches = 0
    for _ in range(50):
        dims = random_dims(rng, max_width=8, max_depth=4)
        net = random_net(rng, dims)
        p = float(rng.uniform(1, 99))
        mismatches += pruned_positions(gup(net, None, p)) != gup_oracle_pruned(net.weights, p)
        mismatches += pruned_positions(lup(net, None, p)) != lup_oracle_pruned(net.weights, p)
    structural = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for widths in itertools.chain(itertools.product([2, 3, 4], repeat=1), itertools.product([2, 3, 4], repeat=2),
                                      itertools.product([2, 3, 4], repeat=3)):
            dims = [2, *widths, 2]
            net = random_net(rng, dims, scaling=True)
            for p in range(1, 100, 3):
                for mask in (fp(net, None, p), ns(net, None, p).mask):
                    expected = [np.ones((a, b), bool) for a, b in zip(dims[:-1], dims[1:])]
                    for j in range(len(widths)):
                        gone = np.flatnonzero(~mask.keep[j].any(axis=0))
                        structural += len(gone) >= widths[j]  # layer emptied
                        expected[j][:, gone] = False
                        expected[j + 1][gone, :] = False
                    structural += not all(np.array_equal(a, b) for a, b in zip(mask.keep, expected))
    report(5, mismatches == 0 and structural == 0,
           f"{mismatches} GUP/LUP oracle mismatches on 50 nets; {structural} FP/NS structure or guard failures",
           time.perf_counter() - t0, 10)


def test_c06_lottery_mechanics(report):
    t0 = time.perf_counter()
    ds = gen_two_moons(1000, 0.1, 0)
    theta0 = init_network([2, 16, 16, 2], 0)
    train = TrainConfig(batch_size=125, attack=AttackConfig(0.1, 0.025, 10))
    cfg = LotteryConfig(p_percent=20, iterations=3, epochs_per_iteration=3, train=train)
    problems, masks = [], []

    def check(k, net, mask):
        for w, w0, keep in zip(net.weights, theta0.weights, mask.keep):
            if w[keep].tobytes() != w0[keep].tobytes() or np.any(w[~keep] != 0.0):
                problems.append(f"rewind mismatch at iteration {k}")
        if masks and not mask <= masks[-1]:
            problems.append(f"mask grew at iteration {k}")
        if abs(mask.zeros - 0.2 * k * mask.total) > 1:
            problems.append(f"iteration {k}: {mask.zeros} zeros")
        masks.append(mask)

    res = find_winning_ticket(theta0, ds.train, ds.val, cfg, on_rewind=check)
    ratio = res.mask.zeros / res.mask.total
    ok = not problems and abs(res.mask.zeros - 0.6 * res.mask.total) <= 1 and len(masks) == 3
    report(6, ok, f"final ratio {ratio:.4f} ({res.mask.zeros}/{res.mask.total}); issues: {problems or 'none'}",
           time.perf_counter() - t0, 60)


def test_c07_desk_scale_lottery(report, tmp_path):
    t0 = time.perf_counter()
    out = run_experiment(ExperimentConfig.from_flat({"pipeline": "lottery"}), tmp_path)
    s = json.loads((out / "summary.json").read_text())
    gaps, ratios = [], []
    for seed in ("0", "1", "2"):
        r = s["seeds"][seed]["result"]
        gaps.append(r["dense"]["adv_acc"] - r["ticket"]["adv_acc"])
        ratios.append(r["lottery"][-1]["cumulative_ratio"])
    ok = not s["errors"] and all(g <= 0.05 for g in gaps) and all(abs(q - 0.6) < 0.01 for q in ratios)
    detail = "dense - ticket PGD-100 adv acc per seed: " + ", ".join(f"{g * 100:+.1f}pt" for g in gaps) + \
        f" at ratio {ratios}"
    report(7, ok, detail, time.perf_counter() - t0, 300)


def test_c08_iwi(report, tmp_path):
    t0 = time.perf_counter()
    cfg = ExperimentConfig.from_flat({"pipeline": "iwi"})
    out = run_experiment(cfg, tmp_path)
    s = json.loads((out / "summary.json").read_text())
    exact, sparser, reports = True, 0, 0
    for seed in (0, 1, 2):
        root = out / f"seed_{seed}"
        theta0 = init_network(cfg["net.dims"], seed)
        theta_p, _ = checkpoint.load_checkpoint(root / "finetune.ckpt.json")
        _, mask = checkpoint.load_checkpoint(root / "lottery_mask.ckpt.json")
        composed = inherit(theta_p, theta0, mask)
        for w, a, b, k in zip(composed.weights, theta_p.weights, theta0.weights, mask.keep):
            for idx in np.ndindex(w.shape):
                exact &= w[idx].tobytes() == (a if k[idx] else b)[idx].tobytes()
        res = s["seeds"][str(seed)]["result"]
        reports += (root / "comparison.csv").exists() and (root / "histograms.csv").exists()
        sparser += res["iwi"]["l1"] <= res["baseline"]["l1"]
    with_l1 = f"recorded outcome: IWI L1 <= baseline in {sparser}/3 seeds"
    report(8, exact and reports == 3 and not s["errors"],
           f"composition bit-exact={exact}; {reports}/3 comparison reports; {with_l1}", time.perf_counter() - t0, 600)


def test_c09_distortion_linear(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(909)
    cfg = DistortionSearchConfig(5.0, 1e-3, AttackConfig(1.0, 0.25, 20))
    worst, n = 0.0, 0
    while n < 20:
        W = rng.normal(size=(3, 2))
        net = Network((W,))
        x = rng.normal(size=3)
        g = forward(net, None, x)
        label = int(np.argmax(g))
        closed = (g[label] - g[1 - label]) / np.abs(W[:, label] - W[:, 1 - label]).sum()
        if closed > 4.5:
            continue
        got = distortion_bound(net, None, x, label, cfg, rng)
        worst = max(worst, abs(got - closed))
        n += 1
    report(9, worst <= cfg.resolution, f"max |search - closed form| = {worst:.2e} (resolution {cfg.resolution})",
           time.perf_counter() - t0, 5)


def test_c10_schedules(report):
    t0 = time.perf_counter()
    bad = 0
    for total in range(3, 1001):
        for epoch in range(total):
            k = 0 if 3 * epoch < total else 1 if 3 * epoch < 2 * total else 2
            bad += lr_schedule_stop_e(total, 0.1, epoch) != 0.1 / 10 ** k
    lrs = [lr_schedule_stop_e(240, 0.1, e) for e in range(240)]
    decays = [e for e in range(1, 240) if lrs[e] != lrs[e - 1]]
    const = [(i, a) for i, a in enumerate(stop_c_controller([1.0] * 100, 10, 1e-5, 2)) if a != "continue"]
    edge = [(i, a) for i, a in enumerate(stop_c_controller([1.0] + [0.75] * 20, 3, 0.25, 1)) if a != "continue"]
    ok = bad == 0 and decays == [80, 160] and const == [(10, DECAY), (20, DECAY), (30, STOP)] and \
        edge == [(3, DECAY), (6, STOP)]
    report(10, ok, f"Stop-E mismatches {bad}, 240-epoch decays at {decays}; Stop-C constant {const}, boundary {edge}",
           time.perf_counter() - t0, 1)


def test_c11_determinism_serialization(report, tmp_path):
    t0 = time.perf_counter()
    tiny = {"seeds": [0, 1], "dataset.n": 120, "net.dims": [2, 6, 2], "train.epochs": 3, "attack.iters": 2,
            "eval.iters": 3, "eval.points": 20, "distortion.points": 3, "distortion.resolution": 0.01}
    cfg = ExperimentConfig.from_flat(tiny)
    da = json.loads((run_experiment(cfg, tmp_path / "a") / "summary.json").read_text())["digest"]
    db = json.loads((run_experiment(cfg, tmp_path / "b") / "summary.json").read_text())["digest"]
    rng = np.random.default_rng(11)
    net = random_net(rng, [3, 5, 4, 2], scaling=True)
    net = Network(tuple(np.where(rng.random(w.shape) < 0.1, 0.1, w) for w in net.weights), net.scaling)
    mask = Mask(tuple(rng.random(w.shape) < 0.5 for w in net.weights))
    checkpoint.save_checkpoint(net, mask, tmp_path / "c.json")
    back, mback = checkpoint.load_checkpoint(tmp_path / "c.json")
    bit_exact = mback == mask and all(a.tobytes() == b.tobytes()
                                      for a, b in zip(net.weights + net.scaling, back.weights + back.scaling))
    imgs = np.array([[[0, 255], [128, 1]], [[255, 255], [0, 0]], [[3, 4], [5, 6]]], dtype=np.uint8)
    (tmp_path / "i.idx").write_bytes(bytes.fromhex("00000803000000030000000200000002") + imgs.tobytes())
    (tmp_path / "l.idx").write_bytes(bytes.fromhex("0000080100000003") + bytes([7, 3, 1]))
    ds = load_mnist_idx(tmp_path / "i.idx", tmp_path / "l.idx")
    idx_ok = ds.y.tolist() == [7, 3, 1] and np.array_equal(ds.X[0], [0.0, 1.0, 128 / 255, 1 / 255]) and \
        np.array_equal(ds.X[2], np.array([3, 4, 5, 6]) / 255)
    ok = da == db and bit_exact and idx_ok
    report(11, ok, f"summary digests equal={da == db}; checkpoint bit-exact={bit_exact}; IDX fixture ok={idx_ok}",
           time.perf_counter() - t0, 5)


def test_all_criteria_have_a_test():
    names = [n for n in globals() if n.startswith("test_c") and n[6:8].isdigit()]
    assert sorted(int(n[6:8]) for n in names) == list(range(1, 12))
