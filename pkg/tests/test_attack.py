import numpy as np
import pytest

from conftest import random_net
from srlab.attack import (AttackConfig, DistortionSearchConfig, distortion_bound, evaluate, mean_distortion,
                          pgd_attack, write_distortion_csv)
from srlab.net import Network, forward, loss_input_grad


def linear_binary(w=2.0):
    return Network((np.array([[w, -w]]),))


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            AttackConfig(0.0, 0.1, 10)
        with pytest.raises(ValueError):
            AttackConfig(0.1, 0.0, 10)
        with pytest.raises(ValueError):
            AttackConfig(0.1, 0.1, 0)
        with pytest.raises(ValueError):
            AttackConfig(0.1, 0.1, 1, clamp=(1.0, 0.0))

    def test_standard_defaults_round_trip(self):
        tr, ev = AttackConfig.standard_train(), AttackConfig.standard_eval()
        assert (tr.epsilon, tr.step_size, tr.iterations) == (8 / 255, 2 / 255, 10)
        assert (ev.epsilon, ev.step_size, ev.iterations) == (8 / 255, 2 / 255, 100)
        assert AttackConfig.from_dict(tr.to_dict()) == tr
        assert AttackConfig.from_dict(ev.to_dict()) == ev


class TestPgd:
    def test_linear_one_step(self):
        net = linear_binary()
        cfg = AttackConfig(0.3, 0.5, 1)
        x = np.array([1.0])
        np.testing.assert_array_equal(pgd_attack(net, None, x, 0, cfg), x - 0.3)

    def test_tiny_eps(self, rng):
        net = random_net(rng, [3, 5, 3])
        X = rng.normal(size=(10, 3))
        cfg = AttackConfig(1e-12, 0.1, 5, random_start=True)
        x_adv = pgd_attack(net, None, X, rng.integers(0, 3, 10), cfg, rng)
        # x +- eps is rounded to the grid around x, so allow one ulp of x
        assert np.all(np.abs(x_adv - X) <= 1e-12 + np.spacing(np.abs(X)))

    def test_every_iterate_feasible(self, rng):
        net = random_net(rng, [3, 6, 3])
        X = rng.uniform(0, 1, size=(20, 3))
        y = rng.integers(0, 3, 20)
        cfg = AttackConfig(0.2, 0.07, 15, random_start=True, clamp=(0.0, 1.0))
        seen = []

        def check(i, xa):
            seen.append(i)
            assert np.all(np.abs(xa - X) <= 0.2 + np.spacing(np.abs(X) + 0.2))
            assert xa.min() >= 0.0 and xa.max() <= 1.0

        pgd_attack(net, None, X, y, cfg, rng, callback=check)
        assert seen == list(range(16))

    def test_one_iteration_is_fgsm(self, rng):
        net = random_net(rng, [4, 6, 3])
        X = rng.normal(size=(8, 4))
        y = rng.integers(0, 3, 8)
        _, g = loss_input_grad(net, None, X, y)
        fgsm = X + 0.1 * np.sign(g)
        np.testing.assert_array_equal(pgd_attack(net, None, X, y, AttackConfig(0.1, 0.1, 1)), fgsm)


class TestEvaluate:
    def test_constant_net(self, rng):
        # logits constant: the network ignores its (nonnegative, dead) input
        net = Network((-np.ones((2, 3)), np.array([[1.0, 0.0]] * 3)))
        X = rng.uniform(0.1, 1, size=(10, 2))
        y = np.array([0] * 10)
        clean, adv = evaluate(net, None, X, y, AttackConfig(0.05, 0.01, 5), rng)
        assert clean == 0.0 and adv == 0.0  # all-zero logits tie -> wrong
        net = Network((np.ones((2, 3)), np.array([[1.0, 0.0]] * 3)))
        X = rng.uniform(0.5, 1, size=(10, 2))
        y = np.array([0] * 6 + [1] * 4)
        clean, adv = evaluate(net, None, X, y, AttackConfig(0.05, 0.01, 5, clamp=(0.0, 1.0)), rng)
        assert clean == 0.6 and adv == 0.6

    def test_large_eps_two_points(self):
        net = Network((np.array([[1.0, -1.0]]),))
        X = np.array([[1.0], [-1.0]])
        y = np.array([0, 1])
        clean, adv = evaluate(net, None, X, y, AttackConfig(2.0, 1.0, 5))
        assert clean == 1.0 and adv == 0.0

    def test_adv_le_clean(self, rng):
        for _ in range(10):
            net = random_net(rng, [2, 5, 3])
            X = rng.normal(size=(30, 2))
            y = rng.integers(0, 3, 30)
            c, a = evaluate(net, None, X, y, AttackConfig(0.3, 0.1, 5, random_start=True), rng)
            assert a <= c

    def test_deterministic(self, rng):
        net = random_net(rng, [2, 5, 3])
        X, y = rng.normal(size=(30, 2)), rng.integers(0, 3, 30)
        cfg = AttackConfig(0.3, 0.1, 5, random_start=True, restarts=2)
        assert evaluate(net, None, X, y, cfg, 11) == evaluate(net, None, X, y, cfg, 11)

    def test_empty(self, small_net):
        with pytest.raises(ValueError):
            evaluate(small_net, None, np.zeros((0, 2)), np.zeros(0, int), AttackConfig(0.1, 0.1, 1))


def closed_form_bound(net, x, label):
    W = net.weights[0]
    logits = forward(net, None, x)
    other = 1 - label
    return (logits[label] - logits[other]) / np.abs(W[:, label] - W[:, other]).sum()


class TestDistortion:
    cfg = DistortionSearchConfig(5.0, 1e-3, AttackConfig(1.0, 0.25, 20))

    def test_misclassified_is_zero(self):
        assert distortion_bound(linear_binary(), None, np.array([1.0]), 1, self.cfg) == 0.0

    def test_linear_closed_form(self, rng):
        for _ in range(10):
            W = rng.normal(size=(3, 2))
            net = Network((W,))
            x = rng.normal(size=3)
            label = int(np.argmax(forward(net, None, x)))
            expected = closed_form_bound(net, x, label)
            if expected > 4.0:
                continue
            got = distortion_bound(net, None, x, label, self.cfg, rng)
            assert abs(got - expected) <= self.cfg.resolution

    def test_robust_constant_net_is_none(self):
        # clamp keeps the input positive, so class 0 always wins
        net = Network((np.ones((1, 2)), np.array([[1.0, 0.0], [1.0, 0.0]])))
        cfg = DistortionSearchConfig(0.5, 1e-3, AttackConfig(1.0, 0.25, 10, clamp=(0.6, 1.0)))
        assert distortion_bound(net, None, np.array([0.8]), 0, cfg) is None

    def test_mean(self, rng, tmp_path):
        net = Network((np.array([[1.0, -1.0], [0.5, 0.5]]),))
        X = np.array([[1.0, 0.0], [0.4, 0.2]])
        y = np.array([0, 0])
        b = [closed_form_bound(net, x, 0) for x in X]
        s = mean_distortion(net, None, X, y, self.cfg, rng)
        assert s.none_count == 0
        assert abs(s.mean - sum(b) / 2) <= self.cfg.resolution
        write_distortion_csv(s, tmp_path / "d.csv")
        assert (tmp_path / "d.csv").read_text().splitlines()[0] == "sample_index,clean_correct,bound_or_NA"

    def test_mean_misclassified_and_all_none(self):
        s = mean_distortion(linear_binary(), None, np.array([[1.0]]), np.array([1]), self.cfg)
        assert s.mean == 0.0
        net = Network((np.ones((1, 2)), np.array([[1.0, 0.0], [1.0, 0.0]])))
        cfg = DistortionSearchConfig(0.5, 1e-3, AttackConfig(1.0, 0.25, 10, clamp=(0.6, 1.0)))
        s = mean_distortion(net, None, np.array([[0.8], [0.9]]), np.array([0, 0]), cfg)
        assert s.mean is None and s.none_count == 2

    def test_bound_flips_and_is_positive(self, rng):
        from srlab.attack import _flips
        net = random_net(rng, [2, 6, 2])
        for _ in range(5):
            x = rng.normal(size=2)
            label = int(np.argmax(forward(net, None, x)))
            eps = distortion_bound(net, None, x, label, self.cfg, 3)
            if eps:
                assert eps > 0
                # the returned value is the upper end of the bracket, so the attack succeeds there
                assert _flips(net, None, x, label, eps, self.cfg.attack, 3)
