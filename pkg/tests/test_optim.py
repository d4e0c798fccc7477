"""Optimizer and schedule tests.

Expected values are hand-derived from the update formulas (noted inline)
or checked against independent loop transcriptions of those formulas.
"""

import math

import numpy as np
import pytest

from cascadeprune.autodiff import Parameter
from cascadeprune.masking import ImportanceScores
from cascadeprune.optim import (
    LRSchedule,
    ScoreOptimizer,
    SGDNesterov,
    lr_at,
    nesterov_update,
    rmsprop_update,
)


class TestSchedule:
    def test_cycle_start_is_base_lr(self):
        sched = LRSchedule(base_lr=0.008, cycle_len_epochs=5, steps_per_epoch=100)
        assert lr_at(sched, 0) == pytest.approx(0.008)

    def test_mid_cycle_is_half_base(self):
        # cos(pi/2) = 0 so the cosine factor is exactly 1/2.
        sched = LRSchedule(base_lr=0.008, cycle_len_epochs=5, steps_per_epoch=100)
        assert lr_at(sched, 250) == pytest.approx(0.004)

    def test_second_cycle_start_is_decayed(self):
        # 0.008 * 0.9 = 0.0072 one cycle in, 0.008 * 0.81 = 0.00648 two in.
        sched = LRSchedule(base_lr=0.008, cycle_len_epochs=5, cycle_decay=0.9,
                           steps_per_epoch=100)
        assert lr_at(sched, 500) == pytest.approx(0.0072)
        assert lr_at(sched, 1000) == pytest.approx(0.00648)

    def test_matches_formula_everywhere(self):
        sched = LRSchedule(base_lr=0.02, cycle_len_epochs=2, cycle_decay=0.7,
                           steps_per_epoch=7)
        T = 14
        for step in range(60):
            expect = 0.02 * 0.7 ** (step // T) \
                * 0.5 * (1 + math.cos(math.pi * (step % T) / T))
            assert lr_at(sched, step) == pytest.approx(expect, rel=1e-12)

    def test_monotone_within_cycle(self):
        sched = LRSchedule(base_lr=0.1, cycle_len_epochs=1, steps_per_epoch=50)
        vals = [lr_at(sched, s) for s in range(50)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_validation(self):
        with pytest.raises(ValueError, match="base_lr"):
            LRSchedule(base_lr=0.0)
        with pytest.raises(ValueError, match="cycle_decay"):
            LRSchedule(cycle_decay=1.5)
        with pytest.raises(ValueError, match="step"):
            lr_at(LRSchedule(), -1)


class TestNesterov:
    def test_hand_computed_two_steps(self):
        # v=0, theta=1, g=0.5, lr=0.1, mu=0.9:
        #   step 1: v=0.5, theta = 1 - 0.1*(0.5 + 0.45) = 0.905
        #   step 2: v=0.95, theta = 0.905 - 0.1*(0.5 + 0.855) = 0.7695
        theta = np.array([1.0])
        buf = np.zeros(1)
        g = np.array([0.5])
        theta = nesterov_update(theta, g, buf, lr=0.1, momentum=0.9)
        assert theta[0] == pytest.approx(0.905)
        theta = nesterov_update(theta, g, buf, lr=0.1, momentum=0.9)
        assert theta[0] == pytest.approx(0.7695)

    def test_zero_momentum_is_plain_sgd(self):
        theta = np.array([2.0, -1.0])
        buf = np.zeros(2)
        g = np.array([0.5, -0.25])
        out = nesterov_update(theta, g, buf, lr=0.2, momentum=0.0)
        assert np.allclose(out, theta - 0.2 * g)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        theta = rng.normal(size=5)
        buf = np.zeros(5)
        ref_theta = theta.copy()
        ref_v = np.zeros(5)
        for _ in range(20):
            g = rng.normal(size=5)
            theta = nesterov_update(theta, g, buf, lr=0.05, momentum=0.9)
            ref_v = 0.9 * ref_v + g
            ref_theta = ref_theta - 0.05 * (g + 0.9 * ref_v)
        assert np.allclose(theta, ref_theta, rtol=1e-12)

    def test_parameter_step_with_decay(self):
        p = Parameter("w", np.array([2.0], dtype=np.float64), dtype="f64")
        q = Parameter("gamma", np.array([2.0], dtype=np.float64), dtype="f64",
                      decay_exempt=True)
        for t in (p, q):
            t.value.grad = np.array([1.0])
        opt = SGDNesterov([p, q], momentum=0.0, weight_decay=0.1)
        opt.step(lr=0.5)
        # decaying: g_eff = 1 + 0.1*2 = 1.2 -> 2 - 0.6 = 1.4
        # exempt:   g_eff = 1           -> 2 - 0.5 = 1.5
        assert p.data[0] == pytest.approx(1.4)
        assert q.data[0] == pytest.approx(1.5)

    def test_frozen_parameter_untouched(self):
        p = Parameter("w", np.array([3.0]), dtype="f64", trainable=False)
        p.value.grad = np.array([1.0])
        opt = SGDNesterov([p])
        opt.step(lr=1.0)
        assert p.data[0] == 3.0

    def test_none_grad_is_noop(self):
        p = Parameter("w", np.array([3.0]), dtype="f64")
        opt = SGDNesterov([p], weight_decay=0.0)
        opt.step(lr=1.0)
        assert p.data[0] == 3.0

    def test_zero_grad_clears(self):
        p = Parameter("w", np.array([3.0]), dtype="f64")
        p.value.grad = np.array([5.0])
        SGDNesterov([p]).zero_grad()
        assert np.all(p.grad == 0.0)

    def test_state_roundtrip(self):
        p = Parameter("w", np.array([1.0]), dtype="f64")
        p.value.grad = np.array([1.0])
        opt = SGDNesterov([p], weight_decay=0.0)
        opt.step(lr=0.1)
        saved = {k: v.copy() for k, v in opt.state_tensors("opt").items()}
        assert saved == {"opt.w.momentum": pytest.approx(np.array([1.0]))}
        fresh = SGDNesterov([p], weight_decay=0.0)
        fresh.load_state_tensors("opt", saved)
        assert np.array_equal(fresh.buffers[id(p)], opt.buffers[id(p)])
        with pytest.raises(KeyError, match="opt.w.momentum"):
            fresh.load_state_tensors("opt", {})


class TestRMSProp:
    def test_first_step_formula(self):
        # s = 0.1*g^2; step = lr*g/(sqrt(s)+eps)
        theta = np.array([1.0])
        sq = np.zeros(1)
        g = np.array([2.0])
        out = rmsprop_update(theta, g, sq, lr=0.01, rho=0.9, eps=1e-8)
        expect = 1.0 - 0.01 * 2.0 / (math.sqrt(0.1 * 4.0) + 1e-8)
        assert out[0] == pytest.approx(expect, rel=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        theta = rng.normal(size=4)
        sq = np.zeros(4)
        ref_theta = theta.copy()
        ref_s = np.zeros(4)
        for _ in range(15):
            g = rng.normal(size=4)
            theta = rmsprop_update(theta, g, sq, lr=0.01, rho=0.9, eps=1e-8)
            ref_s = 0.9 * ref_s + 0.1 * g * g
            ref_theta = ref_theta - 0.01 * g / (np.sqrt(ref_s) + 1e-8)
        assert np.allclose(theta, ref_theta, rtol=1e-12)

    def test_constant_grad_saturates_to_sign_step(self):
        # With constant g the running square tends to g^2, so the step
        # tends to lr * g / |g| = lr * sign(g), independent of |g|.
        for gval in (0.003, 5.0):
            theta = np.array([0.0])
            sq = np.zeros(1)
            g = np.array([gval])
            for _ in range(400):
                prev = theta.copy()
                theta = rmsprop_update(theta, g, sq, lr=0.01, rho=0.9, eps=1e-8)
            assert (prev - theta)[0] == pytest.approx(0.01, rel=1e-3)


class TestScoreOptimizer:
    def _scores(self):
        return ImportanceScores({0: np.array([1.0, 2.0]), 1: np.array([3.0])})

    def test_sgd_step(self):
        s = self._scores()
        opt = ScoreOptimizer("sgd")
        opt.step({0: s}, {0: {0: np.array([0.5, -0.5]), 1: np.array([1.0])}},
                 lr=0.1)
        assert np.allclose(s.layers[0], [0.95, 2.05])
        assert np.allclose(s.layers[1], [2.9])

    def test_sgd_untouched_layers_keep_values(self):
        s = self._scores()
        ScoreOptimizer("sgd").step({0: s}, {0: {1: np.array([1.0])}}, lr=0.1)
        assert np.allclose(s.layers[0], [1.0, 2.0])

    def test_rmsprop_matches_raw_update(self):
        s = self._scores()
        g = np.array([0.5, -0.5])
        ref = rmsprop_update(s.layers[0].copy(), g, np.zeros(2),
                             lr=0.1, rho=0.9, eps=1e-8)
        ScoreOptimizer("rmsprop").step({0: s}, {0: {0: g}}, lr=0.1)
        assert np.allclose(s.layers[0], ref, rtol=1e-12)

    def test_rmsprop_state_roundtrip(self):
        s = self._scores()
        opt = ScoreOptimizer("rmsprop")
        opt.step({2: s}, {2: {0: np.array([1.0, -1.0])}}, lr=0.1)
        saved = opt.state_tensors("scores")
        assert set(saved) == {"scores.slot2.layer0.sq"}
        fresh = ScoreOptimizer("rmsprop")
        fresh.load_state_tensors("scores", saved)
        assert np.array_equal(fresh.sq[(2, 0)], opt.sq[(2, 0)])

    def test_bad_kind_rejected(self):
        with pytest.raises(ValueError, match="rmsprop"):
            ScoreOptimizer("adam")
