import math

import numpy as np
import pytest

from distillation.boolean_dt import leaf, node
from distillation.exceptions import DistillationError, ResourceBoundError
from distillation.feature_extractor import free_instance_bits
from distillation.local_iter import InputEncoding, InstanceBatch, LocalIterationModel, enumerate_instances
from distillation.probe import (
    ProbeBank,
    ProbeConfig,
    ball_constrained_least_squares,
    exact_min_risk,
    fit_constrained_linear,
    linear_probe,
    mean_squared_risk,
    probe_error,
    project_ball,
)
from distillation.source_model import OracleSpec, build_oracle_source


def doubled_enumeration(n):
    """Every instance twice, so the train and held-out halves coincide"""
    bits = enumerate_instances(n).bits()
    return InstanceBatch.from_bits(n, np.vstack([bits, bits]))


@pytest.fixture
def edge_oracle():
    enc = InputEncoding(3)
    truth = LocalIterationModel(3, 1, (leaf(0), leaf(0), node(enc.edge_var(0, 2), leaf(0), leaf(1))))
    return build_oracle_source(OracleSpec(truth))


class TestProjection:
    def test_outside_is_scaled(self):
        assert np.allclose(project_ball(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])

    def test_inside_is_kept(self):
        w = np.array([0.1, -0.2])
        assert project_ball(w, 1.0) is w
        assert project_ball(w, math.inf) is w

    def test_zero_radius(self):
        assert project_ball(np.array([1.0, 1.0]), 0.0).tolist() == [0.0, 0.0]


class TestConstrainedFit:
    @pytest.fixture
    def problem(self, rng):
        Phi = rng.standard_normal((60, 5))
        y = Phi @ np.array([2.0, -1.0, 0.5, 0.0, 3.0]) + 0.1 * rng.standard_normal(60)
        return Phi, y

    def test_gradient_descent_reaches_the_exact_minimum(self, problem):
        Phi, y = problem
        pgd = fit_constrained_linear(Phi, y, 0.5, steps=5000)
        exact = ball_constrained_least_squares(Phi, y, 0.5)
        assert np.linalg.norm(pgd) <= 0.5 + 1e-12
        assert np.linalg.norm(exact) == pytest.approx(0.5)
        assert mean_squared_risk(Phi, y, pgd) == pytest.approx(mean_squared_risk(Phi, y, exact), abs=1e-6)

    def test_unconstrained_solution_inside_the_ball(self, problem):
        Phi, y = problem
        w = fit_constrained_linear(Phi, y, 100.0)
        assert mean_squared_risk(Phi, y, w) == pytest.approx(exact_min_risk(Phi, y), abs=1e-9)

    def test_risk_shrinks_as_the_ball_grows(self, problem):
        Phi, y = problem
        risks = [exact_min_risk(Phi, y, tau) for tau in (0.1, 0.5, 1.0, 4.0, math.inf)]
        assert all(a >= b - 1e-12 for a, b in zip(risks, risks[1:]))

    def test_rejects_bad_data(self):
        with pytest.raises(DistillationError):
            fit_constrained_linear(np.array([[np.nan]]), np.array([1.0]), 1.0)
        with pytest.raises(DistillationError):
            fit_constrained_linear(np.zeros((0, 2)), np.zeros(0), 1.0)


class TestProbeConfig:
    def test_sample_count_formula(self):
        cfg = ProbeConfig(tau=1.0, epsilon=0.5, delta=0.5, sample_constant=64)
        assert cfg.sample_count(1.0) == 5679

    def test_explicit_samples_win(self):
        assert ProbeConfig(samples=100).sample_count(1e9) == 100

    def test_cap(self):
        with pytest.raises(ResourceBoundError) as info:
            ProbeConfig(epsilon=0.001, strict=True).sample_count(10.0)
        assert info.value.context['cap'] == 200000
        assert info.value.context['needed'] > 200000

    def test_overflow_clamps_to_the_cap(self):
        cfg = ProbeConfig(tau=1.0, epsilon=0.05, delta=0.1)
        bound = math.sqrt(20)
        assert cfg.sample_count(bound) == cfg.max_samples
        assert cfg.guarantee(bound, cfg.max_samples) > cfg.epsilon

    def test_guarantee_within_budget(self):
        cfg = ProbeConfig(tau=1.0, epsilon=0.5, delta=0.5, sample_constant=64)
        assert cfg.guarantee(1.0, cfg.sample_count(1.0)) == pytest.approx(0.5)
        assert ProbeConfig(samples=100).guarantee(1e9, 100) == 0.05

    def test_unbounded_norm_needs_samples(self):
        with pytest.raises(ResourceBoundError):
            ProbeConfig(tau=math.inf).sample_count(1.0)

    @pytest.mark.parametrize('theta', [1.0, 2.0, 0.5])
    def test_theta_range(self, theta):
        with pytest.raises(DistillationError):
            ProbeConfig(theta=theta).validate()

    def test_delta_range(self):
        with pytest.raises(DistillationError):
            ProbeConfig(delta=1.0).validate()


class TestProbeBank:
    def test_accepts_a_planted_feature(self, oracle_n3):
        bank = ProbeBank(oracle_n3, doubled_enumeration(3))
        cfg = ProbeConfig(tau=math.inf, samples=128)
        for S in oracle_n3.extractor.planted:
            outcome = bank.probe(S, cfg)
            assert outcome.accepted
            assert outcome.risk < 1e-10
        assert bank.probes == len(oracle_n3.extractor.planted)

    def test_rejects_an_unseen_bit(self, edge_oracle):
        free = free_instance_bits(edge_oracle.truth, edge_oracle.extractor.planted)
        bank = ProbeBank(edge_oracle, doubled_enumeration(3))
        outcome = bank.probe(lambda batch: batch.bits()[:, free[0]], ProbeConfig(tau=math.inf, samples=128))
        assert not outcome.accepted
        assert outcome.risk >= 0.25 - 1e-9
        assert outcome.threshold == pytest.approx(0.075)

    def test_threads_match_serial(self, oracle_n3):
        bank = ProbeBank(oracle_n3, doubled_enumeration(3))
        targets = oracle_n3.extractor.planted[:4]
        cfg = ProbeConfig(tau=2.0, samples=128)
        serial = bank.probe_many(targets, cfg)
        threaded = bank.probe_many(targets, cfg, n_jobs=2)
        assert [o.accepted for o in serial] == [o.accepted for o in threaded]
        assert np.allclose([o.risk for o in serial], [o.risk for o in threaded])
        assert bank.probes == 2 * len(targets)

    def test_split(self, oracle_n3):
        bank = ProbeBank(oracle_n3, doubled_enumeration(3))
        assert bank.split == 64
        assert bank.train.shape == bank.test.shape == (64, oracle_n3.latent_dim)

    def test_needs_two_samples(self, oracle_n3):
        with pytest.raises(DistillationError):
            ProbeBank(oracle_n3, enumerate_instances(3).subset(slice(0, 1)))


class TestOneShotProbes:
    def test_linear_probe_with_a_callable(self, oracle_n3, rng):
        cfg = ProbeConfig(tau=2.0, samples=2048)
        outcome = linear_probe(lambda batch: oracle_n3.latent(batch)[:, 0], oracle_n3, cfg, rng)
        assert outcome.accepted
        assert outcome.samples == 2048

    def test_probe_error_of_a_planted_path(self, oracle_n3, rng):
        S = oracle_n3.extractor.planted[-1]
        assert probe_error(S, oracle_n3, 2, 3, 2048, rng) < 1e-8

    def test_probe_error_checks_n(self, oracle_n3, rng):
        with pytest.raises(DistillationError):
            probe_error(oracle_n3.extractor.planted[0], oracle_n3, 2, 4, 64, rng)

    def test_default_constant_with_a_clamped_budget(self, oracle_n3, rng):
        cfg = ProbeConfig(tau=1.0, epsilon=0.05, delta=0.1, max_samples=4000)
        outcome = linear_probe(oracle_n3.extractor.planted[-1], oracle_n3, cfg, rng)
        assert outcome.accepted
        assert outcome.samples == 4000
        assert outcome.guarantee > cfg.epsilon


class TestCalibration:
    """Repeated one-shot decisions with a fresh sample each trial"""

    trials = 100
    cfg = ProbeConfig(tau=1.0, epsilon=0.05, delta=0.1, samples=400)

    def test_planted_feature_is_accepted(self, oracle_n3):
        S = oracle_n3.extractor.planted[-1]
        correct = sum(linear_probe(S, oracle_n3, self.cfg, np.random.default_rng(t)).accepted
                      for t in range(self.trials))
        assert correct >= 90

    def test_unseen_bit_is_rejected(self, edge_oracle):
        free = free_instance_bits(edge_oracle.truth, edge_oracle.extractor.planted)[0]
        target = lambda batch: batch.bits()[:, free]
        correct = sum(not linear_probe(target, edge_oracle, self.cfg, np.random.default_rng(t)).accepted
                      for t in range(self.trials))
        assert correct >= 90
