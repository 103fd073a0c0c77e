import math
from dataclasses import replace

import numpy as np
import pytest

from distillation.boolean_dt import leaf, node
from distillation.exceptions import DistillationError, EncodingMismatchError, ResourceBoundError, TrainingError
from distillation.feature_extractor import LatentFeatureExtractor, free_instance_bits
from distillation.local_iter import (
    InputEncoding,
    LocalIterationModel,
    enumerate_instances,
    feature_values,
    instance_positions,
    dependency_set,
    random_local_model,
    sample_instances,
)
from distillation.probe import ProbeBank
from distillation.source_model import (
    LOSS_INCREASE_TOLERANCE,
    MLPConfig,
    OracleSpec,
    ResidualMLP,
    build_oracle_source,
    gradient_check,
    load_source,
    save_source,
    train_mlp_source,
)


def copy_edge_model():
    """n=3, l=1: the output copies edge (0, 2)"""
    enc = InputEncoding(3)
    return LocalIterationModel(3, 1, (leaf(0), leaf(0), node(enc.edge_var(0, 2), leaf(0), leaf(1))))


class TestOracle:
    def test_planted_columns_are_the_features(self, truth_n3, oracle_n3):
        batch = enumerate_instances(3)
        latent = oracle_n3.latent(batch)
        assert latent.shape == (64, oracle_n3.latent_dim)
        for i, S in enumerate(oracle_n3.extractor.planted):
            assert np.array_equal(latent[:, i], feature_values(S, batch, truth_n3.l))

    def test_planted_paths_are_deduplicated(self, oracle_n3):
        keys = [S.canonical() for S in oracle_n3.extractor.planted]
        assert len(keys) == len(set(keys))
        last = oracle_n3.extractor.planted[-1]
        assert oracle_n3.extractor.planted_index(last.with_provenance(level=9)) == len(keys) - 1

    def test_predicts_the_truth(self, truth_n3, oracle_n3):
        batch = enumerate_instances(3)
        assert np.array_equal(oracle_n3.predict(batch), truth_n3.predict(batch))
        assert oracle_n3.accuracy(batch) == 1.0

    def test_bound_holds(self, truth_n3):
        source = build_oracle_source(OracleSpec(truth_n3, noise=0.3, seed=5))
        norms = np.linalg.norm(source.latent(enumerate_instances(3)), axis=1)
        assert norms.max() <= source.bound
        assert source.bound == pytest.approx(1.3 * np.sqrt(source.latent_dim))

    def test_distractors_avoid_planted_bits(self):
        truth = copy_edge_model()
        source = build_oracle_source(OracleSpec(truth, distractors=2, distractor_width=2, seed=3))
        groups = source.extractor.distractor_bits
        used = [b for g in groups for b in g]
        assert len(used) == len(set(used)) == 4
        assert not set(used) & set(instance_positions(source.extractor.reserved_bits, 3))
        assert set(used) <= set(free_instance_bits(truth, source.extractor.planted))
        assert source.latent_dim == len(source.extractor.planted) + 2

    def test_distractor_parities(self):
        truth = copy_edge_model()
        extractor = LatentFeatureExtractor(truth, distractors=1, distractor_width=3, seed=1)
        batch = enumerate_instances(3)
        block = extractor.extract_all_features(batch)['distractors'][:, 0]
        group = list(extractor.distractor_bits[0])
        assert np.array_equal(block, batch.bits()[:, group].sum(axis=1) % 2)

    def test_too_many_distractors(self):
        with pytest.raises(ResourceBoundError):
            build_oracle_source(OracleSpec(copy_edge_model(), distractors=10, distractor_width=2))

    def test_wrong_n(self, oracle_n3, rng):
        with pytest.raises(EncodingMismatchError):
            oracle_n3.latent(sample_instances(4, 3, rng))

    def test_reserved_bits_cover_dependencies(self, truth_n3):
        extractor = LatentFeatureExtractor(truth_n3)
        for S in extractor.planted:
            assert dependency_set(S, truth_n3.l, 3) <= extractor.reserved_bits


class TestResidualMLP:
    @pytest.mark.parametrize('activation', ['relu', 'identity'])
    @pytest.mark.parametrize('loss', ['logistic', 'squared'])
    def test_gradients_match_finite_differences(self, activation, loss):
        cfg = MLPConfig(depth=2, width=8, activation=activation, loss=loss, seed=11)
        assert gradient_check(cfg, in_dim=6, points=20) < 1e-5

    def test_output_layer_starts_at_zero(self, rng):
        cfg = MLPConfig(depth=2, width=16)
        net = ResidualMLP.initialize(9, cfg, rng)
        out, _, hidden = net.forward(rng.choice([-1.0, 1.0], size=(5, 9)))
        assert np.all(out == 0)
        assert len(hidden) == 3
        assert net.latent(np.ones((2, 9))).shape == (2, 48)

    def test_config_validation(self):
        with pytest.raises(DistillationError):
            MLPConfig(width=0).validate()
        with pytest.raises(DistillationError):
            MLPConfig(optimizer='rmsprop').validate()


class TestTraining:
    def test_learns_a_single_edge(self):
        cfg = MLPConfig(depth=1, width=32, optimizer='adam', learning_rate=0.01, steps=1500, batch_size=64,
                        holdout=512, log_every=500, seed=2)
        source = train_mlp_source(copy_edge_model(), cfg)
        assert source.metadata['holdout_accuracy'] >= 0.95
        assert len(source.metadata['history']) == 3
        assert source.latent_dim == 64
        norms = np.linalg.norm(source.latent(enumerate_instances(3)), axis=1)
        assert norms.max() <= source.bound

    def test_divergence_raises(self):
        cfg = MLPConfig(depth=1, width=8, loss='squared', learning_rate=1e6, steps=1000, log_every=10, seed=0)
        with pytest.raises(TrainingError) as info:
            train_mlp_source(copy_edge_model(), cfg)
        assert 'param_norms' in info.value.context

    def test_inverse_sqrt_schedule_runs(self):
        cfg = MLPConfig(depth=1, width=8, schedule='inverse_sqrt', decay_steps=10, steps=50, log_every=25,
                        holdout=64)
        source = train_mlp_source(copy_edge_model(), cfg)
        assert len(source.metadata['history']) == 2


    def test_same_seed_same_parameters(self):
        cfg = MLPConfig(depth=1, width=8, steps=60, log_every=20, holdout=64, seed=3)
        first = train_mlp_source(copy_edge_model(), cfg)
        second = train_mlp_source(copy_edge_model(), cfg)
        assert set(first.network.params) == set(second.network.params)
        for key, value in first.network.params.items():
            assert np.array_equal(value, second.network.params[key])
        assert first.metadata['history'] == second.metadata['history']
        other = train_mlp_source(copy_edge_model(), replace(cfg, seed=4))
        assert not np.array_equal(other.network.params['W0'], first.network.params['W0'])

    def test_loss_does_not_climb(self):
        cfg = MLPConfig(depth=1, width=32, optimizer='adam', learning_rate=0.01, steps=1500, batch_size=64,
                        holdout=256, log_every=250, seed=2)
        losses = [entry['loss'] for entry in train_mlp_source(copy_edge_model(), cfg).metadata['history']]
        assert len(losses) == 6
        for previous, current in zip(losses, losses[1:]):
            assert current <= previous + LOSS_INCREASE_TOLERANCE
        assert losses[-1] < losses[0]

    def test_unconstrained_fit_is_no_worse_than_a_tight_ball(self):
        cfg = MLPConfig(depth=1, width=32, optimizer='adam', learning_rate=0.01, steps=1500, batch_size=64,
                        holdout=512, log_every=500, seed=2)
        truth = copy_edge_model()
        source = train_mlp_source(truth, cfg)
        bank = ProbeBank.draw(source, 2000, np.random.default_rng(0))
        clauses = truth.global_tree.root_prefix_paths()
        free = np.mean([bank.fit(c, math.inf)[2] for c in clauses])
        tight = np.mean([bank.fit(c, 0.001, steps=200)[2] for c in clauses])
        assert free <= tight

class TestCheckpoints:
    def test_oracle(self, tmp_path, truth_n3):
        source = build_oracle_source(OracleSpec(truth_n3, noise=0.2, seed=4))
        loaded = load_source(save_source(source, tmp_path / 'oracle.joblib'))
        batch = enumerate_instances(3)
        assert np.allclose(loaded.latent(batch), source.latent(batch))
        assert loaded.truth == truth_n3

    def test_mlp(self, tmp_path):
        cfg = MLPConfig(depth=1, width=8, steps=20, log_every=10, holdout=64)
        source = train_mlp_source(copy_edge_model(), cfg)
        loaded = load_source(save_source(source, tmp_path / 'mlp.joblib'))
        batch = enumerate_instances(3)
        assert np.array_equal(loaded.predict(batch), source.predict(batch))
        assert loaded.bound == source.bound
        assert loaded.cfg == cfg

    def test_version_checked(self, tmp_path, truth_n3):
        import joblib

        path = tmp_path / 'old.joblib'
        joblib.dump({'format_version': 0}, path)
        with pytest.raises(DistillationError):
            load_source(path)

    def test_random_truth_describe(self, rng):
        source = build_oracle_source(OracleSpec(random_local_model(3, 1, 1, rng)))
        described = source.describe()
        assert described['backend'] == 'oracle'
        assert described['latent_dim'] == source.latent_dim
