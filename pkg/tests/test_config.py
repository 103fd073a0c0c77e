import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apps.experiments.config import (
    ExperimentConfig,
    ExperimentSettings,
    config_hash,
    parse_config,
    render_config,
)
from distillation.distiller import DistillConfig
from distillation.exceptions import ConfigError
from distillation.probe import ProbeConfig

positive_floats = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False, allow_infinity=False)

experiment_settings = st.builds(
    ExperimentSettings,
    profile=st.sampled_from(['desk', 'full']),
    n=st.integers(2, 8),
    l=st.integers(0, 16),
    depths=st.lists(st.integers(1, 6), min_size=1, max_size=4).map(tuple),
    ks=st.lists(st.integers(1, 500), min_size=1, max_size=4).map(tuple),
    backend=st.sampled_from(['oracle', 'mlp']),
    seed=st.integers(0, 2**32 - 1),
    n_jobs=st.integers(-2, 8).filter(bool),
    output_dir=st.from_regex(r'[a-z0-9_/]{0,12}', fullmatch=True),
    lrh_norms=st.lists(st.one_of(positive_floats, st.just(math.inf)), min_size=1, max_size=3).map(tuple),
    lrh_steps=st.integers(0, 1000),
    lrh_samples=st.integers(2, 10000),
    separation_range=st.lists(st.integers(3, 9), min_size=1, max_size=4).map(tuple),
)

probe_configs = st.builds(
    ProbeConfig,
    tau=st.one_of(positive_floats, st.just(math.inf)),
    epsilon=positive_floats,
    delta=st.floats(min_value=1e-4, max_value=0.99),
    samples=st.one_of(st.none(), st.integers(2, 100000)),
    steps=st.integers(0, 500),
    theta=st.floats(min_value=1.01, max_value=1.99),
)

distill_configs = st.builds(
    DistillConfig,
    phase1=st.sampled_from(['exact', 'topk']),
    gate=st.sampled_from([None, 'schedule']),
    phase2=st.sampled_from(['shortlist', 'exact_joint']),
    v_epsilon=positive_floats,
    size=st.one_of(st.none(), st.integers(1, 31)),
    eval_samples=st.integers(1, 100000),
)


class TestParsing:
    def test_empty_text_gives_defaults(self):
        assert parse_config('') == ExperimentConfig()

    def test_values_are_typed(self):
        cfg = parse_config('[experiment]\nn = 5\ndepths = 2, 3\nlrh_norms = inf, 0.5\n[probe]\nsamples = none\n')
        assert cfg.experiment.n == 5
        assert cfg.experiment.depths == (2, 3)
        assert cfg.experiment.lrh_norms == (math.inf, 0.5)
        assert cfg.probe.samples is None

    def test_out_of_range_value_names_key_and_line(self):
        with pytest.raises(ConfigError) as info:
            parse_config('[experiment]\nseed = 3\nn = -1\n')
        assert (info.value.section, info.value.key, info.value.line) == ('experiment', 'n', 3)
        assert info.value.to_dict()['error'] == 'config'

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config('[probe]\ntau = 1\nwidth = 3\n')
        assert (info.value.key, info.value.line) == ('width', 3)

    def test_derived_keys_are_not_settable(self):
        with pytest.raises(ConfigError) as info:
            parse_config('[distill]\nseed = 4\n')
        assert info.value.key == 'seed'

    def test_unknown_section(self):
        with pytest.raises(ConfigError) as info:
            parse_config('[experiment]\nn = 3\n[network]\nwidth = 3\n')
        assert (info.value.section, info.value.line) == ('network', 3)

    def test_type_mismatch(self):
        with pytest.raises(ConfigError) as info:
            parse_config('[probe]\ntau = wide\n')
        assert info.value.key == 'tau'

    def test_malformed_text(self):
        with pytest.raises(ConfigError):
            parse_config('n = 3\n')

    def test_engine_validation_is_mapped_to_keys(self):
        with pytest.raises(ConfigError) as info:
            parse_config('[probe]\ntheta = 2.5\n')
        assert (info.value.section, info.value.key) == ('probe', 'theta')
        with pytest.raises(ConfigError) as info:
            parse_config('[mlp]\nwidth = 0\n')
        assert (info.value.section, info.value.key) == ('mlp', 'width')


class TestPrecedence:
    def test_overrides_beat_file_beat_defaults(self):
        text = '[experiment]\nseed = 2\n'
        defaults = {'experiment.seed': '1'}
        assert parse_config('', defaults=defaults).experiment.seed == 1
        assert parse_config(text, defaults=defaults).experiment.seed == 2
        assert parse_config(text, {'experiment.seed': '3'}, defaults).experiment.seed == 3

    def test_profile_beats_defaults_but_not_the_file(self):
        defaults = {'experiment.n': '3'}
        assert parse_config('[experiment]\nprofile = full\n', defaults=defaults).experiment.n == 6
        assert parse_config('[experiment]\nprofile = full\nn = 5\n', defaults=defaults).experiment.n == 5

    def test_full_profile(self):
        cfg = parse_config('', {'experiment.profile': 'full'})
        e = cfg.experiment
        assert (e.n, e.l, e.backend) == (6, 6, 'mlp')
        assert e.depths == (2, 3, 4, 5)
        assert e.ks == (10, 50, 100, 200)
        assert cfg.distill.phase1 == 'topk'
        assert cfg.mlp.width == 256

    def test_unknown_profile(self):
        with pytest.raises(ConfigError) as info:
            parse_config('', {'experiment.profile': 'huge'})
        assert info.value.key == 'profile'

    def test_malformed_override(self):
        with pytest.raises(ConfigError):
            parse_config('', {'seed': '3'})


class TestRendering:
    @settings(max_examples=100, deadline=None)
    @given(experiment_settings, probe_configs, distill_configs)
    def test_render_then_parse(self, experiment, probe, distill):
        cfg = ExperimentConfig(experiment=experiment, probe=probe, distill=distill)
        assert parse_config(render_config(cfg)) == cfg

    def test_render_lists_every_section(self):
        text = render_config(ExperimentConfig())
        for section in ('experiment', 'probe', 'distill', 'mlp', 'oracle'):
            assert f'[{section}]' in text
        assert 'lrh_norms = inf, 0.001' in text
        assert '\nseed = 0' in text

    def test_hash_ignores_output_dir_and_jobs(self):
        cfg = parse_config('')
        moved = replace(cfg, experiment=replace(cfg.experiment, output_dir='/tmp/elsewhere', n_jobs=4))
        assert config_hash(moved) == config_hash(cfg)
        reseeded = replace(cfg, experiment=replace(cfg.experiment, seed=1))
        assert config_hash(reseeded) != config_hash(cfg)
        assert len(config_hash(cfg)) == 16

    def test_hash_is_stable_across_parsing(self):
        cfg = parse_config('[experiment]\nn = 3\nks = 5, 10\n')
        assert config_hash(parse_config(render_config(cfg))) == config_hash(cfg)
