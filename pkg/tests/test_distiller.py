import itertools

import numpy as np
import pytest

from distillation.boolean_dt import Clause, DecisionTree, Literal, Node, leaf, node, random_tree, serialize_tree
from distillation.distiller import (
    DistillConfig,
    OutputSearch,
    SelectionConfig,
    TreeBuilder,
    ValuationTable,
    decompose_pool,
    distill,
    estimate_v,
    exhaustive_probe_count,
    extend_clause,
    hoeffding_samples,
    joint_select,
    mc_agreement,
    phase1_exact,
    phase1_topk,
    schedule_epsilon,
    selected_vertex,
    tree_dp_single,
    tree_score,
    valuation,
)
from distillation.exceptions import (
    DistillationError,
    PoolCorruptionError,
    ResourceBoundError,
    UndefinedValuationError,
)
from distillation.local_iter import InputEncoding, LocalIterationModel, enumerate_instances, random_local_model
from distillation.probe import ProbeConfig
from distillation.source_model import MLPConfig, OracleSpec, build_oracle_source, train_mlp_source


def x(var):
    return Literal(var, True)


def nx(var):
    return Literal(var, False)


def vertex_paths(u, tree, enc):
    """Full selector path of u followed by every root-prefix path of tree"""
    ids = tuple(Literal(j, bool(b)) for j, b in enumerate(enc.id_code(u)))
    return [Clause(ids + body.literals) for body in tree.root_prefix_paths()]


def all_small_trees(variables, depth):
    """Every labelled tree of at most the given depth with distinct variables per path"""
    trees = [leaf(0).root, leaf(1).root]
    if depth == 0:
        return trees
    for var in variables:
        rest = [v for v in variables if v != var]
        subtrees = all_small_trees(rest, depth - 1)
        trees.extend(Node(var, a, b) for a in subtrees for b in subtrees)
    return trees


SMALL_POOL = [Clause()] + [
    Clause(tuple(Literal(v, bool(s)) for v, s in zip(vs, signs)))
    for size in (1, 2)
    for vs in itertools.permutations(range(3), size)
    if list(vs) == sorted(vs)
    for signs in itertools.product((0, 1), repeat=size)
]


class TestPhaseOneHelpers:
    def test_extension(self):
        enc = InputEncoding(2)
        children = extend_clause(Clause((x(0),)), enc)
        assert len(children) == 6
        assert Clause((x(0), nx(1))) in children
        grand = extend_clause(Clause((x(0), nx(1))), enc)
        assert len(grand) == 4
        assert all(1 not in c.variables[2:] for c in grand)

    def test_partial_selector_paths_are_not_extended(self):
        assert extend_clause(Clause((x(0),)), InputEncoding(3)) == []
        assert extend_clause(Clause(), InputEncoding(3)) == []

    def test_exhaustive_count(self):
        assert exhaustive_probe_count(InputEncoding(2), 2) == 15
        assert exhaustive_probe_count(InputEncoding(3), 2) == 42
        assert exhaustive_probe_count(InputEncoding(3), 1) == 6

    def test_schedule(self):
        assert schedule_epsilon(1, 2) == 2.0 ** -5
        assert schedule_epsilon(2, 3) == 2.0 ** -9

    def test_hoeffding(self):
        assert hoeffding_samples(0.1, 0.05) == 738


class TestPhaseOne:
    def test_exact_probes_every_extension(self, oracle_n3):
        pool = phase1_exact(oracle_n3, 2, 2, 0.1, ProbeConfig(samples=512))
        assert pool.probes == 42
        assert pool.probe_fraction == 1.0
        assert pool.level_sizes == [6, 36, pool.level_sizes[2]]
        assert all(e.accepted for e in pool.entries.values() if e.level == 0)

    def test_topk_probes_grow_with_k(self, oracle_n3):
        cfg = ProbeConfig(samples=512)
        probes = [phase1_topk(oracle_n3, 2, 2, k, cfg).probes for k in (1, 2, 4, None)]
        assert probes == sorted(probes)
        assert probes[-1] == 42

    def test_topk_keeps_every_vertex(self):
        truth = random_local_model(4, 2, 2, np.random.default_rng(5))
        source = build_oracle_source(OracleSpec(truth))
        pool = phase1_topk(source, 2, 2, 10, ProbeConfig(samples=512))
        enc = pool.encoding
        assert len(pool.survivors[1]) == 40
        assert {selected_vertex(c, enc) for c in pool.survivors[1]} == {0, 1, 2, 3}
        assert {selected_vertex(c, enc) for c in pool.levels[2]} == {0, 1, 2, 3}
        assert all(len(c) == enc.id_bits + 2 for c in pool.levels[2])

    def test_gated_topk_without_k_is_exact(self, oracle_n3):
        cfg = ProbeConfig(samples=512)
        exact = phase1_exact(oracle_n3, 2, 2, 0.1, cfg, seed=3)
        gated = phase1_topk(oracle_n3, 2, 2, None, cfg, seed=3, gate='schedule')
        assert gated.levels == exact.levels
        assert gated.probe_fraction == 1.0

    def test_bad_arguments(self, oracle_n3):
        cfg = ProbeConfig(samples=64)
        with pytest.raises(DistillationError):
            phase1_topk(oracle_n3, 2, 2, 0, cfg)
        with pytest.raises(DistillationError):
            phase1_topk(oracle_n3, 2, 2, 3, cfg, gate='loose')
        with pytest.raises(DistillationError):
            phase1_exact(oracle_n3, 0, 2, 0.1, cfg)

    def test_pool_cap(self, oracle_n3):
        with pytest.raises(ResourceBoundError) as info:
            phase1_exact(oracle_n3, 2, 2, 0.1, ProbeConfig(samples=64), pool_cap=10)
        assert info.value.report.probes == 6


class TestDecomposition:
    def test_routes_by_vertex(self):
        enc = InputEncoding(3)
        body = Clause((x(3),))
        pool = [Clause(), Clause((x(0),)), Clause((nx(0), x(1))), Clause((nx(0), x(1)) + body.literals)]
        decomposition = decompose_pool(pool, enc)
        assert len(decomposition.selector_only) == 2
        assert decomposition.bodies(1) == [Clause(), body]
        assert decomposition.sizes() == [0, 2, 0]

    @pytest.mark.parametrize('clause', [
        Clause((x(0), x(3))),
        Clause((x(0), nx(0), x(1))),
        Clause((x(0), x(1))),
    ])
    def test_corrupt_pools(self, clause):
        with pytest.raises(PoolCorruptionError):
            decompose_pool([clause], InputEncoding(3))


class TestTreeDP:
    @pytest.mark.parametrize('budget', [1, 3, 5, 7])
    def test_matches_exhaustive_search(self, budget):
        candidates = [DecisionTree(t) for t in all_small_trees([0, 1, 2], 2)]
        for seed in range(100):
            rng = np.random.default_rng(seed)
            scores = {c: float(w) for c, w in zip(SMALL_POOL, rng.standard_normal(len(SMALL_POOL)))}
            tree, value = tree_dp_single(SMALL_POOL, scores, budget, depth=2)
            best = max(tree_score(t, scores) for t in candidates if t.size <= budget)
            assert value == pytest.approx(best, abs=1e-9)
            assert tree.size <= budget
            assert tree_score(tree, scores) == pytest.approx(value, abs=1e-9)

    def test_depth_limit(self, rng):
        scores = {c: float(w) for c, w in zip(SMALL_POOL, rng.standard_normal(len(SMALL_POOL)))}
        tree, _ = tree_dp_single(SMALL_POOL, scores, 7, depth=1)
        assert tree.depth <= 1

    def test_pair_scores(self):
        scores = {Clause((nx(0),)): (1.0, 0.0), Clause((x(0),)): (0.0, 1.0)}
        tree, value = tree_dp_single([Clause(), Clause((nx(0),)), Clause((x(0),))], scores, 3)
        assert tree == node(0, leaf(0), leaf(1))
        assert value == 2.0

    def test_needs_the_empty_clause(self):
        with pytest.raises(DistillationError):
            tree_dp_single([Clause((x(0),))], {}, 3)

    def test_enumeration_lists_every_non_degenerate_tree(self):
        def degenerate(t):
            if not isinstance(t, Node):
                return False
            leaves = all(not isinstance(c, Node) for c in (t.child0, t.child1))
            if leaves and t.child0.label == t.child1.label:
                return True
            return degenerate(t.child0) or degenerate(t.child1)

        expected = {serialize_tree(DecisionTree(t)) for t in all_small_trees([0, 1, 2], 2) if not degenerate(t)}
        found = [serialize_tree(t) for t in TreeBuilder(SMALL_POOL, depth=2).enumerate(7)]
        assert len(found) == len(set(found)) == 104
        assert set(found) == expected
        assert len(TreeBuilder(SMALL_POOL, depth=2).enumerate(7, limit=10)) == 10

    def test_stacked_values_match_the_single_dp(self, rng):
        builder = TreeBuilder(SMALL_POOL, depth=2)
        tables = rng.standard_normal((6, len(SMALL_POOL), 2))
        values = builder.values(tables, 7)
        for table, value in zip(tables, values):
            builder.set_score_table(table)
            assert builder.best(Clause(), 7)[0] == pytest.approx(value, abs=1e-12)

    def test_score_table_shape_checked(self):
        with pytest.raises(DistillationError):
            TreeBuilder(SMALL_POOL).set_score_table(np.zeros((3, 2)))


class TestValuation:
    def test_equals_signed_agreement_for_one_round(self):
        enc = InputEncoding(2)
        batch = enumerate_instances(2)
        for seed in range(50):
            rng = np.random.default_rng(seed)
            source = build_oracle_source(OracleSpec(random_local_model(2, 1, 2, rng)))
            trees = [random_tree(2, range(enc.id_bits, enc.d), rng) for _ in range(2)]
            pool = [c for u, t in enumerate(trees) for c in vertex_paths(u, t, enc)]
            table = estimate_v(decompose_pool(pool, enc), source, 0.1, 0.05, rng, mode='exact', batch=batch)
            candidate = LocalIterationModel(2, 1, tuple(trees))
            agreement = float(np.mean(candidate.predict(batch) == source.predict(batch)))
            assert valuation(trees, table, 1) == pytest.approx(2 * agreement - 1, abs=1e-12)

    def test_undefined_for_unfixed_reads(self, rng):
        enc = InputEncoding(2)
        trees = [leaf(1), node(2, leaf(0), node(1, leaf(0), leaf(1)))]
        pool = [c for u, t in enumerate(trees) for c in vertex_paths(u, t, enc)]
        source = build_oracle_source(OracleSpec(random_local_model(2, 2, 1, rng)))
        table = estimate_v(decompose_pool(pool, enc), source, 0.1, 0.05, rng, mode='exact',
                           batch=enumerate_instances(2))
        with pytest.raises(UndefinedValuationError):
            valuation(trees, table, 2)

    def test_needs_an_exact_table(self):
        with pytest.raises(UndefinedValuationError):
            valuation([leaf(1), leaf(1)], ValuationTable('marginal', [[Clause()], [Clause()]], 1, 0.0), 1)

    def test_hoeffding_accuracy_holds(self, oracle_n3):
        enc = InputEncoding(3)
        pool = [c for u in range(3) for c in vertex_paths(u, random_tree(1, range(enc.id_bits, enc.d),
                                                                         np.random.default_rng(u)), enc)]
        decomposition = decompose_pool(pool, enc)
        exact = estimate_v(decomposition, oracle_n3, 0.1, 0.05, None, batch=enumerate_instances(3))
        hits = 0
        for seed in range(100):
            table = estimate_v(decomposition, oracle_n3, 0.1, 0.05, np.random.default_rng(seed))
            worst = max(np.max(np.abs(a - b)) for a, b in zip(table.marginal, exact.marginal))
            hits += worst <= table.accuracy
        assert hits >= 95

    def test_exact_table_meets_its_accuracy(self):
        enc = InputEncoding(2)
        rng = np.random.default_rng(21)
        source = build_oracle_source(OracleSpec(random_local_model(2, 1, 1, rng)))
        trees = [random_tree(1, range(enc.id_bits, enc.d), rng) for _ in range(2)]
        decomposition = decompose_pool([c for u, t in enumerate(trees) for c in vertex_paths(u, t, enc)], enc)
        exact = estimate_v(decomposition, source, 0.1, 0.05, None, mode='exact', batch=enumerate_instances(2))
        target = 0.1 / sum(len(b) for b in decomposition.per_vertex)
        hits = 0
        for seed in range(100):
            table = estimate_v(decomposition, source, 0.1, 0.05, np.random.default_rng(seed), mode='exact')
            assert table.samples < 200000
            hits += np.max(np.abs(table.table - exact.table)) <= target
        assert hits >= 95

    def test_tuple_cap(self, oracle_n3):
        enc = InputEncoding(3)
        pool = [c for u in range(3) for c in vertex_paths(u, random_tree(2, range(enc.id_bits, enc.d),
                                                                         np.random.default_rng(u)), enc)]
        with pytest.raises(ResourceBoundError):
            estimate_v(decompose_pool(pool, enc), oracle_n3, 0.1, 0.05, None, mode='exact', tuple_cap=100,
                       batch=enumerate_instances(3))


class TestSelection:
    def test_exact_joint_preconditions(self):
        table = ValuationTable('marginal', [[Clause()]] * 2, 1, 0.0)
        cfg = SelectionConfig(mode='exact_joint')
        with pytest.raises(UndefinedValuationError):
            joint_select(decompose_pool([], InputEncoding(2)), table, None, 2, cfg, None)
        with pytest.raises(ResourceBoundError):
            joint_select(decompose_pool([], InputEncoding(4)), table, None, 1, cfg, None)
        with pytest.raises(UndefinedValuationError):
            joint_select(decompose_pool([], InputEncoding(2)), table, None, 1, cfg, None)

    def test_unknown_mode(self):
        with pytest.raises(DistillationError):
            joint_select(decompose_pool([], InputEncoding(2)), None, None, 1, SelectionConfig(mode='greedy'), None)

    def test_agreement_with_itself(self, truth_n3, oracle_n3, rng):
        result = mc_agreement(truth_n3, oracle_n3, 100, rng)
        assert result.estimate == 1.0
        assert result.samples == 100
        assert result.half_width == pytest.approx(0.13581, abs=1e-5)

    def test_agreement_needs_samples(self, truth_n3, oracle_n3, rng):
        with pytest.raises(DistillationError):
            mc_agreement(truth_n3, oracle_n3, 0, rng)


class TestOutputSearch:
    def full_pool(self, trees, enc):
        return decompose_pool([c for u, t in enumerate(trees) for c in vertex_paths(u, t, enc)], enc)

    def test_one_round_is_a_single_dp(self):
        truth = random_local_model(3, 1, 2, np.random.default_rng(4))
        enc = InputEncoding(3)
        batch = enumerate_instances(3)
        nu = truth.predict(batch)
        search = OutputSearch(self.full_pool(truth.trees, enc), 1, batch, nu, SelectionConfig(size=7, depth=2))
        start = [leaf(0)] * 3
        found, score = search.run(start, float(np.mean(nu == 0)))
        assert score == 1.0
        assert np.array_equal(LocalIterationModel(3, 1, tuple(found)).predict(batch), nu)

    def test_two_rounds_recover_a_dp_reading_output(self):
        enc = InputEncoding(3)
        e01, e12 = enc.edge_var(0, 1), enc.edge_var(1, 2)
        truth = LocalIterationModel(3, 2, (
            node(e01, leaf(0), leaf(1)),
            node(e01, leaf(0), node(enc.dp_var(0), leaf(0), leaf(1))),
            node(enc.dp_var(1), node(e12, leaf(0), leaf(1)), leaf(1)),
        ))
        batch = enumerate_instances(3)
        nu = truth.predict(batch)
        pool = self.full_pool(truth.trees, enc)
        search = OutputSearch(pool, 2, batch, nu, SelectionConfig(size=7, depth=2))
        found, score = search.run([leaf(1)] * 3, float(np.mean(nu == 1)))
        assert score == 1.0
        assert search.evaluated >= 1
        assert np.array_equal(LocalIterationModel(3, 2, tuple(found)).predict(batch), nu)

    def test_needs_one_or_two_rounds(self):
        enc = InputEncoding(2)
        with pytest.raises(DistillationError):
            OutputSearch(decompose_pool([], enc), 3, enumerate_instances(2), np.zeros(1), SelectionConfig())


class TestDistill:
    def test_oracle_end_to_end(self, truth_n3, oracle_n3):
        model, report = distill(oracle_n3, DistillConfig(R=2, eval_samples=500), ProbeConfig(samples=512))
        assert report.stage == 'done'
        assert report.probes == 42 and report.probe_fraction == 1.0
        assert report.source_agreement.estimate == 1.0
        assert report.truth_agreement == 1.0
        assert report.source_accuracy == 1.0
        assert model.n == 3 and model.l == 2
        assert all(t.depth <= 2 and t.size <= 7 for t in model.trees)

    def test_output_reading_a_neighbour_state_is_recovered(self):
        enc = InputEncoding(3)
        e01, e12 = enc.edge_var(0, 1), enc.edge_var(1, 2)
        truth = LocalIterationModel(3, 2, (
            node(e01, leaf(0), leaf(1)),
            node(e01, leaf(0), node(enc.dp_var(0), leaf(0), leaf(1))),
            node(enc.dp_var(1), node(e12, leaf(0), leaf(1)), leaf(1)),
        ))
        model, report = distill(build_oracle_source(OracleSpec(truth)), DistillConfig(R=2), ProbeConfig(samples=512))
        assert report.stage == 'done'
        assert report.truth_agreement == 1.0
        assert all(t.depth <= 2 and t.size <= 7 for t in model.trees)

    def test_search_can_be_switched_off(self, oracle_n3):
        _, report = distill(oracle_n3, DistillConfig(R=2, search=False), ProbeConfig(samples=512))
        assert report.stage == 'done'
        assert report.config['search'] is False

    def test_report_rows(self, oracle_n3):
        _, report = distill(oracle_n3, DistillConfig(R=1, phase1='topk', k=2), ProbeConfig(samples=256))
        row = report.row()
        assert row['depth'] == 1 and row['k'] == 2
        assert row['probes'] == report.probes == 6
        assert set(report.diagnostics()) == {'paths_per_vertex', 'cand_trees_per_vertex', 'source_agreement'}
        assert report.as_dict()['source_agreement']['samples'] == 64

    def test_exact_joint_recovers_a_one_round_model(self):
        truth = random_local_model(2, 1, 1, np.random.default_rng(3))
        source = build_oracle_source(OracleSpec(truth))
        config = DistillConfig(R=2, phase2='exact_joint', v_samples=20000)
        model, report = distill(source, config, ProbeConfig(samples=512))
        assert report.stage == 'done'
        assert report.truth_agreement == 1.0

    def test_failure_carries_the_report(self, oracle_n3):
        with pytest.raises(DistillationError) as info:
            distill(oracle_n3, DistillConfig(phase1='bogus'))
        assert info.value.report.stage == 'start'
        assert info.value.report.n == 3

    @pytest.mark.slow
    def test_four_vertices(self):
        truth = random_local_model(4, 2, 1, np.random.default_rng(11))
        source = build_oracle_source(OracleSpec(truth))
        _, report = distill(source, DistillConfig(R=2), ProbeConfig(samples=1024))
        assert report.stage == 'done'
        assert report.truth_agreement == 1.0

    @pytest.mark.slow
    def test_two_round_depth_two_models_are_recovered(self):
        exact = []
        for seed in range(20):
            truth = random_local_model(4, 2, 2, np.random.default_rng(seed))
            _, report = distill(build_oracle_source(OracleSpec(truth)), DistillConfig(R=2, seed=seed),
                                ProbeConfig(samples=1024))
            assert report.stage == 'done'
            exact.append(report.truth_agreement == 1.0)
        assert sum(exact) >= 19, exact


class TestTrainedSource:
    @pytest.mark.slow
    def test_six_vertices_six_rounds(self):
        source_acc, agreement = [], []
        for seed in range(3):
            truth = random_local_model(6, 6, 2, np.random.default_rng(seed))
            source = train_mlp_source(truth, MLPConfig(width=256, steps=50000, seed=seed))
            config = DistillConfig(R=2, phase1='topk', k=10, seed=seed)
            _, report = distill(source, config, ProbeConfig(samples=4000))
            assert report.stage == 'done'
            source_acc.append(report.source_accuracy)
            agreement.append(report.source_agreement.estimate)
        assert np.mean(source_acc) >= 0.95
        assert np.mean(agreement) >= 0.66
