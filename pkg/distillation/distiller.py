"""Two-phase distillation of a source model into a local-iteration model.

Phase 1 collects root-prefix paths whose conjunction features the source
exposes linearly. Phase 2 turns the collected paths into per-vertex trees,
either by maximizing the leaf-tuple valuation or by ranking a shortlist of
candidate trees by agreement with the source.
"""
import itertools
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .boolean_dt import (
    Clause,
    DecisionTree,
    Leaf,
    Literal,
    Node,
    TreeNode,
    compose_with_selector,
    leaf,
    selector_paths,
)
from .exceptions import (
    DistillationError,
    PoolCorruptionError,
    ResourceBoundError,
    UndefinedValuationError,
)
from .local_iter import (
    InputEncoding,
    InstanceBatch,
    LocalIterationModel,
    enumerate_instances,
    instance_bit_count,
    sample_instances,
)
from .probe import ProbeBank, ProbeConfig, ProbeOutcome
from .random_state import fork_rng

logger = structlog.get_logger(__name__)

TIE_TOLERANCE = 1e-12
MAX_ENUMERATED_EVAL_BITS = 16
PIVOT_CHUNK = 256

Score = Union[float, Tuple[float, float]]


# Phase 1

@dataclass
class PoolEntry:
    clause: Clause
    level: int
    error: Optional[float] = None
    accepted: Optional[bool] = None


@dataclass
class PathPool:
    encoding: InputEncoding
    mode: str
    levels: List[List[Clause]] = field(default_factory=list)
    survivors: List[List[Clause]] = field(default_factory=list)
    entries: Dict[Clause, PoolEntry] = field(default_factory=dict)
    probes_per_level: List[int] = field(default_factory=list)
    exhaustive_probes: Optional[int] = None

    @property
    def probes(self) -> int:
        return sum(self.probes_per_level)

    @property
    def probe_fraction(self) -> Optional[float]:
        if not self.exhaustive_probes:
            return None
        return self.probes / self.exhaustive_probes

    @property
    def level_sizes(self) -> List[int]:
        return [len(level) for level in self.levels]

    def clauses(self) -> List[Clause]:
        return [c for level in self.levels for c in level]

    def entry(self, clause: Clause) -> Optional[PoolEntry]:
        return self.entries.get(clause.canonical())

    def __contains__(self, clause: Clause) -> bool:
        return clause.canonical() in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, clause: Clause, level: int) -> bool:
        key = clause.canonical()
        if key in self.entries:
            return False
        self.entries[key] = PoolEntry(clause, level)
        return True


def _id_literals(clause: Clause, enc: InputEncoding) -> List[Literal]:
    return [p for p in clause if enc.is_id_var(p.var)]


def selected_vertex(clause: Clause, enc: InputEncoding) -> Optional[int]:
    """Vertex named by the clause's selector literals, None for a partial selector path"""
    ids = {p.var: p.positive for p in _id_literals(clause, enc)}
    if len(ids) < enc.id_bits:
        return None
    code = 0
    for j in range(enc.id_bits):
        code = (code << 1) | int(ids[j])
    return code


def extend_clause(clause: Clause, enc: InputEncoding) -> List[Clause]:
    """Extensions by one non-id literal; selector-internal prefixes are not extended"""
    if len(_id_literals(clause, enc)) < enc.id_bits:
        return []
    used = set(clause.variables)
    out = []
    for var in range(enc.id_bits, enc.d):
        if var in used:
            continue
        for positive in (False, True):
            out.append(clause.extend(Literal(var, positive)))
    return out


def exhaustive_probe_count(enc: InputEncoding, R: int) -> int:
    """Probes issued when nothing is pruned: all of S_0 plus every body up to length R-1"""
    m = enc.d - enc.id_bits
    total = len(selector_paths(enc))
    for i in range(1, R):
        total += enc.n * math.comb(m, i) * 2 ** i
    return total


def schedule_epsilon(i: int, l: int) -> float:
    return 2.0 ** (-i * l - 3)


Keep = Callable[[int, List[Clause], List[ProbeOutcome]], List[Clause]]


def _collect_paths(source, R: int, l: int, probe_cfg: ProbeConfig, delta: float, seed: int, mode: str,
                   keep: Keep, pool_cap: int, n_jobs: int) -> PathPool:
    if R < 1:
        raise DistillationError(f'phase 1 needs R >= 1, got {R}', R=R)
    enc = InputEncoding(source.n)
    pool = PathPool(enc, mode)
    level = list(selector_paths(enc))
    for c in level:
        pool.add(c, 0)
    pool.levels.append(level)
    for i in range(1, R + 1):
        previous = pool.levels[i - 1]
        cfg_i = replace(probe_cfg, epsilon=schedule_epsilon(i, l), delta=delta / (2 * max(len(previous), 1) * R))
        samples = cfg_i.sample_count(source.bound)
        bank = ProbeBank.draw(source, samples, fork_rng(seed, 'phase1', i))
        outcomes = bank.probe_many(previous, cfg_i, n_jobs=n_jobs)
        for c, outcome in zip(previous, outcomes):
            entry = pool.entry(c)
            entry.error = outcome.risk
            entry.accepted = outcome.accepted
        pool.probes_per_level.append(len(previous))
        kept = keep(i, previous, outcomes)
        pool.survivors.append(kept)

        generated = []
        for c in kept:
            for child in extend_clause(c, enc):
                if pool.add(child, i):
                    generated.append(child)
        pool.levels.append(generated)
        logger.info('phase1.depth_done', depth=i, probed=len(previous), survivors=len(kept),
                    generated=len(generated), epsilon=cfg_i.epsilon, samples=samples)
        if len(pool) > pool_cap:
            error = ResourceBoundError(f'path pool grew to {len(pool)} clauses, above the cap of {pool_cap}',
                                       size=len(pool), cap=pool_cap, depth=i)
            error.report = pool
            raise error
    return pool


def phase1_exact(source, R: int, l: int, delta: float, probe_cfg: ProbeConfig, seed: int = 0,
                 pool_cap: int = 100000, n_jobs: int = 1) -> PathPool:
    """Probe S_{i-1} at tolerance 2^{-il-3}; extend every accepted clause"""
    probe_cfg.validate()

    def keep(i, clauses, outcomes):
        return [c for c, o in zip(clauses, outcomes) if o.accepted]

    pool = _collect_paths(source, R, l, probe_cfg, delta, seed, 'exact', keep, pool_cap, n_jobs)
    pool.exhaustive_probes = exhaustive_probe_count(pool.encoding, R)
    return pool


def phase1_topk(source, R: int, l: int, k: Optional[int], probe_cfg: ProbeConfig, seed: int = 0,
                gate: Optional[str] = None, delta: float = 0.1, pool_cap: int = 100000, n_jobs: int = 1,
                exhaustive_cap: int = 20000) -> PathPool:
    """Branch only from the k clauses per vertex with lowest held-out fit error at each depth.

    gate='schedule' additionally requires the exact-mode acceptance; with
    k=None and that gate the result equals phase1_exact on the same seed.
    """
    probe_cfg.validate()
    if k is not None and k < 1:
        raise DistillationError(f'k must be positive, got {k}', k=k)
    if gate not in (None, 'schedule'):
        raise DistillationError(f'unknown gate {gate!r}', gate=gate)

    def keep(i, clauses, outcomes):
        # ranked within each selected vertex so no vertex is starved
        groups: Dict[Optional[int], List[int]] = {}
        for j, c in enumerate(clauses):
            groups.setdefault(selected_vertex(c, pool_encoding), []).append(j)
        chosen = []
        for members in groups.values():
            ranked = sorted(members, key=lambda j: outcomes[j].risk)
            if gate == 'schedule':
                ranked = [j for j in ranked if outcomes[j].accepted]
            chosen.extend(ranked[:k] if k is not None else ranked)
        return [clauses[j] for j in sorted(chosen)]

    pool_encoding = InputEncoding(source.n)

    pool = _collect_paths(source, R, l, probe_cfg, delta, seed, 'topk', keep, pool_cap, n_jobs)
    full = exhaustive_probe_count(pool.encoding, R)
    if gate is None:
        pool.exhaustive_probes = full
    elif k is None:
        pool.exhaustive_probes = pool.probes
    elif full <= exhaustive_cap:
        reference = phase1_topk(source, R, l, None, probe_cfg, seed=seed, gate=gate, delta=delta,
                                pool_cap=pool_cap, n_jobs=n_jobs)
        pool.exhaustive_probes = reference.probes
    logger.info('phase1.topk_done', k=k, probes=pool.probes, fraction=pool.probe_fraction)
    return pool


# Decomposition

@dataclass
class Decomposition:
    encoding: InputEncoding
    selector_only: List[Clause]
    per_vertex: List[List[Clause]]
    errors: List[Dict[Clause, Optional[float]]]
    accepted: List[Dict[Clause, Optional[bool]]] = field(default_factory=list)

    def bodies(self, u: int) -> List[Clause]:
        return self.per_vertex[u]

    def admissible(self, u: int) -> List[Clause]:
        """Bodies of u that were not probed and rejected"""
        if not self.accepted:
            return list(self.per_vertex[u])
        return [b for b in self.per_vertex[u] if self.accepted[u].get(b.canonical()) is not False]

    def error(self, u: int, body: Clause) -> Optional[float]:
        """Probe error of a body, falling back to its nearest probed ancestor"""
        literals = body.literals
        while True:
            value = self.errors[u].get(Clause(literals).canonical())
            if value is not None or not literals:
                return value
            literals = literals[:-1]

    def sizes(self) -> List[int]:
        return [len(b) for b in self.per_vertex]


def decompose_pool(pool: Union[PathPool, Iterable[Clause]], encoding: InputEncoding) -> Decomposition:
    """Route each clause to S^0 or to the vertex its full selector path names"""
    n, k = encoding.n, encoding.id_bits
    clauses = pool.clauses() if isinstance(pool, PathPool) else list(pool)
    selector_only: List[Clause] = []
    per_vertex: List[List[Clause]] = [[] for _ in range(n)]
    errors: List[Dict[Clause, Optional[float]]] = [{} for _ in range(n)]
    accepted: List[Dict[Clause, Optional[bool]]] = [{} for _ in range(n)]
    seen = [set() for _ in range(n)]

    for c in clauses:
        ids = {}
        for p in _id_literals(c, encoding):
            if ids.get(p.var, p.positive) != p.positive:
                raise PoolCorruptionError(f'clause {c} fixes id bit {p.var} both ways', clause=str(c))
            ids[p.var] = p.positive
        body = Clause(tuple(p for p in c if not encoding.is_id_var(p.var)))
        if len(ids) < k:
            if len(body):
                raise PoolCorruptionError(f'clause {c} extends a partial selector path', clause=str(c))
            selector_only.append(c)
            continue
        code = 0
        for j in range(k):
            code = (code << 1) | int(ids[j])
        if code >= n:
            raise PoolCorruptionError(f'clause {c} selects unused code {code}', clause=str(c), code=code)
        key = body.canonical()
        if key in seen[code]:
            continue
        seen[code].add(key)
        per_vertex[code].append(body)
        entry = pool.entry(c) if isinstance(pool, PathPool) else None
        errors[code][key] = entry.error if entry is not None else None
        accepted[code][key] = entry.accepted if entry is not None else None
    return Decomposition(encoding, selector_only, per_vertex, errors, accepted)


# Valuation weights

@dataclass
class ValuationTable:
    mode: str
    clauses: List[List[Clause]]
    samples: int
    accuracy: float
    marginal: List[np.ndarray] = field(default_factory=list)
    table: Optional[np.ndarray] = None
    index: List[Dict[Clause, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.index:
            self.index = [{c.canonical(): i for i, c in enumerate(cs)} for cs in self.clauses]

    def position(self, u: int, body: Clause) -> int:
        try:
            return self.index[u][body.canonical()]
        except KeyError:
            raise PoolCorruptionError(f'path {body} of vertex {u} is not in the valuation table',
                                      vertex=u, clause=str(body)) from None

    def weights(self, u: int) -> Dict[Clause, float]:
        return {c.canonical(): float(self.marginal[u][i]) for i, c in enumerate(self.clauses[u])}


def layer_one_inputs(batch: InstanceBatch, enc: InputEncoding) -> List[np.ndarray]:
    """enc(u, x, Init) for every vertex u"""
    return [enc.encode_batch(u, batch, batch.init) for u in range(enc.n)]


def hoeffding_samples(t: float, delta: float, count: int = 1) -> int:
    """Samples making `count` means of [-1, 1] variables t-accurate at confidence 1 - delta"""
    return math.ceil(2.0 * math.log(2.0 * count / delta) / t ** 2)


def hoeffding_accuracy(samples: int, delta: float, count: int = 1) -> float:
    return math.sqrt(2.0 * math.log(2.0 * count / delta) / samples)


def estimate_v(decomposition: Decomposition, source, epsilon: float, delta: float, rng: np.random.Generator,
               mode: str = 'marginal', tuple_cap: int = 50000, max_samples: int = 200000,
               batch: Optional[InstanceBatch] = None) -> ValuationTable:
    """Empirical correlations of layer-1 path indicators with 2 nu - 1.

    A supplied batch is used as is (for example the full instance space);
    otherwise the Hoeffding count is drawn uniformly, capped by max_samples.
    """
    enc = decomposition.encoding
    clauses = [list(b) if b else [Clause()] for b in decomposition.per_vertex]
    total = sum(len(cs) for cs in clauses)
    if mode == 'exact':
        count = int(np.prod([len(cs) for cs in clauses], dtype=np.float64))
        if count > tuple_cap:
            raise ResourceBoundError(f'{count} leaf tuples exceed the cap of {tuple_cap}', tuples=count, cap=tuple_cap)
        t = epsilon / total
    elif mode == 'marginal':
        count = total
        t = epsilon
    else:
        raise DistillationError(f'unknown valuation mode {mode!r}', mode=mode)

    if batch is None:
        samples = min(hoeffding_samples(t, delta, count), max_samples)
        batch = sample_instances(enc.n, samples, rng)
    samples = len(batch)
    accuracy = hoeffding_accuracy(samples, delta, count)
    sign = 2.0 * source.predict(batch).astype(np.float64) - 1.0
    inputs = layer_one_inputs(batch, enc)
    indicators = [np.stack([c.evaluate_batch(inputs[u]) for c in clauses[u]], axis=1).astype(np.float64)
                  for u in range(enc.n)]
    marginal = [(ind * sign[:, None]).mean(axis=0) for ind in indicators]

    table = None
    if mode == 'exact':
        letters = 'abcdefghijklmnopqrstuvwxy'[:enc.n]
        spec = ','.join(f'z{a}' for a in letters) + ',z->' + letters
        table = np.einsum(spec, *indicators, sign, optimize=True) / samples
    logger.info('phase2.v_estimated', mode=mode, samples=samples, accuracy=accuracy, entries=count)
    return ValuationTable(mode, clauses, samples, accuracy, marginal=marginal, table=table)


def _cell_output(trees: Sequence[DecisionTree], leaves: Sequence[Tuple[Clause, int]], l: int,
                 enc: InputEncoding) -> Optional[int]:
    """Output of the leaf-tuple cell, None when the cell is empty"""
    labels = [label for _, label in leaves]
    if l == 1:
        return labels[-1]
    fixed: Dict[int, int] = {}
    for body, _ in leaves:
        for p in body:
            if enc.kind_of(p.var)[0] != 'edge':
                continue
            if fixed.get(p.var, int(p.positive)) != int(p.positive):
                return None
            fixed[p.var] = int(p.positive)
    h = labels
    for t in range(2, l + 1):
        assignment = dict(fixed)
        assignment.update({enc.dp_var(w): h[w] for w in range(enc.n)})
        nxt = []
        for v, tree in enumerate(trees):
            bit = tree.evaluate_partial(assignment)
            if bit is None:
                raise UndefinedValuationError(
                    f'layer {t} of vertex {v} reads a bit the leaf cell does not fix; use mc_agreement',
                    layer=t, vertex=v)
            nxt.append(bit)
        h = nxt
    return h[-1]


def valuation(trees: Sequence[DecisionTree], table: ValuationTable, l: int) -> float:
    """Sum over leaf tuples of (2 T(S_1..S_n) - 1) times the tuple weight"""
    if table.table is None:
        raise UndefinedValuationError('valuation needs an exact-mode table')
    n = len(trees)
    enc = InputEncoding(n)
    leaf_lists = [t.leaf_paths() for t in trees]
    total = 0.0
    for leaves in itertools.product(*leaf_lists):
        position = tuple(table.position(u, body) for u, (body, _) in enumerate(leaves))
        weight = float(table.table[position])
        out = _cell_output(trees, leaves, l, enc)
        if out is None:
            continue
        total += (2 * out - 1) * weight
    return total


# Tree-building DP

class TreeBuilder:
    """best(S, s') over trees of size <= s' whose root-prefix paths lie in the pool.

    Scores map canonical clauses to a weight w (leaf scores (-w, w)) or to a
    pair (score if labelled 0, score if labelled 1). The pool is indexed once;
    set_scores and set_score_table swap the scores and clear the memo.
    """

    def __init__(self, pool: Iterable[Clause], scores: Optional[Mapping[Clause, Score]] = None,
                 depth: Optional[int] = None):
        self.keys: List[Clause] = []
        self.position: Dict[Clause, int] = {}
        for c in pool:
            key = c.canonical()
            if key not in self.position:
                self.position[key] = len(self.keys)
                self.keys.append(key)
        if not self.keys:
            raise DistillationError('tree-building DP needs a non-empty pool')
        self.depth = depth
        # children[i]: (var, index of S ∧ ¬var, index of S ∧ var), sorted by var
        self.children: List[List[Tuple[int, int, int]]] = [[] for _ in self.keys]
        for i, key in enumerate(self.keys):
            for p in key:
                if not p.positive:
                    continue
                parent = self.position.get(Clause(tuple(q for q in key if q != p)).canonical())
                sibling = self.position.get(Clause(tuple(q if q != p else p.negate() for q in key)).canonical())
                if parent is not None and sibling is not None:
                    self.children[parent].append((p.var, sibling, i))
        for options in self.children:
            options.sort()
        self.set_scores(scores or {})

    def set_scores(self, scores: Mapping[Clause, Score]):
        table = np.zeros((len(self.keys), 2))
        for c, s in scores.items():
            i = self.position.get(c.canonical())
            if i is not None:
                table[i] = s if isinstance(s, tuple) else (-s, s)
        self.set_score_table(table)

    def set_score_table(self, table: np.ndarray):
        """Row i holds the scores of key i labelled 0 and labelled 1"""
        table = np.asarray(table, dtype=np.float64)
        if table.shape != (len(self.keys), 2):
            raise DistillationError('score table does not match the pool', shape=list(table.shape),
                                    pool=len(self.keys))
        self.rows = [(float(a), float(b)) for a, b in table]
        self.memo: Dict[Tuple[int, int], Tuple[float, int, int, Optional[Tuple[int, int, int]]]] = {}

    def _index(self, clause: Clause) -> int:
        i = self.position.get(clause.canonical())
        if i is None:
            raise DistillationError(f'clause {clause} is not in the pool', clause=str(clause))
        return i

    def best(self, clause: Clause, budget: int) -> Tuple[float, int, DecisionTree]:
        i = self._index(clause)
        budget = budget if budget % 2 else budget - 1
        value, size, _, _ = self._solve(i, budget)
        return value, size, DecisionTree(self._build(i, budget))

    def _can_split(self, i: int, budget: int) -> bool:
        return budget >= 3 and (self.depth is None or len(self.keys[i]) < self.depth)

    def _solve(self, i: int, budget: int) -> Tuple[float, int, int, Optional[Tuple[int, int, int]]]:
        cached = self.memo.get((i, budget))
        if cached is not None:
            return cached
        s0, s1 = self.rows[i]
        best = (max(s0, s1), 1, -1, None)
        if self._can_split(i, budget):
            for var, neg, pos in self.children[i]:
                for left in range(1, budget - 1, 2):
                    lv, ls, _, _ = self._solve(neg, left)
                    rv, rs, _, _ = self._solve(pos, budget - 1 - left)
                    candidate = (lv + rv, ls + rs + 1, var, (left, neg, pos))
                    if _better(candidate, best):
                        best = candidate
        self.memo[(i, budget)] = best
        return best

    def values(self, tables: np.ndarray, budget: int) -> np.ndarray:
        """best(∅, budget) values for a stack of score tables, shape (T, keys, 2)"""
        leaf_best = np.asarray(tables, dtype=np.float64).max(axis=2)
        memo: Dict[Tuple[int, int], np.ndarray] = {}

        def solve(i: int, b: int) -> np.ndarray:
            cached = memo.get((i, b))
            if cached is not None:
                return cached
            best = leaf_best[:, i]
            if self._can_split(i, b):
                for _, neg, pos in self.children[i]:
                    for left in range(1, b - 1, 2):
                        best = np.maximum(best, solve(neg, left) + solve(pos, b - 1 - left))
            memo[(i, b)] = best
            return best

        return solve(self._index(Clause()), budget if budget % 2 else budget - 1)

    def _build(self, i: int, budget: int) -> TreeNode:
        _, _, var, split = self._solve(i, budget)
        if split is None:
            s0, s1 = self.rows[i]
            return Leaf(1 if s1 >= s0 else 0)
        left, neg, pos = split
        return Node(var, self._build(neg, left), self._build(pos, budget - 1 - left))

    def candidates(self, budgets: Iterable[int], limit: int) -> List[DecisionTree]:
        """Distinct DP optima at increasing size budgets"""
        out: List[DecisionTree] = []
        for budget in budgets:
            _, _, tree = self.best(Clause(), budget)
            if tree not in out:
                out.append(tree)
            if len(out) >= limit:
                break
        return out

    def enumerate(self, budget: int, limit: Optional[int] = None) -> List[DecisionTree]:
        """Every tree of size <= budget over the pool; no node splits into two equal leaves"""
        root = self._index(Clause())
        cache: Dict[Tuple[int, int], List[Tuple[TreeNode, int]]] = {}
        found = self._trees(root, budget if budget % 2 else budget - 1, limit, cache)
        return [DecisionTree(t) for t, _ in found]

    def _trees(self, i: int, budget: int, limit: Optional[int],
               cache: Dict[Tuple[int, int], List[Tuple[TreeNode, int]]]) -> List[Tuple[TreeNode, int]]:
        cached = cache.get((i, budget))
        if cached is not None:
            return cached
        out: List[Tuple[TreeNode, int]] = [(Leaf(0), 1), (Leaf(1), 1)]
        if self._can_split(i, budget):
            for var, neg, pos in self.children[i]:
                for left, ls in self._trees(neg, budget - 2, limit, cache):
                    for right, rs in self._trees(pos, budget - 1 - ls, limit, cache):
                        if isinstance(left, Leaf) and isinstance(right, Leaf) and left.label == right.label:
                            continue
                        out.append((Node(var, left, right), ls + rs + 1))
                        if limit is not None and len(out) >= limit:
                            cache[(i, budget)] = out
                            return out
        cache[(i, budget)] = out
        return out


def _better(a: Tuple, b: Tuple) -> bool:
    if a[0] > b[0] + TIE_TOLERANCE:
        return True
    if a[0] < b[0] - TIE_TOLERANCE:
        return False
    return (a[1], a[2]) < (b[1], b[2])


def tree_dp_single(pool: Iterable[Clause], scores: Mapping[Clause, Score], size: int,
                   depth: Optional[int] = None) -> Tuple[DecisionTree, float]:
    builder = TreeBuilder(pool, scores, depth=depth)
    if Clause() not in builder.position:
        raise DistillationError('tree-building DP needs the empty clause in its pool')
    value, _, tree = builder.best(Clause(), size)
    return tree, value


def tree_score(tree: DecisionTree, scores: Mapping[Clause, Score]) -> float:
    builder_scores = {c.canonical(): s for c, s in scores.items()}
    total = 0.0
    for body, label in tree.leaf_paths():
        score = builder_scores.get(body.canonical(), 0.0)
        pair = score if isinstance(score, tuple) else (-score, score)
        total += pair[label]
    return total


# Agreement

@dataclass(frozen=True)
class Agreement:
    estimate: float
    half_width: float
    samples: int

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def mc_agreement(candidate: LocalIterationModel, source, samples: int, rng: Optional[np.random.Generator] = None,
                 delta: float = 0.05, batch: Optional[InstanceBatch] = None) -> Agreement:
    """Fraction of instances where the candidate output equals the source prediction"""
    if batch is None:
        if samples < 1:
            raise DistillationError('mc_agreement needs at least one sample', samples=samples)
        batch = sample_instances(candidate.n, samples, rng)
    agree = candidate.predict(batch) == source.predict(batch)
    N = len(batch)
    return Agreement(float(np.mean(agree)), math.sqrt(math.log(2.0 / delta) / (2.0 * N)), N)


def evaluation_batch(n: int, samples: int, rng: np.random.Generator) -> InstanceBatch:
    """The full instance space when it is small, else a uniform sample"""
    if instance_bit_count(n) <= MAX_ENUMERATED_EVAL_BITS:
        return enumerate_instances(n)
    return sample_instances(n, samples, rng)


# Joint selection

@dataclass(frozen=True)
class SelectionConfig:
    mode: str = 'shortlist'
    size: int = 7
    depth: Optional[int] = 2
    shortlist: int = 200
    candidates: int = 6
    eval_samples: int = 4000
    max_product: int = 4096
    refine_rounds: int = 3
    coordinate_rounds: int = 5
    search: bool = True
    search_limit: int = 20000
    finalists: int = 64
    pivot_trials: int = 200


@dataclass
class Selection:
    trees: Tuple[DecisionTree, ...]
    agreement: Optional[float]
    paths_per_vertex: List[int]
    candidates_per_vertex: List[int]
    scored: int = 0
    refinements: int = 0
    searched: int = 0


def _agreement_on(trees: Sequence[DecisionTree], l: int, batch: InstanceBatch, nu: np.ndarray) -> float:
    model = LocalIterationModel(len(trees), l, tuple(trees))
    return float(np.mean(model.predict(batch) == nu))


def shortlist_paths(decomposition: Decomposition, table: ValuationTable, u: int, limit: int) -> List[Clause]:
    bodies = decomposition.bodies(u)
    weights = table.weights(u) if table.marginal else {}

    def rank(body: Clause):
        error = decomposition.error(u, body)
        return (math.inf if error is None else error, -abs(weights.get(body.canonical(), 0.0)))

    ranked = sorted(bodies, key=rank)
    chosen = ranked[:limit]
    if Clause() not in {c.canonical() for c in chosen}:
        chosen = [Clause()] + chosen[:max(limit - 1, 0)]
    return chosen


def joint_select(decomposition: Decomposition, table: ValuationTable, source, l: int, cfg: SelectionConfig,
                 rng: np.random.Generator) -> Selection:
    if cfg.mode == 'exact_joint':
        return _select_exact_joint(decomposition, table, l, cfg)
    if cfg.mode != 'shortlist':
        raise DistillationError(f'unknown phase-2 mode {cfg.mode!r}', mode=cfg.mode)
    return _select_shortlist(decomposition, table, source, l, cfg, rng)


def _select_exact_joint(decomposition: Decomposition, table: ValuationTable, l: int,
                        cfg: SelectionConfig) -> Selection:
    """Block-coordinate ascent of the valuation; each block is solved exactly by the DP"""
    n = decomposition.encoding.n
    if l != 1:
        raise UndefinedValuationError('exact-joint selection needs l = 1', l=l)
    if n > 3:
        raise ResourceBoundError('exact-joint selection is limited to n <= 3', n=n)
    if table.table is None:
        raise UndefinedValuationError('exact-joint selection needs an exact-mode table')
    trees: List[DecisionTree] = [leaf(1) for _ in range(n)]
    for sweep in range(cfg.coordinate_rounds):
        changed = False
        for u in range(n):
            scores = np.zeros((len(table.clauses[u]), 2))
            others = [trees[w].leaf_paths() if w != u else [(None, None)] for w in range(n)]
            for combo in itertools.product(*others):
                position = tuple(slice(None) if w == u else table.position(w, combo[w][0]) for w in range(n))
                weights = table.table[position]
                for b in (0, 1):
                    out = b if u == n - 1 else combo[n - 1][1]
                    scores[:, b] += (2 * out - 1) * weights
            score_map = {c: (float(s[0]), float(s[1])) for c, s in zip(table.clauses[u], scores)}
            tree, _ = tree_dp_single(table.clauses[u], score_map, cfg.size, depth=cfg.depth)
            if tree != trees[u]:
                trees[u] = tree
                changed = True
        if not changed:
            break
    value = valuation(trees, table, l)
    logger.info('phase2.exact_joint_done', valuation=value, sizes=[t.size for t in trees])
    return Selection(tuple(trees), None, [len(c) for c in table.clauses], [1] * n)


def _select_shortlist(decomposition: Decomposition, table: ValuationTable, source, l: int, cfg: SelectionConfig,
                      rng: np.random.Generator) -> Selection:
    enc = decomposition.encoding
    n = enc.n
    budgets = list(range(1, cfg.size + 1, 2))
    pools: List[List[Clause]] = []
    candidates: List[List[DecisionTree]] = []
    for u in range(n):
        if not decomposition.bodies(u):
            pools.append([Clause()])
            candidates.append([leaf(0), leaf(1)])
            continue
        pool = shortlist_paths(decomposition, table, u, cfg.shortlist)
        pools.append(pool)
        builder = TreeBuilder(pool, table.weights(u), depth=cfg.depth)
        found = builder.candidates(budgets, cfg.candidates)
        for constant in (leaf(1), leaf(0)):
            if len(found) < cfg.candidates and constant not in found:
                found.append(constant)
        candidates.append(found)
    logger.info('phase2.candidates', paths=[len(p) for p in pools], candidates=[len(c) for c in candidates])

    batch = evaluation_batch(n, cfg.eval_samples, rng)
    nu = source.predict(batch)
    product = int(np.prod([len(c) for c in candidates], dtype=np.float64))
    scored = 0
    if product <= cfg.max_product:
        best, best_score = None, -1.0
        for combo in itertools.product(*candidates):
            score = _agreement_on(combo, l, batch, nu)
            scored += 1
            if score > best_score:
                best, best_score = list(combo), score
    else:
        best = [c[0] for c in candidates]
        best_score = _agreement_on(best, l, batch, nu)
        scored += 1
        for _ in range(cfg.coordinate_rounds):
            improved = False
            for u in range(n):
                for tree in candidates[u]:
                    if tree == best[u]:
                        continue
                    trial = best[:u] + [tree] + best[u + 1:]
                    score = _agreement_on(trial, l, batch, nu)
                    scored += 1
                    if score > best_score:
                        best, best_score, improved = trial, score, True
            if not improved:
                break

    refinements = 0
    for _ in range(cfg.refine_rounds):
        improved = False
        for u in range(n):
            tree = _refine_vertex(best, u, pools[u], l, batch, nu, cfg)
            if tree is None or tree == best[u]:
                continue
            trial = best[:u] + [tree] + best[u + 1:]
            score = _agreement_on(trial, l, batch, nu)
            if score > best_score:
                best, best_score, improved = trial, score, True
                refinements += 1
        if not improved:
            break
    logger.info('phase2.shortlist_done', scored=scored, refinements=refinements, agreement=best_score)

    searched = 0
    if cfg.search and l in (1, 2) and best_score < 1.0 - TIE_TOLERANCE:
        search = OutputSearch(decomposition, l, batch, nu, cfg)
        found, _ = search.run(best, best_score)
        searched = search.evaluated
        score = _agreement_on(found, l, batch, nu)
        if score > best_score + TIE_TOLERANCE:
            best, best_score = found, score
        root = best[n - 1].root
        logger.info('phase2.search_done', evaluated=search.evaluated, responses=search.responses,
                    agreement=best_score, root=enc.literal_name(root.var) if isinstance(root, Node) else None)
    return Selection(tuple(best), best_score, [len(p) for p in pools], [len(c) for c in candidates],
                     scored=scored, refinements=refinements, searched=searched)


def _refine_vertex(trees: List[DecisionTree], u: int, pool: List[Clause], l: int, batch: InstanceBatch,
                   nu: np.ndarray, cfg: SelectionConfig) -> Optional[DecisionTree]:
    """Re-solve vertex u's tree with leaf scores from forcing its hidden state.

    For each layer t, forcing h_{u,t} to b gives the output out_b; a leaf on
    path S labelled b scores the mean of AND_S(enc(u, x, h_{t-1})) times
    (2[out_b = nu] - 1). Scores of all layers are summed.
    """
    n = len(trees)
    model = LocalIterationModel(n, l, tuple(trees))
    _, H = model.run_batch(batch)
    enc = model.encoding
    scores = np.zeros((len(pool), 2))
    for t in range(1, l + 1):
        X = enc.encode_batch(u, batch, H[t - 1])
        indicators = np.stack([c.evaluate_batch(X) for c in pool], axis=1).astype(np.float64)
        for b in (0, 1):
            out, _ = model.run_batch(batch, forced={(u, t): b})
            reward = 2.0 * (out == nu) - 1.0
            scores[:, b] += indicators.T @ reward / len(batch)
    score_map = {c: (float(s[0]), float(s[1])) for c, s in zip(pool, scores)}
    tree, _ = tree_dp_single(pool, score_map, cfg.size, depth=cfg.depth)
    return tree


class OutputSearch:
    """Exact search over the output vertex's tree for one or two rounds.

    With l <= 2 the output reads only the layer-1 states of the vertices
    whose dp bits its tree tests. A candidate output tree therefore fixes a
    table out[alpha] over those states, and each of their trees is a best
    response to that table, found exactly by the tree DP on layer-1 inputs.
    """

    def __init__(self, decomposition: Decomposition, l: int, batch: InstanceBatch, nu: np.ndarray,
                 cfg: SelectionConfig):
        if l not in (1, 2):
            raise DistillationError(f'output search needs l in (1, 2), got {l}', l=l)
        self.decomposition = decomposition
        self.enc = decomposition.encoding
        self.o = self.enc.n - 1
        self.l = l
        self.batch = batch
        self.nu = np.asarray(nu, dtype=np.uint8)
        self.cfg = cfg
        self.rows = np.arange(len(batch))
        self.inputs = layer_one_inputs(batch, self.enc)
        self._builders: Dict[int, TreeBuilder] = {}
        self._indicators: Dict[int, np.ndarray] = {}
        self._enumerated: Dict[int, Tuple[List[DecisionTree], np.ndarray]] = {}
        self.evaluated = 0
        self.responses = 0

    def builder(self, w: int) -> TreeBuilder:
        if w not in self._builders:
            builder = TreeBuilder([Clause()] + list(self.decomposition.bodies(w)), depth=self.cfg.depth)
            self._builders[w] = builder
            self._indicators[w] = np.stack([k.evaluate_batch(self.inputs[w]) for k in builder.keys],
                                           axis=1).astype(np.float64)
        return self._builders[w]

    def enumerated(self, w: int) -> Tuple[List[DecisionTree], np.ndarray]:
        """Every tree over w's pool with its layer-1 outputs, one row per tree"""
        if w not in self._enumerated:
            trees = self.builder(w).enumerate(self.cfg.size, self.cfg.search_limit)
            H = np.stack([t.evaluate_batch(self.inputs[w]) for t in trees]).astype(bool)
            self._enumerated[w] = (trees, H)
        return self._enumerated[w]

    def respond(self, w: int, match: np.ndarray) -> Tuple[DecisionTree, np.ndarray]:
        """Tree for w maximizing agreement when its layer-1 bit b scores match[b]"""
        builder = self.builder(w)
        rewards = 2.0 * match.astype(np.float64) - 1.0
        builder.set_score_table(self._indicators[w].T @ rewards.T / len(self.batch))
        _, _, tree = builder.best(Clause(), self.cfg.size)
        self.responses += 1
        return tree, tree.evaluate_batch(self.inputs[w])

    def output_candidates(self) -> List[DecisionTree]:
        bodies = self.decomposition.admissible(self.o)
        builder = TreeBuilder([Clause()] + bodies, depth=self.cfg.depth)
        if not builder.children[builder.position[Clause()]]:
            builder = TreeBuilder([Clause()] + list(self.decomposition.bodies(self.o)), depth=self.cfg.depth)
        trees = builder.enumerate(self.cfg.size, self.cfg.search_limit)
        return sorted(trees, key=lambda t: (len(self.reads(t)), t.size))

    def reads(self, tree: DecisionTree) -> List[int]:
        """Vertices other than the output whose dp bits the tree tests"""
        dp = {self.enc.dp_var(w): w for w in range(self.enc.n) if w != self.o}
        return sorted(dp[v] for v in tree.variables() if v in dp)

    def table(self, tree: DecisionTree, reads: List[int]) -> np.ndarray:
        """out[alpha] for every assignment alpha of the read vertices' layer-1 bits"""
        first = tree.evaluate_batch(self.inputs[self.o])
        if self.l == 1:
            return first[None, :]
        H = np.zeros((len(self.batch), self.enc.n), dtype=np.uint8)
        H[:, self.o] = first
        out = np.empty((1 << len(reads), len(self.batch)), dtype=np.uint8)
        for alpha in range(1 << len(reads)):
            for j, w in enumerate(reads):
                H[:, w] = (alpha >> j) & 1
            out[alpha] = tree.evaluate_batch(self.enc.encode_batch(self.o, self.batch, H))
        return out

    def _slice(self, match: np.ndarray, states: Dict[int, np.ndarray], j: int) -> np.ndarray:
        base = np.zeros(len(self.batch), dtype=np.int64)
        for k, h in states.items():
            if k != j:
                base |= h.astype(np.int64) << k
        return np.stack([match[base | (b << j), self.rows] for b in (0, 1)])

    def _score(self, match: np.ndarray, states: Dict[int, np.ndarray]) -> float:
        index = np.zeros(len(self.batch), dtype=np.int64)
        for k, h in states.items():
            index |= h.astype(np.int64) << k
        return float(np.mean(match[index, self.rows]))

    def alternate(self, reads: List[int], match: np.ndarray, trees: Dict[int, DecisionTree],
                  states: Dict[int, np.ndarray], fixed: Iterable[int] = ()) -> Tuple[float, Dict[int, DecisionTree]]:
        """Best responses in turn until no read vertex improves"""
        trees, states = dict(trees), dict(states)
        score = self._score(match, states)
        free = [j for j in range(len(reads)) if j not in set(fixed)]
        for _ in range(self.cfg.coordinate_rounds):
            improved = False
            for j in free:
                tree, h = self.respond(reads[j], self._slice(match, states, j))
                trial = self._score(match, {**states, j: h})
                if trial > score + TIE_TOLERANCE:
                    trees[j], states[j], score, improved = tree, h, trial, True
            if not improved or score >= 1.0 - TIE_TOLERANCE:
                break
        return score, trees

    def _optimistic(self, reads: List[int], match: np.ndarray) -> Tuple[Dict[int, DecisionTree], Dict[int, np.ndarray]]:
        """Each read vertex answers as if the others took their most favourable bits"""
        trees, states = {}, {}
        alphas = np.arange(match.shape[0])
        for j, w in enumerate(reads):
            rows = [match[((alphas >> j) & 1) == b].max(axis=0) for b in (0, 1)]
            trees[j], states[j] = self.respond(w, np.stack(rows))
        return trees, states

    def solve(self, reads: List[int], match: np.ndarray,
              incumbent: Sequence[DecisionTree]) -> Tuple[float, Dict[int, DecisionTree]]:
        """Best read-vertex trees for a fixed output tree"""
        if not reads:
            return float(np.mean(match[0])), {}
        if len(reads) == 1:
            best, h = self.respond(reads[0], match)
            return self._score(match, {0: h}), {0: best}
        start_trees = {j: incumbent[w] for j, w in enumerate(reads)}
        start_states = {j: incumbent[w].evaluate_batch(self.inputs[w]) for j, w in enumerate(reads)}
        results = [self.alternate(reads, match, start_trees, start_states)]
        if results[0][0] < 1.0 - TIE_TOLERANCE:
            results.append(self.alternate(reads, match, *self._optimistic(reads, match)))
        return max(results, key=lambda r: r[0])

    def _pivot_position(self, tree: DecisionTree, reads: List[int]) -> int:
        root = tree.root
        if isinstance(root, Node) and self.enc.kind_of(root.var)[0] == 'dp':
            w = self.enc.kind_of(root.var)[1]
            if w in reads:
                return reads.index(w)
        return 0

    def _tables(self, w: int, slices: np.ndarray) -> np.ndarray:
        rewards = 2.0 * slices.astype(np.float64) - 1.0
        return np.einsum('tbn,nm->tmb', rewards, self._indicators[w]) / len(self.batch)

    def pivot(self, tree: DecisionTree, reads: List[int], match: np.ndarray, floor: float,
              incumbent: Sequence[DecisionTree]) -> Tuple[float, Dict[int, DecisionTree]]:
        """Enumerate one read vertex's trees; the next read vertex answers each by the DP.

        With two read vertices every answer is exact, so the pair found is the
        best over both pools. A third read vertex starts from its incumbent.
        """
        j = self._pivot_position(tree, reads)
        pivots, H = self.enumerated(reads[j])
        alphas = np.arange(match.shape[0])
        best0 = match[((alphas >> j) & 1) == 0].max(axis=0)
        best1 = match[((alphas >> j) & 1) == 1].max(axis=0)
        bounds = np.where(H, best1, best0).mean(axis=1)
        order = np.array([i for i in np.argsort(-bounds, kind='stable') if bounds[i] > floor + TIE_TOLERANCE],
                         dtype=np.int64)
        if not len(order):
            return floor, {}
        others = [k for k in range(len(reads)) if k != j]
        k = others[0]
        states = {m: incumbent[reads[m]].evaluate_batch(self.inputs[reads[m]]) for m in others}
        base = np.zeros(len(self.batch), dtype=np.int64)
        for m in others[1:]:
            base |= states[m].astype(np.int64) << m
        builder = self.builder(reads[k])
        values = np.empty(len(order))
        for start in range(0, len(order), PIVOT_CHUNK):
            chunk = order[start:start + PIVOT_CHUNK]
            index = base[None, :] | (H[chunk].astype(np.int64) << j)
            slices = np.stack([match[index | (b << k), self.rows[None, :]] for b in (0, 1)], axis=1)
            values[start:start + len(chunk)] = builder.values(self._tables(reads[k], slices), self.cfg.size)

        best_score, best_trees = floor, {}
        for r in np.argsort(-values, kind='stable')[:self.cfg.pivot_trials]:
            if (values[r] + 1.0) / 2.0 <= best_score + TIE_TOLERANCE and len(reads) == 2:
                break
            idx = order[r]
            trees = {m: incumbent[reads[m]] for m in others}
            trees[j] = pivots[idx]
            score, trees = self.alternate(reads, match, trees, {**states, j: H[idx].astype(np.uint8)}, fixed=(j,))
            if score > best_score + TIE_TOLERANCE:
                best_score, best_trees = score, trees
                if score >= 1.0 - TIE_TOLERANCE:
                    break
        return best_score, best_trees

    def run(self, incumbent: Sequence[DecisionTree], score: float) -> Tuple[List[DecisionTree], float]:
        best, best_score = list(incumbent), score

        def adopt(tree: DecisionTree, reads: List[int], trees: Dict[int, DecisionTree]) -> List[DecisionTree]:
            out = list(best)
            out[self.o] = tree
            for j, t in trees.items():
                out[reads[j]] = t
            return out

        if self.l == 1:
            tree, h = self.respond(self.o, np.stack([self.nu == 0, self.nu == 1]))
            trial = float(np.mean(h == self.nu))
            if trial > best_score + TIE_TOLERANCE:
                best, best_score = adopt(tree, [], {}), trial
            return best, best_score

        seen = set()
        finalists = []
        for tree in self.output_candidates():
            if best_score >= 1.0 - TIE_TOLERANCE:
                break
            reads = self.reads(tree)
            out = self.table(tree, reads)
            key = (tuple(reads), out.tobytes())
            if key in seen:
                continue
            seen.add(key)
            match = out == self.nu[None, :]
            bound = float(np.mean(match.max(axis=0)))
            if bound <= best_score + TIE_TOLERANCE:
                continue
            self.evaluated += 1
            trial, trees = self.solve(reads, match, best)
            if trial > best_score + TIE_TOLERANCE:
                best, best_score = adopt(tree, reads, trees), trial
            if len(reads) >= 2 and trial < bound - TIE_TOLERANCE:
                finalists.append((bound, trial, self.evaluated, tree, reads, match))

        finalists.sort(key=lambda f: (-f[0], -f[1], f[2]))
        for bound, _, _, tree, reads, match in finalists[:self.cfg.finalists]:
            if best_score >= 1.0 - TIE_TOLERANCE or bound <= best_score + TIE_TOLERANCE:
                break
            trial, trees = self.pivot(tree, reads, match, best_score, best)
            if trees and trial > best_score + TIE_TOLERANCE:
                best, best_score = adopt(tree, reads, trees), trial
        return best, best_score


# End to end

@dataclass(frozen=True)
class DistillConfig:
    R: int = 2
    phase1: str = 'exact'
    k: Optional[int] = None
    gate: Optional[str] = None
    phase2: str = 'shortlist'
    delta: float = 0.1
    v_epsilon: float = 0.1
    v_delta: float = 0.05
    v_samples: int = 200000
    tuple_cap: int = 50000
    pool_cap: int = 100000
    size: Optional[int] = None
    shortlist: int = 200
    candidates: int = 6
    eval_samples: int = 4000
    max_product: int = 4096
    refine_rounds: int = 3
    search: bool = True
    search_limit: int = 20000
    seed: int = 0
    n_jobs: int = 1

    def selection(self) -> SelectionConfig:
        size = self.size if self.size is not None else 2 ** (self.R + 1) - 1
        return SelectionConfig(mode=self.phase2, size=size, depth=self.R, shortlist=self.shortlist,
                               candidates=self.candidates, eval_samples=self.eval_samples,
                               max_product=self.max_product, refine_rounds=self.refine_rounds,
                               search=self.search, search_limit=self.search_limit)


@dataclass
class DistillReport:
    n: int
    l: int
    R: int
    k: Optional[int]
    backend: str
    stage: str = 'start'
    probes: int = 0
    probe_fraction: Optional[float] = None
    level_sizes: List[int] = field(default_factory=list)
    survivor_sizes: List[int] = field(default_factory=list)
    paths_per_vertex: List[int] = field(default_factory=list)
    candidates_per_vertex: List[int] = field(default_factory=list)
    v_samples: Optional[int] = None
    v_accuracy: Optional[float] = None
    source_agreement: Optional[Agreement] = None
    truth_agreement: Optional[float] = None
    source_accuracy: Optional[float] = None
    elapsed: float = 0.0
    config: Dict[str, Any] = field(default_factory=dict)

    def row(self) -> Dict[str, Any]:
        return {
            'depth': self.R,
            'k': self.k if self.k is not None else 'inf',
            'source_acc': self.source_accuracy,
            'distill_acc': self.truth_agreement,
            'probes': self.probes,
            'probe_frac': self.probe_fraction,
        }

    def diagnostics(self) -> Dict[str, Any]:
        return {
            'paths_per_vertex': _mean_or_none(self.paths_per_vertex),
            'cand_trees_per_vertex': _mean_or_none(self.candidates_per_vertex),
            'source_agreement': self.source_agreement.estimate if self.source_agreement else None,
        }

    def as_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out['source_agreement'] = self.source_agreement.as_dict() if self.source_agreement else None
        return out


def _mean_or_none(values: Sequence[int]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def distill(source, config: DistillConfig, probe_cfg: Optional[ProbeConfig] = None,
            truth: Optional[LocalIterationModel] = None) -> Tuple[LocalIterationModel, DistillReport]:
    probe_cfg = probe_cfg or ProbeConfig(samples=4000)
    truth = truth if truth is not None else getattr(source, 'truth', None)
    n, l = source.n, source.l
    report = DistillReport(n, l, config.R, config.k, source.backend,
                           config={**asdict(config), 'probe': asdict(probe_cfg)})
    started = time.perf_counter()
    try:
        if config.phase1 == 'exact':
            pool = phase1_exact(source, config.R, l, config.delta, probe_cfg, seed=config.seed,
                                pool_cap=config.pool_cap, n_jobs=config.n_jobs)
        elif config.phase1 == 'topk':
            pool = phase1_topk(source, config.R, l, config.k, probe_cfg, seed=config.seed, gate=config.gate,
                               delta=config.delta, pool_cap=config.pool_cap, n_jobs=config.n_jobs)
        else:
            raise DistillationError(f'unknown phase-1 mode {config.phase1!r}', mode=config.phase1)
        report.stage = 'phase1'
        report.probes = pool.probes
        report.probe_fraction = pool.probe_fraction
        report.level_sizes = pool.level_sizes
        report.survivor_sizes = [len(s) for s in pool.survivors]

        decomposition = decompose_pool(pool, pool.encoding)
        report.stage = 'decompose'

        v_mode = 'exact' if config.phase2 == 'exact_joint' else 'marginal'
        table = estimate_v(decomposition, source, config.v_epsilon, config.v_delta,
                           fork_rng(config.seed, 'estimate-v'), mode=v_mode, tuple_cap=config.tuple_cap,
                           max_samples=config.v_samples)
        report.stage = 'estimate_v'
        report.v_samples = table.samples
        report.v_accuracy = table.accuracy

        selection = joint_select(decomposition, table, source, l, config.selection(),
                                 fork_rng(config.seed, 'joint-select'))
        report.stage = 'joint_select'
        report.paths_per_vertex = selection.paths_per_vertex
        report.candidates_per_vertex = selection.candidates_per_vertex

        model = LocalIterationModel(n, l, selection.trees)
        compose_with_selector(model.trees, n, model.encoding)
        report.stage = 'assembled'

        eval_rng = fork_rng(config.seed, 'final-agreement')
        batch = evaluation_batch(n, config.eval_samples, eval_rng)
        report.source_agreement = mc_agreement(model, source, len(batch), batch=batch)
        if truth is not None:
            truth_labels = truth.predict(batch)
            report.truth_agreement = float(np.mean(model.predict(batch) == truth_labels))
            report.source_accuracy = float(np.mean(source.predict(batch) == truth_labels))
        report.stage = 'done'
    except DistillationError as error:
        report.elapsed = time.perf_counter() - started
        error.report = report
        logger.error('distill.failed', stage=report.stage, error=error.code, message=error.message)
        raise
    report.elapsed = time.perf_counter() - started
    logger.info('distill.done', probes=report.probes, agreement=report.source_agreement.estimate,
                truth_agreement=report.truth_agreement, elapsed=report.elapsed)
    return model, report
