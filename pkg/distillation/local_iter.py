"""Graph instances, the input encoding and the local-iteration executor.

Vertices are 0-based and the output vertex is n-1. A tree input is laid out as
id bits (most significant first), then the upper-triangle adjacency bits in
lexicographic (u, v) order, then the n hidden bits of the previous layer.
"""
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, FrozenSet, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .boolean_dt import (
    Clause,
    DecisionTree,
    Leaf,
    Node,
    TreeNode,
    clause_tree,
    compose_with_selector,
    parse_bundle,
    random_tree,
    selector_tree,
    serialize_bundle,
)
from .exceptions import EncodingMismatchError, ResourceBoundError, TreeParseError

logger = structlog.get_logger(__name__)

MAX_ENUMERATED_BITS = 22

Forcing = Mapping[Tuple[int, int], Union[int, np.ndarray]]


@dataclass(frozen=True)
class InputEncoding:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise EncodingMismatchError(f'vertex count must be positive, got {self.n}', n=self.n)

    @property
    def id_bits(self) -> int:
        return (self.n - 1).bit_length()

    @property
    def edge_bits(self) -> int:
        return self.n * (self.n - 1) // 2

    @property
    def dp_bits(self) -> int:
        return self.n

    @property
    def d(self) -> int:
        return self.id_bits + self.edge_bits + self.dp_bits

    @property
    def edge_offset(self) -> int:
        return self.id_bits

    @property
    def dp_offset(self) -> int:
        return self.id_bits + self.edge_bits

    @property
    def id_vars(self) -> Tuple[int, ...]:
        return tuple(range(self.id_bits))

    @cached_property
    def _pairs(self) -> Tuple[Tuple[int, int], ...]:
        return tuple((u, v) for u in range(self.n) for v in range(u + 1, self.n))

    def edge_index(self, u: int, v: int) -> int:
        if u == v or not (0 <= u < self.n and 0 <= v < self.n):
            raise EncodingMismatchError(f'no edge slot for ({u}, {v}) at n={self.n}', u=u, v=v)
        u, v = min(u, v), max(u, v)
        return u * self.n - u * (u + 1) // 2 + (v - u - 1)

    def edge_pair(self, index: int) -> Tuple[int, int]:
        return self._pairs[index]

    def edge_var(self, u: int, v: int) -> int:
        return self.edge_offset + self.edge_index(u, v)

    def dp_var(self, u: int) -> int:
        return self.dp_offset + u

    def id_code(self, v: int) -> Tuple[int, ...]:
        k = self.id_bits
        return tuple((v >> (k - 1 - j)) & 1 for j in range(k))

    def kind_of(self, var: int) -> Tuple[str, int]:
        """('id', j), ('edge', index) or ('dp', u) for an input position"""
        if 0 <= var < self.edge_offset:
            return 'id', var
        if var < self.dp_offset:
            return 'edge', var - self.edge_offset
        if var < self.d:
            return 'dp', var - self.dp_offset
        raise EncodingMismatchError(f'variable x{var} out of range for d={self.d}', var=var, d=self.d)

    def is_id_var(self, var: int) -> bool:
        return 0 <= var < self.id_bits

    def literal_name(self, var: int, positive: bool = True) -> str:
        kind, index = self.kind_of(var)
        if kind == 'id':
            name = f'id{index}'
        elif kind == 'edge':
            u, v = self.edge_pair(index)
            name = f'e({u},{v})'
        else:
            name = f'dp{index}'
        return name if positive else '¬' + name

    def encode(self, v: int, inst: 'GraphInstance', h_prev: Sequence[int]) -> np.ndarray:
        if not 0 <= v < self.n:
            raise EncodingMismatchError(f'vertex {v} out of range for n={self.n}', vertex=v)
        if inst.n != self.n or len(h_prev) != self.n:
            raise EncodingMismatchError('instance and hidden vector must match the encoding', n=self.n)
        return np.concatenate([
            np.array(self.id_code(v), dtype=np.uint8),
            np.asarray(inst.adjacency, dtype=np.uint8),
            np.asarray(h_prev, dtype=np.uint8),
        ])

    def encode_batch(self, v: int, batch: 'InstanceBatch', H_prev: np.ndarray) -> np.ndarray:
        rows = len(batch)
        ids = np.broadcast_to(np.array(self.id_code(v), dtype=np.uint8), (rows, self.id_bits))
        return np.concatenate([ids, batch.adjacency, H_prev.astype(np.uint8)], axis=1)

    def decode(self, x: Sequence[int]) -> Tuple[int, Tuple[int, ...], Tuple[int, ...]]:
        if len(x) != self.d:
            raise EncodingMismatchError(f'expected {self.d} bits, got {len(x)}', d=self.d)
        v = 0
        for b in x[:self.id_bits]:
            v = (v << 1) | int(b)
        adjacency = tuple(int(b) for b in x[self.edge_offset:self.dp_offset])
        h_prev = tuple(int(b) for b in x[self.dp_offset:])
        return v, adjacency, h_prev


@dataclass(frozen=True)
class GraphInstance:
    n: int
    init: Tuple[int, ...]
    adjacency: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, 'init', tuple(int(b) for b in self.init))
        object.__setattr__(self, 'adjacency', tuple(int(b) for b in self.adjacency))
        if len(self.init) != self.n or len(self.adjacency) != self.n * (self.n - 1) // 2:
            raise EncodingMismatchError(
                f'instance bit counts do not match n={self.n}',
                n=self.n, init=len(self.init), adjacency=len(self.adjacency))

    @classmethod
    def from_edges(cls, n: int, edges: Sequence[Tuple[int, int]], init: Optional[Sequence[int]] = None) -> 'GraphInstance':
        enc = InputEncoding(n)
        adjacency = [0] * enc.edge_bits
        for u, v in edges:
            adjacency[enc.edge_index(u, v)] = 1
        return cls(n, tuple(init) if init is not None else (0,) * n, tuple(adjacency))

    def has_edge(self, u: int, v: int) -> bool:
        return bool(self.adjacency[InputEncoding(self.n).edge_index(u, v)])

    def neighbors(self, v: int) -> List[int]:
        return [u for u in range(self.n) if u != v and self.has_edge(u, v)]

    def bits(self) -> np.ndarray:
        return np.array(self.init + self.adjacency, dtype=np.uint8)

    def to_text(self) -> str:
        init = ''.join(map(str, self.init))
        adj = ''.join(map(str, self.adjacency))
        return f'n={self.n} init={init} adj={adj}'

    @classmethod
    def from_text(cls, text: str) -> 'GraphInstance':
        match = re.fullmatch(r'\s*n=(\d+)\s+init=([01]*)\s+adj=([01]*)\s*', text)
        if match is None:
            raise TreeParseError(f'bad instance line {text!r}', position=0)
        return cls(int(match.group(1)), tuple(map(int, match.group(2))), tuple(map(int, match.group(3))))

    def __str__(self) -> str:
        return self.to_text()


@dataclass
class InstanceBatch:
    """N instances as (N, n) init and (N, edge_bits) adjacency arrays"""

    n: int
    init: np.ndarray
    adjacency: np.ndarray

    def __post_init__(self):
        self.init = np.ascontiguousarray(self.init, dtype=np.uint8)
        self.adjacency = np.ascontiguousarray(self.adjacency, dtype=np.uint8)
        enc = InputEncoding(self.n)
        if self.init.ndim != 2 or self.init.shape[1] != self.n or self.adjacency.shape != (self.init.shape[0], enc.edge_bits):
            raise EncodingMismatchError(
                'batch arrays do not match n', n=self.n,
                init=list(self.init.shape), adjacency=list(self.adjacency.shape))

    def __len__(self) -> int:
        return self.init.shape[0]

    def __getitem__(self, i: int) -> GraphInstance:
        return GraphInstance(self.n, tuple(self.init[i]), tuple(self.adjacency[i]))

    def __iter__(self) -> Iterator[GraphInstance]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, rows: Union[slice, np.ndarray]) -> 'InstanceBatch':
        return InstanceBatch(self.n, self.init[rows], self.adjacency[rows])

    def bits(self) -> np.ndarray:
        """Instance bits in layout order: Init, then adjacency"""
        return np.concatenate([self.init, self.adjacency], axis=1)

    @classmethod
    def from_bits(cls, n: int, bits: np.ndarray) -> 'InstanceBatch':
        return cls(n, bits[:, :n], bits[:, n:])

    @classmethod
    def from_instances(cls, instances: Sequence[GraphInstance]) -> 'InstanceBatch':
        n = instances[0].n
        return cls(n, np.array([i.init for i in instances]), np.array([i.adjacency for i in instances]))


def instance_bit_count(n: int) -> int:
    return n + InputEncoding(n).edge_bits


def enumerate_instances(n: int, init: Optional[Sequence[int]] = None) -> InstanceBatch:
    """Every instance in truth-table order; a fixed init enumerates adjacency only"""
    edge_bits = InputEncoding(n).edge_bits
    free = edge_bits + (0 if init is not None else n)
    if free > MAX_ENUMERATED_BITS:
        raise ResourceBoundError(
            f'cannot enumerate 2^{free} instances (limit 2^{MAX_ENUMERATED_BITS})', bits=free)
    idx = np.arange(1 << free, dtype=np.int64)
    shifts = np.arange(free - 1, -1, -1, dtype=np.int64)
    table = ((idx[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    if init is not None:
        fixed = np.broadcast_to(np.asarray(init, dtype=np.uint8), (table.shape[0], n))
        return InstanceBatch(n, fixed, table)
    return InstanceBatch.from_bits(n, table)


def sample_instances(n: int, count: int, rng: np.random.Generator, init: Optional[Sequence[int]] = None) -> InstanceBatch:
    """Uniform independent init and edge bits (init optionally fixed)"""
    edge_bits = InputEncoding(n).edge_bits
    if init is None:
        bits = rng.integers(0, 2, size=(count, n + edge_bits), dtype=np.uint8)
        return InstanceBatch.from_bits(n, bits)
    adjacency = rng.integers(0, 2, size=(count, edge_bits), dtype=np.uint8)
    return InstanceBatch(n, np.broadcast_to(np.asarray(init, dtype=np.uint8), (count, n)), adjacency)


@dataclass(frozen=True)
class Trace:
    h: np.ndarray

    @property
    def layers(self) -> int:
        return self.h.shape[0] - 1

    def state(self, v: int, t: int) -> int:
        return int(self.h[t, v])


@dataclass(frozen=True)
class LocalIterationModel:
    n: int
    l: int
    trees: Tuple[DecisionTree, ...]
    encoding: InputEncoding = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'trees', tuple(self.trees))
        object.__setattr__(self, 'encoding', InputEncoding(self.n))
        if self.l < 0:
            raise EncodingMismatchError(f'iteration count must be non-negative, got {self.l}', l=self.l)

    @property
    def selector(self) -> DecisionTree:
        return selector_tree(self.encoding)

    @cached_property
    def global_tree(self) -> DecisionTree:
        return compose_with_selector(self.trees, self.n, self.encoding)

    def run(self, inst: GraphInstance) -> Tuple[int, Trace]:
        return run_local_iteration(self, inst)

    def run_batch(self, batch: InstanceBatch, forced: Optional[Forcing] = None) -> Tuple[np.ndarray, np.ndarray]:
        H = simulate(self.global_tree, self.n, self.l, batch, forced=forced)
        return H[-1, :, self.n - 1].copy(), H

    def predict(self, batch: InstanceBatch) -> np.ndarray:
        return self.run_batch(batch)[0]

    def to_bundle(self) -> str:
        return serialize_bundle(self.trees, l=self.l)

    @classmethod
    def from_bundle(cls, text: str) -> 'LocalIterationModel':
        n, l, trees = parse_bundle(text)
        if l is None:
            raise TreeParseError('model bundle header must carry l=<l>', position=0)
        return cls(n, l, tuple(trees))

    @property
    def size(self) -> int:
        return sum(t.size for t in self.trees)


def simulate(global_tree: DecisionTree, n: int, l: int, batch: InstanceBatch,
             forced: Optional[Forcing] = None) -> np.ndarray:
    """Synchronous executor; returns hidden states as an (l+1, N, n) array.

    forced maps (vertex, layer) to a bit or a per-row bit array that replaces
    the computed state before the next layer reads it.
    """
    if batch.n != n:
        raise EncodingMismatchError(f'instance has n={batch.n}, model expects n={n}', n=n, got=batch.n)
    enc = InputEncoding(n)
    forced = forced or {}
    H = np.zeros((l + 1, len(batch), n), dtype=np.uint8)
    H[0] = batch.init
    _apply_forcing(H, 0, forced)
    for t in range(1, l + 1):
        prev = H[t - 1]
        for v in range(n):
            H[t, :, v] = global_tree.evaluate_batch(enc.encode_batch(v, batch, prev))
        _apply_forcing(H, t, forced)
    return H


def _apply_forcing(H: np.ndarray, t: int, forced: Forcing):
    for (u, layer), value in forced.items():
        if layer == t:
            H[t, :, u] = value


def run_local_iteration(model: LocalIterationModel, inst: GraphInstance) -> Tuple[int, Trace]:
    if inst.n != model.n:
        raise EncodingMismatchError(f'instance has n={inst.n}, model expects n={model.n}', n=model.n, got=inst.n)
    enc = model.encoding
    tree = model.global_tree
    h = np.zeros((model.l + 1, model.n), dtype=np.uint8)
    h[0] = inst.init
    for t in range(1, model.l + 1):
        h[t] = [tree.evaluate(enc.encode(v, inst, h[t - 1])) for v in range(model.n)]
    return int(h[model.l, model.n - 1]), Trace(h)


def random_local_model(n: int, l: int, depth: int, rng: np.random.Generator) -> LocalIterationModel:
    """Per-vertex random trees of the given depth over edge and hidden bits"""
    enc = InputEncoding(n)
    domain = range(enc.id_bits, enc.d)
    trees = tuple(random_tree(depth, domain, rng) for _ in range(n))
    logger.debug('local_iter.random_model', n=n, l=l, depth=depth, sizes=[t.size for t in trees])
    return LocalIterationModel(n, l, trees)


# Conjunction features

@dataclass(frozen=True, order=True)
class InputBit:
    kind: str  # 'init' or 'edge'
    index: int


@dataclass(frozen=True)
class _ClauseParts:
    id_literals: Tuple[Tuple[int, bool], ...]
    edge_literals: Tuple[Tuple[int, bool], ...]
    dp_literals: Tuple[Tuple[int, bool], ...]


def _split_clause(S: Clause, enc: InputEncoding) -> _ClauseParts:
    parts: Dict[str, List[Tuple[int, bool]]] = {'id': [], 'edge': [], 'dp': []}
    for p in S:
        kind, index = enc.kind_of(p.var)
        parts[kind].append((index, p.positive))
    return _ClauseParts(tuple(parts['id']), tuple(parts['edge']), tuple(parts['dp']))


def _id_matches(parts: _ClauseParts, enc: InputEncoding) -> np.ndarray:
    matches = np.ones(enc.n, dtype=bool)
    for v in range(enc.n):
        code = enc.id_code(v)
        matches[v] = all(code[j] == int(pol) for j, pol in parts.id_literals)
    return matches


def feature_values(S: Clause, batch: InstanceBatch, l: int, naive: bool = False) -> np.ndarray:
    """A^l[AND_S] on every instance of the batch.

    The fast path unrolls the conjunction: every vertex's state at layer t is
    its id match AND the edge literals AND the hidden literals read at t-1,
    so only the vertices named by hidden literals are carried between layers.
    """
    n = batch.n
    if naive:
        return simulate(clause_tree(S), n, l, batch)[-1, :, n - 1]
    enc = InputEncoding(n)
    if S.max_var >= enc.d:
        raise EncodingMismatchError(f'clause reads x{S.max_var} beyond d={enc.d}', var=S.max_var, d=enc.d)
    if l == 0:
        return batch.init[:, n - 1].copy()
    parts = _split_clause(S, enc)
    ids = _id_matches(parts, enc)
    edges = np.ones(len(batch), dtype=bool)
    for index, pol in parts.edge_literals:
        edges &= batch.adjacency[:, index].astype(bool) == pol
    carried = {u for u, _ in parts.dp_literals}
    prev = {u: batch.init[:, u].astype(bool) for u in carried}
    gate = edges
    for _ in range(l):
        gate = edges.copy()
        for u, pol in parts.dp_literals:
            gate &= prev[u] == pol
        prev = {u: gate & ids[u] for u in carried}
    return (gate & ids[n - 1]).astype(np.uint8)


def feature_value(S: Clause, inst: GraphInstance, l: int, n: int) -> int:
    if inst.n != n:
        raise EncodingMismatchError(f'instance has n={inst.n}, expected {n}', n=n, got=inst.n)
    return int(feature_values(S, InstanceBatch.from_instances([inst]), l)[0])


def dependency_set(S: Clause, l: int, n: int) -> FrozenSet[InputBit]:
    """Init and edge bits A^l[AND_S] can depend on"""
    if l == 0:
        return frozenset({InputBit('init', n - 1)})
    parts = _split_clause(S, InputEncoding(n))
    bits = {InputBit('init', u) for u, _ in parts.dp_literals}
    bits |= {InputBit('edge', index) for index, _ in parts.edge_literals}
    return frozenset(bits)


def instance_positions(bits: FrozenSet[InputBit], n: int) -> List[int]:
    """Positions of tagged bits inside GraphInstance.bits()"""
    return sorted(b.index if b.kind == 'init' else n + b.index for b in bits)


# Two-hop reachability

def two_reachability_truth(inst: GraphInstance) -> int:
    n = inst.n
    if n < 2:
        raise EncodingMismatchError('two-hop reachability needs n >= 2', n=n)
    enc = InputEncoding(n)
    adj = inst.adjacency
    if adj[enc.edge_index(0, n - 1)]:
        return 1
    for v in range(1, n - 1):
        if adj[enc.edge_index(0, v)] and adj[enc.edge_index(v, n - 1)]:
            return 1
    return 0


def two_reachability_batch(batch: InstanceBatch) -> np.ndarray:
    n = batch.n
    enc = InputEncoding(n)
    adj = batch.adjacency.astype(bool)
    out = adj[:, enc.edge_index(0, n - 1)].copy()
    for v in range(1, n - 1):
        out |= adj[:, enc.edge_index(0, v)] & adj[:, enc.edge_index(v, n - 1)]
    return out.astype(np.uint8)


def bfs_distance(inst: GraphInstance, source: int, target: int) -> Optional[int]:
    """Hop distance between two vertices, None if unreachable"""
    seen = {source: 0}
    queue = deque([source])
    while queue:
        v = queue.popleft()
        if v == target:
            return seen[v]
        for u in inst.neighbors(v):
            if u not in seen:
                seen[u] = seen[v] + 1
                queue.append(u)
    return None


def two_reachability_init(n: int) -> Tuple[int, ...]:
    return tuple(1 if v == 0 else 0 for v in range(n))


def relaxation_tree(v: int, enc: InputEncoding) -> DecisionTree:
    """h_v OR any (edge(u,v) AND h_u), read as a chain over the other vertices.

    Each dp_u = 1 branch tests edge(u,v) and falls through to the same tail
    on 0, so the tail is shared and the tree has 2^(n+1) - 1 nodes.
    """
    tail: TreeNode = Leaf(0)
    for u in reversed([u for u in range(enc.n) if u != v]):
        tail = Node(enc.dp_var(u), tail, Node(enc.edge_var(u, v), tail, Leaf(1)))
    return DecisionTree(Node(enc.dp_var(v), tail, Leaf(1)))


def build_two_reachability_model(n: int) -> LocalIterationModel:
    """Two rounds of the reachability relaxation at every vertex.

    Run with Init fixed to the indicator of vertex 0 the output is two-hop
    reachability from vertex 0; any other Init gives reachability within two
    hops from the set it marks.
    """
    if n < 2:
        raise EncodingMismatchError('two-hop reachability needs n >= 2', n=n)
    enc = InputEncoding(n)
    return LocalIterationModel(n, 2, tuple(relaxation_tree(v, enc) for v in range(n)))
