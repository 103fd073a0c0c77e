"""Literals, clauses and binary decision trees over d-bit inputs.

Branch convention: an internal node tests x_var; child0 is taken when the bit
is 0 and child1 when it is 1. Root-prefix paths record the polarity of the
branch actually followed, so the path to child0 of a node on x3 ends in ¬x3.
"""
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .exceptions import (
    AlignmentError,
    EncodingMismatchError,
    InfeasibleDepthError,
    ResourceBoundError,
    TreeParseError,
)

logger = structlog.get_logger(__name__)

Bits = Union[Sequence[int], np.ndarray]

MAX_SEARCH_VARS = 16


@dataclass(frozen=True, order=True)
class Literal:
    var: int
    positive: bool = True

    def evaluate(self, x: Bits) -> int:
        bit = int(x[self.var])
        return bit if self.positive else 1 - bit

    def evaluate_batch(self, X: np.ndarray) -> np.ndarray:
        col = X[:, self.var].astype(bool)
        return col if self.positive else ~col

    def negate(self) -> 'Literal':
        return Literal(self.var, not self.positive)

    def __str__(self) -> str:
        return f'x{self.var}' if self.positive else f'¬x{self.var}'


@dataclass(frozen=True)
class Clause:
    """An ordered tuple of literals; AND of the empty clause is 1"""

    literals: Tuple[Literal, ...] = ()
    provenance: Optional[Dict[str, Any]] = field(default=None, compare=False, hash=False)

    def __len__(self) -> int:
        return len(self.literals)

    def __iter__(self) -> Iterator[Literal]:
        return iter(self.literals)

    def __str__(self) -> str:
        if not self.literals:
            return '∅'
        return '(' + ' ∧ '.join(str(p) for p in self.literals) + ')'

    @property
    def variables(self) -> Tuple[int, ...]:
        return tuple(p.var for p in self.literals)

    @property
    def max_var(self) -> int:
        return max(self.variables, default=-1)

    def is_nondegenerate(self) -> bool:
        return len(set(self.variables)) == len(self.literals)

    def extend(self, literal: Literal) -> 'Clause':
        return Clause(self.literals + (literal,))

    def canonical(self) -> 'Clause':
        """Literal-order-free representative (sorted, duplicates dropped)"""
        return Clause(tuple(sorted(set(self.literals))))

    def with_provenance(self, **record: Any) -> 'Clause':
        merged = dict(self.provenance or {})
        merged.update(record)
        return Clause(self.literals, merged)

    def evaluate(self, x: Bits) -> int:
        _check_width(self.max_var, len(x))
        for p in self.literals:
            if not p.evaluate(x):
                return 0
        return 1

    def evaluate_batch(self, X: np.ndarray) -> np.ndarray:
        _check_width(self.max_var, X.shape[1])
        out = np.ones(X.shape[0], dtype=bool)
        for p in self.literals:
            out &= p.evaluate_batch(X)
        return out

    def to_text(self) -> str:
        return ' '.join(str(p) for p in self.literals) if self.literals else '∅'

    @classmethod
    def from_text(cls, text: str) -> 'Clause':
        text = text.strip()
        if text in ('', '∅'):
            return cls()
        literals = []
        for token in text.split():
            match = re.fullmatch(r'(¬|!)?x(\d+)', token)
            if match is None:
                raise TreeParseError(f'bad literal {token!r}', position=text.index(token))
            literals.append(Literal(int(match.group(2)), match.group(1) is None))
        return cls(tuple(literals))


# Tree nodes

@dataclass(frozen=True)
class Leaf:
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f'leaf label must be 0 or 1, got {self.label!r}')


@dataclass(frozen=True)
class Node:
    var: int
    child0: 'TreeNode'
    child1: 'TreeNode'

    @property
    def literal(self) -> Literal:
        return Literal(self.var, True)


TreeNode = Union[Leaf, Node]


@dataclass(frozen=True)
class DecisionTree:
    root: TreeNode
    depth: int = field(init=False, compare=False)
    size: int = field(init=False, compare=False)
    max_var: int = field(init=False, compare=False)

    def __post_init__(self):
        depth, size, max_var = _measure(self.root)
        object.__setattr__(self, 'depth', depth)
        object.__setattr__(self, 'size', size)
        object.__setattr__(self, 'max_var', max_var)

    @property
    def n_leaves(self) -> int:
        return (self.size + 1) // 2

    def variables(self) -> frozenset:
        found = set()
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Node):
                found.add(node.var)
                stack.extend((node.child0, node.child1))
        return frozenset(found)

    def evaluate(self, x: Bits) -> int:
        _check_width(self.max_var, len(x))
        node = self.root
        while isinstance(node, Node):
            node = node.child1 if x[node.var] else node.child0
        return node.label

    def evaluate_batch(self, X: np.ndarray) -> np.ndarray:
        _check_width(self.max_var, X.shape[1])
        out = np.zeros(X.shape[0], dtype=np.uint8)
        _route(self.root, X, np.arange(X.shape[0]), out)
        return out

    def evaluate_partial(self, assignment: Mapping[int, int]) -> Optional[int]:
        """Label reached under a partial assignment, None if an unset bit is read"""
        node = self.root
        while isinstance(node, Node):
            bit = assignment.get(node.var)
            if bit is None:
                return None
            node = node.child1 if bit else node.child0
        return node.label

    def root_prefix_paths(self) -> List[Clause]:
        """One clause per node in preorder; the root maps to the empty clause"""
        paths: List[Clause] = []

        def walk(node: TreeNode, prefix: Tuple[Literal, ...]):
            paths.append(Clause(prefix))
            if isinstance(node, Node):
                walk(node.child0, prefix + (Literal(node.var, False),))
                walk(node.child1, prefix + (Literal(node.var, True),))

        walk(self.root, ())
        return paths

    def leaf_paths(self) -> List[Tuple[Clause, int]]:
        leaves: List[Tuple[Clause, int]] = []

        def walk(node: TreeNode, prefix: Tuple[Literal, ...]):
            if isinstance(node, Leaf):
                leaves.append((Clause(prefix), node.label))
                return
            walk(node.child0, prefix + (Literal(node.var, False),))
            walk(node.child1, prefix + (Literal(node.var, True),))

        walk(self.root, ())
        return leaves

    def to_text(self) -> str:
        return serialize_tree(self)

    def __str__(self) -> str:
        return serialize_tree(self)


def leaf(label: int) -> DecisionTree:
    return DecisionTree(Leaf(int(label)))


def node(var: int, child0: Union[DecisionTree, TreeNode], child1: Union[DecisionTree, TreeNode]) -> DecisionTree:
    return DecisionTree(Node(int(var), _as_node(child0), _as_node(child1)))


def _as_node(t: Union[DecisionTree, TreeNode]) -> TreeNode:
    return t.root if isinstance(t, DecisionTree) else t


def _measure(root: TreeNode) -> Tuple[int, int, int]:
    depth, size, max_var = 0, 0, -1
    stack = [(root, 0)]
    while stack:
        current, level = stack.pop()
        size += 1
        depth = max(depth, level)
        if isinstance(current, Node):
            max_var = max(max_var, current.var)
            stack.append((current.child0, level + 1))
            stack.append((current.child1, level + 1))
    return depth, size, max_var


def _route(current: TreeNode, X: np.ndarray, rows: np.ndarray, out: np.ndarray):
    if isinstance(current, Leaf):
        out[rows] = current.label
        return
    col = X[rows, current.var].astype(bool)
    if col.any():
        _route(current.child1, X, rows[col], out)
    if not col.all():
        _route(current.child0, X, rows[~col], out)


def _check_width(max_var: int, width: int):
    if max_var >= width:
        raise EncodingMismatchError(
            f'variable x{max_var} out of range for a {width}-bit input', var=max_var, width=width)


# Operations

def eval_clause(c: Clause, x: Bits) -> int:
    return c.evaluate(x)


def eval_tree(t: DecisionTree, x: Bits) -> int:
    return t.evaluate(x)


def root_prefix_paths(t: DecisionTree) -> List[Clause]:
    return t.root_prefix_paths()


def clause_tree(c: Clause) -> DecisionTree:
    """Path-shaped tree computing AND_c (1 at the end of the path, 0 elsewhere)"""
    current: TreeNode = Leaf(1)
    for p in reversed(c.literals):
        if p.positive:
            current = Node(p.var, Leaf(0), current)
        else:
            current = Node(p.var, current, Leaf(0))
    return DecisionTree(current)


def random_tree(r: int, var_domain: Iterable[int], rng: np.random.Generator) -> DecisionTree:
    """Complete depth-r tree with per-path distinct variables and uniform leaf labels"""
    domain = sorted(set(int(v) for v in var_domain))
    if r < 0:
        raise InfeasibleDepthError(f'depth must be non-negative, got {r}', depth=r)
    if len(domain) < r:
        raise InfeasibleDepthError(
            f'cannot build a depth-{r} tree over {len(domain)} variables', depth=r, domain=len(domain))

    def grow(level: int, used: frozenset) -> TreeNode:
        if level == r:
            return Leaf(int(rng.integers(0, 2)))
        choices = [v for v in domain if v not in used]
        var = choices[int(rng.integers(0, len(choices)))]
        child0 = grow(level + 1, used | {var})
        child1 = grow(level + 1, used | {var})
        return Node(var, child0, child1)

    return DecisionTree(grow(0, frozenset()))


# Vertex selector

def selector_tree(encoding) -> DecisionTree:
    """Complete tree over the id bits; its leaves are placeholders"""
    return _selector(encoding, lambda code: Leaf(0))


def selector_paths(encoding) -> List[Clause]:
    """Root-prefix paths of the selector that lead to a real vertex"""
    k = encoding.id_bits
    paths = []
    for path in selector_tree(encoding).root_prefix_paths():
        prefix_code = 0
        for p in path:
            prefix_code = (prefix_code << 1) | int(p.positive)
        if prefix_code << (k - len(path)) < encoding.n:
            paths.append(path)
    return paths


def compose_with_selector(per_vertex: Sequence[DecisionTree], n: int, encoding) -> DecisionTree:
    """Global tree: selector over id bits with T_u hung at the leaf for vertex u"""
    if len(per_vertex) != n or encoding.n != n:
        raise AlignmentError(f'expected {n} per-vertex trees, got {len(per_vertex)}', n=n)
    id_vars = set(encoding.id_vars)
    for u, tree in enumerate(per_vertex):
        touched = tree.variables() & id_vars
        if touched:
            raise AlignmentError(
                f'per-vertex tree {u} reads id bits {sorted(touched)}', vertex=u, vars=sorted(touched))
    # codes >= n name no vertex and all share the constant Leaf(0)
    return _selector(encoding, lambda code: per_vertex[code].root if code < n else Leaf(0))


def _selector(encoding, hang) -> DecisionTree:
    k = encoding.id_bits
    id_vars = encoding.id_vars

    def build(level: int, code: int) -> TreeNode:
        if level == k:
            return hang(code)
        return Node(id_vars[level], build(level + 1, code << 1), build(level + 1, (code << 1) | 1))

    return DecisionTree(build(0, 0))


# Text format

_TOKEN = re.compile(r'\(|\)|[^\s()]+')


def serialize_tree(t: Union[DecisionTree, TreeNode]) -> str:
    root = _as_node(t)
    parts: List[str] = []

    def emit(current: TreeNode):
        if isinstance(current, Leaf):
            parts.append(f'(leaf {current.label})')
            return
        parts.append(f'(x{current.var} ')
        emit(current.child0)
        parts.append(' ')
        emit(current.child1)
        parts.append(')')

    emit(root)
    return ''.join(parts)


def parse_tree(text: str) -> DecisionTree:
    tokens = [(m.group(0), m.start()) for m in _TOKEN.finditer(text)]
    if not tokens:
        raise TreeParseError('empty tree text', position=0)
    pos = 0

    def expect(value: str):
        nonlocal pos
        if pos >= len(tokens):
            raise TreeParseError(f'expected {value!r}, found end of text', position=len(text))
        token, offset = tokens[pos]
        if token != value:
            raise TreeParseError(f'expected {value!r}, found {token!r}', position=offset)
        pos += 1

    def parse() -> TreeNode:
        nonlocal pos
        expect('(')
        if pos >= len(tokens):
            raise TreeParseError('unterminated node', position=len(text))
        head, offset = tokens[pos]
        pos += 1
        if head == 'leaf':
            if pos >= len(tokens) or tokens[pos][0] not in ('0', '1'):
                where = tokens[pos][1] if pos < len(tokens) else len(text)
                raise TreeParseError('leaf label must be 0 or 1', position=where)
            label = int(tokens[pos][0])
            pos += 1
            expect(')')
            return Leaf(label)
        match = re.fullmatch(r'x(\d+)', head)
        if match is None:
            # negated tests are not part of the format
            raise TreeParseError(f'bad node head {head!r}', position=offset)
        child0 = parse()
        child1 = parse()
        expect(')')
        return Node(int(match.group(1)), child0, child1)

    root = parse()
    if pos != len(tokens):
        raise TreeParseError(f'trailing text {tokens[pos][0]!r}', position=tokens[pos][1])
    return DecisionTree(root)


def serialize_bundle(trees: Sequence[DecisionTree], l: Optional[int] = None) -> str:
    header = f'n={len(trees)}' + (f' l={l}' if l is not None else '')
    return '\n'.join([header] + [serialize_tree(t) for t in trees]) + '\n'


def parse_bundle(text: str) -> Tuple[int, Optional[int], List[DecisionTree]]:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise TreeParseError('empty bundle', position=0)
    header = dict(_header_fields(lines[0]))
    if 'n' not in header:
        raise TreeParseError('bundle header must start with n=<n>', position=0)
    n = header['n']
    trees = [parse_tree(line) for line in lines[1:]]
    if len(trees) != n:
        raise TreeParseError(f'bundle declares n={n} but holds {len(trees)} trees', position=len(lines[0]))
    return n, header.get('l'), trees


def _header_fields(line: str) -> Iterator[Tuple[str, int]]:
    for item in line.split():
        key, _, value = item.partition('=')
        if not value.isdigit():
            raise TreeParseError(f'bad header field {item!r}', position=line.index(item))
        yield key, int(value)


# Exact minimal trees

@dataclass(frozen=True)
class PartialFunction:
    """Truth table over d bits with a care mask; var 0 is the most significant index bit"""

    d: int
    values: np.ndarray
    care: np.ndarray

    def __post_init__(self):
        size = 1 << self.d
        if self.values.shape != (size,) or self.care.shape != (size,):
            raise EncodingMismatchError(
                f'tables must have length 2^{self.d} = {size}', d=self.d)

    @classmethod
    def from_function(cls, d: int, fn, care_fn=None) -> 'PartialFunction':
        grid = all_inputs(d)
        values = np.array([fn(row) for row in grid], dtype=np.uint8)
        care = np.ones(1 << d, dtype=bool) if care_fn is None else np.array(
            [bool(care_fn(row)) for row in grid])
        return cls(d, values, care)

    @staticmethod
    def index(bits: Bits) -> int:
        out = 0
        for b in bits:
            out = (out << 1) | int(b)
        return out

    def restrict(self, var: int, bit: int) -> 'PartialFunction':
        shape = (2,) * self.d
        values = np.take(self.values.reshape(shape), bit, axis=var).reshape(-1)
        care = np.take(self.care.reshape(shape), bit, axis=var).reshape(-1)
        return PartialFunction(self.d - 1, values.copy(), care.copy())


def all_inputs(d: int) -> np.ndarray:
    """All 2^d inputs as rows, in truth-table index order"""
    idx = np.arange(1 << d, dtype=np.int64)
    shifts = np.arange(d - 1, -1, -1, dtype=np.int64)
    return ((idx[:, None] >> shifts[None, :]) & 1).astype(np.uint8)


class MinimalTreeSearch:
    """Memoized search for the fewest-leaf tree agreeing with f on its care set"""

    def __init__(self, f: PartialFunction, max_vars: int = MAX_SEARCH_VARS):
        if f.d > max_vars:
            raise ResourceBoundError(
                f'minimal-tree search is limited to {max_vars} variables, got {f.d}', d=f.d)
        self.f = f
        self.memo: Dict[Tuple, Tuple[int, TreeNode]] = {}

    def solve(self) -> Tuple[int, DecisionTree]:
        shape = (2,) * self.f.d
        values = (self.f.values & self.f.care).reshape(shape).astype(np.uint8)
        care = self.f.care.reshape(shape)
        count, root = self._search(tuple(range(self.f.d)), values, care)
        logger.debug('min_tree.solved', d=self.f.d, leaves=count, states=len(self.memo))
        return count, DecisionTree(root)

    def _search(self, variables: Tuple[int, ...], values: np.ndarray, care: np.ndarray) -> Tuple[int, TreeNode]:
        key = (variables, values.tobytes(), care.tobytes())
        cached = self.memo.get(key)
        if cached is not None:
            return cached
        cared = values[care]
        if cared.size == 0 or cared.min() == cared.max():
            result = (1, Leaf(int(cared[0]) if cared.size else 0))
            self.memo[key] = result
            return result
        best: Tuple[int, Optional[TreeNode]] = (1 << (len(variables) + 1), None)
        for axis, var in enumerate(variables):
            v0, v1 = np.take(values, 0, axis=axis), np.take(values, 1, axis=axis)
            c0, c1 = np.take(care, 0, axis=axis), np.take(care, 1, axis=axis)
            if np.array_equal(v0, v1) and np.array_equal(c0, c1):
                continue
            rest = variables[:axis] + variables[axis + 1:]
            left = self._search(rest, v0, c0)
            if left[0] + 1 >= best[0]:
                continue
            right = self._search(rest, v1, c1)
            total = left[0] + right[0]
            if total < best[0]:
                best = (total, Node(var, left[1], right[1]))
                if total == 2:
                    break
        self.memo[key] = best
        return best


def min_tree_leaves(f: PartialFunction, max_vars: int = MAX_SEARCH_VARS) -> Tuple[int, DecisionTree]:
    return MinimalTreeSearch(f, max_vars=max_vars).solve()
