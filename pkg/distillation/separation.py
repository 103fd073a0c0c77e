"""Two-hop reachability on the restricted family and its decision-tree lower bound.

The family allows only the edges (0, n-1), (0, v) and (v, n-1) for middle
vertices v. Bit 0 is (0, n-1); middle vertex v contributes bits 2v-1 for
(0, v) and 2v for (v, n-1).
"""
import math
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np
import structlog

from .boolean_dt import DecisionTree, PartialFunction, all_inputs, min_tree_leaves
from .exceptions import EncodingMismatchError, ResourceBoundError
from .local_iter import (
    GraphInstance,
    InstanceBatch,
    bfs_distance,
    build_two_reachability_model,
    two_reachability_init,
    two_reachability_truth,
)

logger = structlog.get_logger(__name__)

MAX_FAMILY_BITS = 20
MAX_SEARCH_BITS = 16


@dataclass(frozen=True)
class RestrictedInstance:
    n: int
    bits: Tuple[int, ...]

    def __post_init__(self):
        if len(self.bits) != restricted_bit_count(self.n):
            raise EncodingMismatchError(
                f'restricted instance at n={self.n} needs {restricted_bit_count(self.n)} bits',
                n=self.n, got=len(self.bits))

    def edges(self) -> List[Tuple[int, int]]:
        return [pair for pair, bit in zip(restricted_edges(self.n), self.bits) if bit]

    def to_graph(self) -> GraphInstance:
        return GraphInstance.from_edges(self.n, self.edges(), init=two_reachability_init(self.n))


def restricted_bit_count(n: int) -> int:
    return 2 * (n - 2) + 1


def restricted_edges(n: int) -> List[Tuple[int, int]]:
    last = n - 1
    edges = [(0, last)]
    for v in range(1, last):
        edges.extend([(0, v), (v, last)])
    return edges


def _check_family(n: int, cap: int):
    if n < 3:
        raise EncodingMismatchError(f'the restricted family needs n >= 3, got {n}', n=n)
    if restricted_bit_count(n) > cap:
        raise ResourceBoundError(
            f'restricted family at n={n} has {restricted_bit_count(n)} bits, above the cap of {cap}',
            n=n, cap=cap)


def enumerate_restricted_family(n: int) -> Iterator[RestrictedInstance]:
    _check_family(n, MAX_FAMILY_BITS)
    for row in all_inputs(restricted_bit_count(n)):
        yield RestrictedInstance(n, tuple(int(b) for b in row))


def restricted_truth(bits: np.ndarray) -> np.ndarray:
    """Vectorized two-hop reachability over rows of restricted bits"""
    bits = bits.astype(bool)
    out = bits[:, 0].copy()
    for j in range(1, bits.shape[1], 2):
        out |= bits[:, j] & bits[:, j + 1]
    return out.astype(np.uint8)


def count_negatives(n: int) -> Tuple[int, int]:
    negatives = 0
    total = 0
    for inst in enumerate_restricted_family(n):
        total += 1
        negatives += 1 - two_reachability_truth(inst.to_graph())
    return negatives, total


def min_leaves_restricted(n: int) -> Tuple[int, DecisionTree]:
    """Fewest leaves of a tree over the restricted bits computing two-hop reachability"""
    _check_family(n, MAX_SEARCH_BITS)
    d = restricted_bit_count(n)
    values = restricted_truth(all_inputs(d))
    f = PartialFunction(d, values, np.ones(1 << d, dtype=bool))
    return min_tree_leaves(f, max_vars=MAX_SEARCH_BITS)


def leaf_lower_bound(n: int) -> int:
    return math.ceil(1.5 ** (n - 2))


def dp_agreement(n: int) -> float:
    """Agreement of the two-round model with BFS over the whole restricted family"""
    model = build_two_reachability_model(n)
    instances = [inst.to_graph() for inst in enumerate_restricted_family(n)]
    predicted = model.predict(InstanceBatch.from_instances(instances))
    agree = 0
    for inst, out in zip(instances, predicted):
        distance = bfs_distance(inst, 0, n - 1)
        agree += int(out) == int(distance is not None and distance <= 2)
    return agree / len(instances)


@dataclass(frozen=True)
class SeparationRow:
    n: int
    total: int
    negatives: int
    min_leaves: Optional[int]
    lower_bound: int
    dp_agreement: float
    growth: Optional[float] = None

    def as_dict(self) -> Dict[str, object]:
        return {'n': self.n, 'total': self.total, 'negatives': self.negatives, 'min_leaves': self.min_leaves,
                'lower_bound': self.lower_bound, 'dp_agreement': self.dp_agreement, 'growth': self.growth}


def separation_report(n_range: Iterable[int]) -> List[SeparationRow]:
    rows: List[SeparationRow] = []
    previous: Optional[int] = None
    for n in n_range:
        negatives, total = count_negatives(n)
        leaves = min_leaves_restricted(n)[0] if restricted_bit_count(n) <= MAX_SEARCH_BITS else None
        growth = leaves / previous if leaves is not None and previous else None
        row = SeparationRow(n, total, negatives, leaves, leaf_lower_bound(n), dp_agreement(n), growth)
        logger.info('separation.row', **row.as_dict())
        rows.append(row)
        previous = leaves
    return rows
