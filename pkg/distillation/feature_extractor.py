from typing import Any, Dict, FrozenSet, List, Sequence, Tuple

import numpy as np
import structlog

from .boolean_dt import Clause
from .exceptions import ResourceBoundError
from .local_iter import InputBit, InstanceBatch, LocalIterationModel, dependency_set, feature_values, instance_positions
from .random_state import fork_rng

logger = structlog.get_logger(__name__)


class LatentFeatureExtractor:
    """Build the synthetic latent map of an aligned source model"""

    def __init__(self, truth: LocalIterationModel, distractors: int = 0, distractor_width: int = 2,
                 noise: float = 0.0, seed: int = 0):
        self.truth = truth
        self.n = truth.n
        self.l = truth.l
        self.noise = float(noise)

        # One coordinate per root-prefix path of the global aggregator
        self.planted: List[Clause] = []
        seen = set()
        for path in truth.global_tree.root_prefix_paths():
            key = path.canonical()
            if key not in seen:
                seen.add(key)
                self.planted.append(path)

        self.reserved_bits = self._planted_dependencies()
        self.distractor_bits = self._draw_distractor_bits(distractors, distractor_width, seed)

        self.noise_projection = None
        if self.noise > 0:
            rng = fork_rng(seed, 'oracle-noise')
            width = self.n + truth.encoding.edge_bits
            self.noise_projection = rng.standard_normal((width, self.latent_dim)) / np.sqrt(width)

    @property
    def latent_dim(self) -> int:
        return len(self.planted) + len(self.distractor_bits)

    @property
    def bound(self) -> float:
        return (1.0 + self.noise) * float(np.sqrt(self.latent_dim))

    def extract_all_features(self, batch: InstanceBatch) -> Dict[str, np.ndarray]:
        """Extract every latent block for a batch of instances"""
        features = {}

        # Planted conjunction features
        features.update(self._extract_planted_features(batch))

        # Distractor parities
        features.update(self._extract_distractor_features(batch))

        # Bounded noise
        features.update(self._extract_noise_features(batch))

        return features

    def _extract_planted_features(self, batch: InstanceBatch) -> Dict[str, np.ndarray]:
        columns = [feature_values(S, batch, self.l) for S in self.planted]
        planted = np.stack(columns, axis=1).astype(np.float64) if columns else np.zeros((len(batch), 0))
        return {'planted': planted}

    def _extract_distractor_features(self, batch: InstanceBatch) -> Dict[str, np.ndarray]:
        bits = batch.bits()
        if not self.distractor_bits:
            return {'distractors': np.zeros((len(batch), 0))}
        columns = [bits[:, list(group)].sum(axis=1) % 2 for group in self.distractor_bits]
        return {'distractors': np.stack(columns, axis=1).astype(np.float64)}

    def _extract_noise_features(self, batch: InstanceBatch) -> Dict[str, np.ndarray]:
        if self.noise_projection is None:
            return {'noise': np.zeros((len(batch), self.latent_dim))}
        signed = 2.0 * batch.bits().astype(np.float64) - 1.0
        return {'noise': self.noise * np.tanh(signed @ self.noise_projection)}

    def prepare_ml_input(self, features: Dict[str, Any]) -> np.ndarray:
        """Assemble the latent matrix from extracted blocks"""
        latent = np.concatenate([features['planted'], features['distractors']], axis=1)
        return latent + features['noise']

    def transform(self, batch: InstanceBatch) -> np.ndarray:
        return self.prepare_ml_input(self.extract_all_features(batch))

    def planted_index(self, clause: Clause) -> int:
        key = clause.canonical()
        for i, S in enumerate(self.planted):
            if S.canonical() == key:
                return i
        raise KeyError(str(clause))

    def _planted_dependencies(self) -> FrozenSet[InputBit]:
        reserved = set()
        for S in self.planted:
            reserved |= dependency_set(S, self.l, self.n)
        return frozenset(reserved)

    def _draw_distractor_bits(self, count: int, width: int, seed: int) -> List[Tuple[int, ...]]:
        if count <= 0:
            return []
        reserved = set(instance_positions(self.reserved_bits, self.n))
        free = [i for i in range(self.n + self.truth.encoding.edge_bits) if i not in reserved]
        if count * width > len(free):
            raise ResourceBoundError(
                f'{count} distractors of width {width} need {count * width} free bits, only {len(free)} remain',
                count=count, width=width, free=len(free))
        rng = fork_rng(seed, 'oracle-distractors')
        order = rng.permutation(free)
        groups = [tuple(sorted(int(b) for b in order[i * width:(i + 1) * width])) for i in range(count)]
        logger.debug('oracle.distractors', groups=groups, reserved=len(reserved))
        return groups


def free_instance_bits(truth: LocalIterationModel, clauses: Sequence[Clause]) -> List[int]:
    """Instance-bit positions outside every clause's dependency set"""
    reserved = set()
    for S in clauses:
        reserved |= set(instance_positions(dependency_set(S, truth.l, truth.n), truth.n))
    return [i for i in range(truth.n + truth.encoding.edge_bits) if i not in reserved]
