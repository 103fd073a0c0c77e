"""Norm-constrained linear probes on a source model's latent map."""
import math
import threading
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import structlog
from joblib import Parallel, delayed
from sklearn.linear_model import LinearRegression

from .boolean_dt import Clause
from .exceptions import DistillationError, ResourceBoundError
from .local_iter import InstanceBatch, feature_values, sample_instances

logger = structlog.get_logger(__name__)

Target = Union[Clause, Callable[[InstanceBatch], np.ndarray]]


@dataclass(frozen=True)
class ProbeConfig:
    tau: float = 1.0
    epsilon: float = 0.05
    delta: float = 0.1
    samples: Optional[int] = None
    sample_constant: float = 64.0
    max_samples: int = 200000
    strict: bool = False
    steps: int = 100
    step_size: Optional[float] = None
    theta: float = 1.5

    def validate(self):
        if not (self.tau > 0 and self.epsilon > 0 and 0 < self.delta < 1):
            raise DistillationError('tau, epsilon and delta must be positive (delta < 1)',
                                    tau=self.tau, epsilon=self.epsilon, delta=self.delta)
        if not 1 < self.theta < 2:
            raise DistillationError(f'theta must lie strictly between 1 and 2, got {self.theta}', theta=self.theta)
        if self.samples is not None and self.samples < 2:
            raise DistillationError('a probe needs at least 2 samples', samples=self.samples)
        if self.steps < 0:
            raise DistillationError('steps must be non-negative', steps=self.steps)

    def _scale(self, bound: float) -> float:
        scale = self.tau * bound + 1.0
        if not math.isfinite(scale):
            raise ResourceBoundError('an unbounded norm needs an explicit sample count', tau=self.tau)
        return scale

    def sample_count(self, bound: float) -> int:
        """Explicit sample count, else ceil(c (tau B + 1)^4 eps^-2 log(2/delta)).

        Above max_samples the count is clamped to the cap and the weaker
        epsilon it supports is logged; strict configs raise instead.
        """
        if self.samples is not None:
            return self.samples
        scale = self._scale(bound)
        needed = math.ceil(self.sample_constant * scale ** 4 * self.epsilon ** -2 * math.log(2 / self.delta))
        if needed > self.max_samples:
            if self.strict:
                raise ResourceBoundError(
                    f'probe needs {needed} samples, above the cap of {self.max_samples}',
                    needed=needed, cap=self.max_samples, tau=self.tau, bound=bound, epsilon=self.epsilon)
            logger.warning('sampling.clamped', needed=needed, cap=self.max_samples,
                           epsilon=self.epsilon, guarantee=self.guarantee(bound, self.max_samples))
            return self.max_samples
        return needed

    def guarantee(self, bound: float, samples: int) -> float:
        """Smallest epsilon the formula certifies with this many samples"""
        if self.samples is not None:
            return self.epsilon
        scale = self._scale(bound)
        return max(self.epsilon,
                   math.sqrt(self.sample_constant * scale ** 4 * math.log(2 / self.delta) / samples))


@dataclass(frozen=True)
class ProbeOutcome:
    accepted: bool
    risk: float
    train_risk: float
    norm: float
    samples: int
    threshold: float
    guarantee: Optional[float] = None


def project_ball(w: np.ndarray, tau: float) -> np.ndarray:
    """Euclidean projection onto {w : |w| <= tau}"""
    if math.isinf(tau):
        return w
    if tau <= 0:
        return np.zeros_like(w)
    norm = np.linalg.norm(w)
    if norm <= tau:
        return w
    return w * (tau / norm)


def _check_finite(Phi: np.ndarray, y: np.ndarray):
    if Phi.shape[0] == 0 or Phi.shape[0] != y.shape[0]:
        raise DistillationError('probe data must be non-empty with matching rows', rows=Phi.shape[0], targets=y.shape[0])
    if not (np.all(np.isfinite(Phi)) and np.all(np.isfinite(y))):
        raise DistillationError('non-finite values in probe data')


def mean_squared_risk(Phi: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    residual = Phi @ w - y
    return float(np.mean(residual ** 2))


def fit_constrained_linear(Phi: np.ndarray, y: np.ndarray, tau: float, steps: int = 100,
                           step_size: Optional[float] = None, pinv: Optional[np.ndarray] = None,
                           lipschitz: Optional[float] = None, tol: float = 1e-12) -> np.ndarray:
    """Projected gradient descent on mean squared error over the tau-ball.

    Starts from the minimum-norm least-squares solution, which is already
    optimal whenever it lies inside the ball.
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_finite(Phi, y)
    if tau <= 0:
        return np.zeros(Phi.shape[1])
    if pinv is None:
        pinv = np.linalg.pinv(Phi)
    w = pinv @ y
    if np.linalg.norm(w) <= tau:
        return w
    w = project_ball(w, tau)
    N = Phi.shape[0]
    if step_size is None:
        if lipschitz is None:
            lipschitz = 2.0 * np.linalg.norm(Phi, 2) ** 2 / N
        step_size = 1.0 / lipschitz if lipschitz > 0 else 0.0
    for _ in range(steps):
        grad = (2.0 / N) * (Phi.T @ (Phi @ w - y))
        nxt = project_ball(w - step_size * grad, tau)
        moved = np.linalg.norm(nxt - w)
        w = nxt
        if moved <= tol:
            break
    return w


def ball_constrained_least_squares(Phi: np.ndarray, y: np.ndarray, tau: float, iters: int = 200) -> np.ndarray:
    """Exact minimizer of mean squared error over the tau-ball.

    Solves (A + mu I) w = b with A = Phi^T Phi / N, b = Phi^T y / N by bisection
    on the multiplier mu until |w| = tau.
    """
    Phi = np.asarray(Phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_finite(Phi, y)
    if tau <= 0:
        return np.zeros(Phi.shape[1])
    N = Phi.shape[0]
    eigvals, Q = np.linalg.eigh(Phi.T @ Phi / N)
    c = Q.T @ (Phi.T @ y / N)
    keep = eigvals > 1e-12 * max(1.0, float(eigvals.max(initial=0.0)))

    def solve(mu: float) -> np.ndarray:
        coef = np.zeros_like(c)
        coef[keep] = c[keep] / (eigvals[keep] + mu)
        return Q @ coef

    w = solve(0.0)
    if np.linalg.norm(w) <= tau:
        return w
    lo, hi = 0.0, float(np.linalg.norm(c)) / tau
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm(solve(mid)) > tau:
            lo = mid
        else:
            hi = mid
    return project_ball(solve(hi), tau)


def exact_min_risk(Phi: np.ndarray, y: np.ndarray, tau: float = math.inf) -> float:
    """Minimum mean squared error of a linear readout with |w| <= tau"""
    if math.isinf(tau):
        model = LinearRegression(fit_intercept=False).fit(Phi, y)
        return mean_squared_risk(Phi, y, model.coef_)
    return mean_squared_risk(Phi, y, ball_constrained_least_squares(Phi, y, tau))


class ProbeBank:
    """Latent samples shared by every probe drawn against one batch.

    The first half trains, the second half is held out; the train-half
    pseudo-inverse and Lipschitz constant are computed once.
    """

    def __init__(self, source, batch: InstanceBatch, l: Optional[int] = None):
        if len(batch) < 2:
            raise DistillationError('a probe bank needs at least 2 samples', samples=len(batch))
        self.source = source
        self.batch = batch
        self.l = source.l if l is None else l
        latent = np.asarray(source.latent(batch), dtype=np.float64)
        half = len(batch) // 2
        self.train = latent[:half]
        self.test = latent[half:]
        self.split = half
        self._pinv: Optional[np.ndarray] = None
        self._lipschitz: Optional[float] = None
        self.probes = 0
        self._lock = threading.Lock()

    @classmethod
    def draw(cls, source, samples: int, rng: np.random.Generator) -> 'ProbeBank':
        return cls(source, sample_instances(source.n, samples, rng))

    def prepare(self):
        """Compute the shared pseudo-inverse and Lipschitz constant"""
        return self.pinv, self.lipschitz

    @property
    def samples(self) -> int:
        return len(self.batch)

    @property
    def pinv(self) -> np.ndarray:
        if self._pinv is None:
            self._pinv = np.linalg.pinv(self.train)
        return self._pinv

    @property
    def lipschitz(self) -> float:
        if self._lipschitz is None:
            self._lipschitz = 2.0 * float(np.linalg.norm(self.train, 2)) ** 2 / self.train.shape[0]
        return self._lipschitz

    def targets(self, target: Target) -> np.ndarray:
        if isinstance(target, Clause):
            return feature_values(target, self.batch, self.l).astype(np.float64)
        return np.asarray(target(self.batch), dtype=np.float64)

    def fit(self, target: Target, tau: float, steps: int = 100, step_size: Optional[float] = None):
        y = self.targets(target)
        w = fit_constrained_linear(self.train, y[:self.split], tau, steps=steps, step_size=step_size,
                                   pinv=self.pinv, lipschitz=self.lipschitz)
        with self._lock:
            self.probes += 1
        return w, mean_squared_risk(self.train, y[:self.split], w), mean_squared_risk(self.test, y[self.split:], w)

    def probe(self, target: Target, cfg: ProbeConfig, epsilon: Optional[float] = None) -> ProbeOutcome:
        epsilon = cfg.epsilon if epsilon is None else epsilon
        w, train_risk, risk = self.fit(target, cfg.tau, steps=cfg.steps, step_size=cfg.step_size)
        threshold = cfg.theta * epsilon
        outcome = ProbeOutcome(bool(risk <= threshold), risk, train_risk, float(np.linalg.norm(w)),
                               self.samples, threshold)
        logger.debug('probe.decision', target=str(target), accepted=outcome.accepted, risk=risk, threshold=threshold)
        return outcome

    def probe_many(self, targets: Sequence[Target], cfg: ProbeConfig, epsilon: Optional[float] = None,
                   n_jobs: int = 1) -> List[ProbeOutcome]:
        self.prepare()
        if n_jobs == 1 or len(targets) < 2:
            return [self.probe(t, cfg, epsilon) for t in targets]
        return Parallel(n_jobs=n_jobs, prefer='threads')(delayed(self.probe)(t, cfg, epsilon) for t in targets)

    def error(self, target: Target, tau: float, steps: int = 100) -> float:
        return self.fit(target, tau, steps=steps)[2]


def linear_probe(g: Target, source, cfg: ProbeConfig, rng: np.random.Generator) -> ProbeOutcome:
    """Draw a fresh sample, fit on one half, accept iff held-out risk <= theta * epsilon"""
    cfg.validate()
    samples = cfg.sample_count(source.bound)
    outcome = ProbeBank.draw(source, samples, rng).probe(g, cfg)
    return replace(outcome, guarantee=cfg.guarantee(source.bound, samples))


def probe_error(S: Clause, source, l: int, n: int, samples: int, rng: np.random.Generator,
                tau: float = math.inf, steps: int = 100) -> float:
    """Held-out mean squared error of the best tau-bounded readout of A^l[AND_S]"""
    if source.n != n:
        raise DistillationError(f'source has n={source.n}, expected {n}', n=n)
    bank = ProbeBank(source, sample_instances(n, samples, rng), l=l)
    return bank.error(S, tau, steps=steps)
