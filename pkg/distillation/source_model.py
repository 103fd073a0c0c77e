"""Source models: a prediction bit plus a latent map with a norm bound.

Two backends share one interface. The oracle backend plants every key
conjunction feature of a truth model as a latent coordinate; the MLP backend
is a residual network trained with hand-written gradients.
"""
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import joblib
import numpy as np
import structlog

from .exceptions import DistillationError, EncodingMismatchError, TrainingError
from .feature_extractor import LatentFeatureExtractor
from .local_iter import (
    InstanceBatch,
    LocalIterationModel,
    enumerate_instances,
    instance_bit_count,
    sample_instances,
)
from .random_state import fork_rng

logger = structlog.get_logger(__name__)

CHECKPOINT_VERSION = 1
BOUND_SAFETY = 1.1
MAX_EXACT_BOUND_BITS = 16
LOSS_INCREASE_TOLERANCE = 0.05


class SourceModel:
    """Common interface: predict(batch) -> bits, latent(batch) -> (N, m) floats"""

    backend = 'abstract'

    def __init__(self, n: int, l: int, latent_dim: int, bound: float,
                 truth: Optional[LocalIterationModel] = None, metadata: Optional[Dict[str, Any]] = None):
        if not np.isfinite(bound):
            raise DistillationError('latent norm bound must be finite', bound=bound)
        self.n = n
        self.l = l
        self.latent_dim = latent_dim
        self.bound = float(bound)
        self.truth = truth
        self.metadata = metadata or {}

    def score(self, batch: InstanceBatch) -> np.ndarray:
        return self.predict(batch).astype(np.float64)

    def predict(self, batch: InstanceBatch) -> np.ndarray:
        raise NotImplementedError

    def latent(self, batch: InstanceBatch) -> np.ndarray:
        raise NotImplementedError

    def _check(self, batch: InstanceBatch):
        if batch.n != self.n:
            raise EncodingMismatchError(f'source expects n={self.n}, got {batch.n}', n=self.n, got=batch.n)

    def accuracy(self, batch: InstanceBatch) -> Optional[float]:
        if self.truth is None:
            return None
        return float(np.mean(self.predict(batch) == self.truth.predict(batch)))

    def describe(self) -> Dict[str, Any]:
        return {'backend': self.backend, 'n': self.n, 'l': self.l,
                'latent_dim': self.latent_dim, 'bound': self.bound, **self.metadata}


# Oracle backend

@dataclass(frozen=True)
class OracleSpec:
    truth: LocalIterationModel
    distractors: int = 0
    distractor_width: int = 2
    noise: float = 0.0
    seed: int = 0


class OracleSource(SourceModel):
    backend = 'oracle'

    def __init__(self, spec: OracleSpec):
        self.spec = spec
        self.extractor = LatentFeatureExtractor(
            spec.truth, distractors=spec.distractors, distractor_width=spec.distractor_width,
            noise=spec.noise, seed=spec.seed)
        super().__init__(
            spec.truth.n, spec.truth.l, self.extractor.latent_dim, self.extractor.bound, truth=spec.truth,
            metadata={'planted': len(self.extractor.planted), 'distractors': len(self.extractor.distractor_bits),
                      'noise': spec.noise})

    def predict(self, batch: InstanceBatch) -> np.ndarray:
        self._check(batch)
        return self.spec.truth.predict(batch)

    def latent(self, batch: InstanceBatch) -> np.ndarray:
        self._check(batch)
        return self.extractor.transform(batch)


def build_oracle_source(spec: OracleSpec) -> OracleSource:
    source = OracleSource(spec)
    logger.info('source.oracle_built', n=source.n, l=source.l, latent_dim=source.latent_dim, bound=source.bound)
    return source


# Residual MLP backend

@dataclass(frozen=True)
class MLPConfig:
    depth: int = 2
    width: int = 128
    activation: str = 'relu'
    loss: str = 'logistic'
    optimizer: str = 'sgd'
    learning_rate: float = 0.05
    schedule: str = 'constant'
    decay_steps: int = 10000
    batch_size: int = 128
    steps: int = 50000
    seed: int = 0
    holdout: int = 4000
    log_every: int = 1000

    def validate(self):
        for name in ('depth', 'width', 'batch_size', 'holdout', 'log_every', 'decay_steps'):
            if getattr(self, name) <= 0:
                raise DistillationError(f'{name} must be positive', key=name, value=getattr(self, name))
        if self.steps < 0 or self.learning_rate <= 0:
            raise DistillationError('steps must be non-negative and learning_rate positive',
                                    steps=self.steps, learning_rate=self.learning_rate)
        if self.activation not in ACTIVATIONS:
            raise DistillationError(f'unknown activation {self.activation!r}', key='activation')
        if self.loss not in ('logistic', 'squared'):
            raise DistillationError(f'unknown loss {self.loss!r}', key='loss')
        if self.optimizer not in ('sgd', 'adam'):
            raise DistillationError(f'unknown optimizer {self.optimizer!r}', key='optimizer')
        if self.schedule not in ('constant', 'inverse_sqrt'):
            raise DistillationError(f'unknown schedule {self.schedule!r}', key='schedule')


ACTIVATIONS = {
    'relu': (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)),
    'identity': (lambda z: z, lambda z: np.ones_like(z)),
}

Params = Dict[str, np.ndarray]


class ResidualMLP:
    """a_0 = act(z W_0 + b_0); a_k = a_{k-1} + act(a_{k-1} W_k + b_k); out = a_D w + c"""

    def __init__(self, params: Params, depth: int, activation: str = 'relu'):
        self.params = params
        self.depth = depth
        self.activation = activation
        self.act, self.dact = ACTIVATIONS[activation]

    @classmethod
    def initialize(cls, in_dim: int, cfg: MLPConfig, rng: np.random.Generator) -> 'ResidualMLP':
        params: Params = {
            'W0': rng.standard_normal((in_dim, cfg.width)) * np.sqrt(2.0 / in_dim),
            'b0': np.zeros(cfg.width),
        }
        for k in range(1, cfg.depth + 1):
            # small residual branches keep the stack close to identity at start
            params[f'W{k}'] = rng.standard_normal((cfg.width, cfg.width)) * np.sqrt(2.0 / cfg.width) / cfg.depth
            params[f'b{k}'] = np.zeros(cfg.width)
        params['w_out'] = np.zeros(cfg.width)
        params['b_out'] = np.zeros(1)
        return cls(params, cfg.depth, cfg.activation)

    def forward(self, Z: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
        p = self.params
        pres = [Z @ p['W0'] + p['b0']]
        hidden = [self.act(pres[0])]
        for k in range(1, self.depth + 1):
            pre = hidden[-1] @ p[f'W{k}'] + p[f'b{k}']
            pres.append(pre)
            hidden.append(hidden[-1] + self.act(pre))
        out = hidden[-1] @ p['w_out'] + p['b_out'][0]
        return out, pres, hidden

    def backward(self, Z: np.ndarray, pres: List[np.ndarray], hidden: List[np.ndarray], d_out: np.ndarray) -> Params:
        p = self.params
        grads: Params = {
            'w_out': hidden[-1].T @ d_out,
            'b_out': np.array([d_out.sum()]),
        }
        da = np.outer(d_out, p['w_out'])
        for k in range(self.depth, 0, -1):
            dpre = da * self.dact(pres[k])
            grads[f'W{k}'] = hidden[k - 1].T @ dpre
            grads[f'b{k}'] = dpre.sum(axis=0)
            da = da + dpre @ p[f'W{k}'].T
        dpre = da * self.dact(pres[0])
        grads['W0'] = Z.T @ dpre
        grads['b0'] = dpre.sum(axis=0)
        return grads

    def loss_and_gradients(self, Z: np.ndarray, y: np.ndarray, loss: str) -> Tuple[float, Params]:
        out, pres, hidden = self.forward(Z)
        value, d_out = loss_terms(out, y, loss)
        return value, self.backward(Z, pres, hidden, d_out)

    def latent(self, Z: np.ndarray) -> np.ndarray:
        _, _, hidden = self.forward(Z)
        return np.concatenate(hidden, axis=1)


def loss_terms(out: np.ndarray, y: np.ndarray, loss: str) -> Tuple[float, np.ndarray]:
    """Mean loss and its derivative with respect to each output"""
    N = out.shape[0]
    if loss == 'logistic':
        value = float(np.mean(np.logaddexp(0.0, out) - y * out))
        return value, (_sigmoid(out) - y) / N
    residual = out - y
    return float(np.mean(residual ** 2)), 2.0 * residual / N


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def signed_inputs(batch: InstanceBatch) -> np.ndarray:
    return 2.0 * batch.bits().astype(np.float64) - 1.0


class _Adam:
    def __init__(self, params: Params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: Params, grads: Params, lr: float):
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1 ** self.t)
            v_hat = self.v[k] / (1 - self.beta2 ** self.t)
            params[k] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


class MLPSource(SourceModel):
    backend = 'mlp'

    def __init__(self, network: ResidualMLP, cfg: MLPConfig, n: int, l: int, bound: float,
                 truth: Optional[LocalIterationModel] = None, metadata: Optional[Dict[str, Any]] = None):
        self.network = network
        self.cfg = cfg
        latent_dim = cfg.width * (cfg.depth + 1)
        super().__init__(n, l, latent_dim, bound, truth=truth, metadata=metadata)

    def score(self, batch: InstanceBatch) -> np.ndarray:
        self._check(batch)
        out, _, _ = self.network.forward(signed_inputs(batch))
        return _sigmoid(out) if self.cfg.loss == 'logistic' else np.clip(out, 0.0, 1.0)

    def predict(self, batch: InstanceBatch) -> np.ndarray:
        self._check(batch)
        out, _, _ = self.network.forward(signed_inputs(batch))
        threshold = 0.0 if self.cfg.loss == 'logistic' else 0.5
        return (out > threshold).astype(np.uint8)

    def latent(self, batch: InstanceBatch) -> np.ndarray:
        self._check(batch)
        return self.network.latent(signed_inputs(batch))


def _learning_rate(cfg: MLPConfig, step: int) -> float:
    if cfg.schedule == 'inverse_sqrt':
        return cfg.learning_rate / np.sqrt(1.0 + step / cfg.decay_steps)
    return cfg.learning_rate


def train_mlp_source(truth: LocalIterationModel, cfg: MLPConfig) -> MLPSource:
    cfg.validate()
    n = truth.n
    rng = fork_rng(cfg.seed, 'mlp', 'init')
    stream = fork_rng(cfg.seed, 'mlp', 'batches')
    network = ResidualMLP.initialize(instance_bit_count(n), cfg, rng)
    optimizer = _Adam(network.params) if cfg.optimizer == 'adam' else None

    history: List[Dict[str, float]] = []
    window: List[float] = []
    for step in range(cfg.steps):
        batch = sample_instances(n, cfg.batch_size, stream)
        y = truth.predict(batch).astype(np.float64)
        loss, grads = network.loss_and_gradients(signed_inputs(batch), y, cfg.loss)
        if not np.isfinite(loss):
            norms = {k: float(np.linalg.norm(v)) for k, v in network.params.items()}
            raise TrainingError(
                f'loss became non-finite at step {step}', step=step, loss=str(loss),
                learning_rate=_learning_rate(cfg, step), param_norms=norms, history=history[-5:])
        lr = _learning_rate(cfg, step)
        if optimizer is not None:
            optimizer.step(network.params, grads, lr)
        else:
            for k, g in grads.items():
                network.params[k] -= lr * g
        window.append(loss)
        if len(window) == cfg.log_every:
            entry = {'step': step + 1, 'loss': float(np.mean(window))}
            if history and entry['loss'] > history[-1]['loss'] + LOSS_INCREASE_TOLERANCE:
                logger.warning('mlp.loss_increase', step=step + 1, previous=history[-1]['loss'], current=entry['loss'],
                               tolerance=LOSS_INCREASE_TOLERANCE)
            history.append(entry)
            logger.info('mlp.epoch', step=step + 1, loss=entry['loss'], lr=lr)
            window = []

    holdout = sample_instances(n, cfg.holdout, fork_rng(cfg.seed, 'mlp', 'holdout'))
    bound = estimate_bound(network, n, holdout)
    source = MLPSource(network, cfg, n, truth.l, bound, truth=truth, metadata={'history': history})
    source.metadata['holdout_accuracy'] = source.accuracy(holdout)
    logger.info('source.mlp_trained', steps=cfg.steps, holdout_accuracy=source.metadata['holdout_accuracy'],
                bound=bound)
    return source


def estimate_bound(network: ResidualMLP, n: int, holdout: InstanceBatch) -> float:
    """Max latent norm times a safety factor; exact over the input space when it is small"""
    if instance_bit_count(n) <= MAX_EXACT_BOUND_BITS:
        holdout = enumerate_instances(n)
    norms = np.linalg.norm(network.latent(signed_inputs(holdout)), axis=1)
    return BOUND_SAFETY * float(norms.max()) if norms.size else 0.0


def gradient_check(cfg: MLPConfig, in_dim: int = 6, points: int = 20, step: float = 1e-4,
                   network: Optional[ResidualMLP] = None) -> float:
    """Max relative error between manual and central-difference gradients"""
    rng = fork_rng(cfg.seed, 'gradient-check')
    if network is None:
        network = ResidualMLP.initialize(in_dim, cfg, rng)
        # a zero output layer would hide every hidden gradient
        network.params['w_out'] = rng.standard_normal(cfg.width)
        network.params['b0'] = 0.1 * rng.standard_normal(cfg.width)
    Z = rng.choice([-1.0, 1.0], size=(points, network.params['W0'].shape[0]))
    y = rng.integers(0, 2, size=points).astype(np.float64)
    _, grads = network.loss_and_gradients(Z, y, cfg.loss)
    base_pattern = _activation_pattern(network, Z)

    def probe(flat: np.ndarray, i: int, value: float) -> Optional[float]:
        flat[i] = value
        out, pres, _ = network.forward(Z)
        if cfg.activation == 'relu' and not all(np.array_equal(p > 0, b) for p, b in zip(pres, base_pattern)):
            return None
        return loss_terms(out, y, cfg.loss)[0]

    worst = 0.0
    skipped = 0
    for name, value in network.params.items():
        flat = value.reshape(-1)
        analytic = grads[name].reshape(-1)
        scale = max(float(np.max(np.abs(analytic))), 1e-8)
        for i in range(flat.size):
            saved = flat[i]
            up = probe(flat, i, saved + step)
            down = probe(flat, i, saved - step)
            flat[i] = saved
            if up is None or down is None:
                # the perturbation crossed a rectifier kink
                skipped += 1
                continue
            numeric = (up - down) / (2 * step)
            worst = max(worst, abs(analytic[i] - numeric) / max(scale, abs(numeric)))
    logger.debug('mlp.gradient_check', worst=worst, skipped=skipped)
    return worst


def _activation_pattern(network: ResidualMLP, Z: np.ndarray) -> List[np.ndarray]:
    _, pres, _ = network.forward(Z)
    return [p > 0 for p in pres]


# Checkpoints

def save_source(source: SourceModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: Dict[str, Any] = {
        'format_version': CHECKPOINT_VERSION,
        'backend': source.backend,
        'n': source.n,
        'l': source.l,
        'bound': source.bound,
        'truth': source.truth.to_bundle() if source.truth is not None else None,
    }
    if isinstance(source, MLPSource):
        payload['config'] = asdict(source.cfg)
        payload['params'] = {k: v.copy() for k, v in source.network.params.items()}
        payload['metadata'] = source.metadata
    elif isinstance(source, OracleSource):
        spec = source.spec
        payload['config'] = {'distractors': spec.distractors, 'distractor_width': spec.distractor_width,
                             'noise': spec.noise, 'seed': spec.seed}
    else:
        raise DistillationError(f'cannot checkpoint backend {source.backend!r}')
    joblib.dump(payload, path)
    logger.info('source.saved', path=str(path), backend=source.backend)
    return path


def load_source(path: Union[str, Path]) -> SourceModel:
    payload = joblib.load(Path(path))
    version = payload.get('format_version')
    if version != CHECKPOINT_VERSION:
        raise DistillationError(f'unsupported checkpoint version {version!r}', path=str(path))
    truth = LocalIterationModel.from_bundle(payload['truth']) if payload.get('truth') else None
    if payload['backend'] == 'oracle':
        return build_oracle_source(OracleSpec(truth=truth, **payload['config']))
    cfg = MLPConfig(**payload['config'])
    network = ResidualMLP({k: np.asarray(v) for k, v in payload['params'].items()}, cfg.depth, cfg.activation)
    return MLPSource(network, cfg, payload['n'], payload['l'], payload['bound'], truth=truth,
                     metadata=payload.get('metadata', {}))
