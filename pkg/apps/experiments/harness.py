"""Experiment drivers behind the management commands.

Each sweep is a list of cells keyed by (kind, config hash, cell id). Cells
run on joblib threads, each with its own rng stream forked from the master
seed, and their results are written to the database from the calling thread
only, so a rerun with the same config skips every finished cell.
"""
import hashlib
import math
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from django.conf import settings
from joblib import Parallel, delayed, effective_n_jobs

from distillation import __version__
from distillation.distiller import distill, evaluation_batch
from distillation.exceptions import ConfigError, DistillationError
from distillation.local_iter import LocalIterationModel, build_two_reachability_model, random_local_model
from distillation.probe import ProbeBank
from distillation.random_state import fork_rng, fork_seed
from distillation.separation import separation_report
from distillation.source_model import (
    OracleSpec,
    SourceModel,
    build_oracle_source,
    load_source,
    save_source,
    train_mlp_source,
)

from .config import ExperimentConfig, config_hash, parse_config, render_config
from .models import SweepCell

logger = structlog.get_logger(__name__)

VERSION = f'v{__version__}'

LRH_COLUMNS = ('depth', 'norm', 'n_conj', 'source_acc', 'avg_train_err', 'avg_test_err')
E2E_COLUMNS = ('depth', 'k', 'source_acc', 'distill_acc', 'probes', 'probe_frac')
DIAGNOSTIC_COLUMNS = ('depth', 'k', 'paths_per_vertex', 'cand_trees_per_vertex', 'source_agreement',
                      'half_width', 'v_samples')
SEPARATION_COLUMNS = ('n', 'total', 'negatives', 'min_leaves', 'lower_bound', 'dp_agreement', 'growth')


# Configuration

def settings_defaults() -> Dict[str, str]:
    return {
        'experiment.seed': str(settings.DISTILL_MASTER_SEED),
        'experiment.n_jobs': str(settings.DISTILL_N_JOBS),
        'experiment.output_dir': str(settings.DISTILL_OUTPUT_DIR),
    }


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    text = ''
    if path:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f'config file not found: {config_path}')
        text = config_path.read_text(encoding='utf-8')
    return parse_config(text, overrides=overrides, defaults=settings_defaults())


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.experiment.output_dir or settings.DISTILL_OUTPUT_DIR)


def cell_seed(master_seed: int, *keys) -> int:
    return int(fork_seed(master_seed, *keys).generate_state(1, np.uint32)[0])


def provenance(cfg: ExperimentConfig, kind: str) -> Dict[str, str]:
    return {'kind': kind, 'config_hash': config_hash(cfg), 'seed': str(cfg.experiment.seed), 'version': VERSION}


def write_config(cfg: ExperimentConfig) -> Path:
    path = output_dir(cfg) / f'config_{config_hash(cfg)}.ini'
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_config(cfg), encoding='utf-8')
    return path


# Truths and sources

def _source_key(cfg: ExperimentConfig, depth: int) -> str:
    e = cfg.experiment
    parts = [f'n={e.n}', f'l={e.l}', f'depth={depth}', f'backend={e.backend}', f'seed={e.seed}']
    section = cfg.mlp if e.backend == 'mlp' else cfg.oracle
    parts.append(repr(section))
    return hashlib.sha256('|'.join(parts).encode('utf-8')).hexdigest()[:12]


class SourceStore:
    """Truth models and source checkpoints per depth, built at most once each"""

    def __init__(self, cfg: ExperimentConfig, root: Optional[Path] = None):
        self.cfg = cfg
        self.root = root or output_dir(cfg)
        self._lock = threading.Lock()
        self._depth_locks: Dict[int, threading.RLock] = {}
        self._truths: Dict[int, LocalIterationModel] = {}
        self._sources: Dict[int, SourceModel] = {}

    def _guard(self, depth: int) -> threading.RLock:
        with self._lock:
            return self._depth_locks.setdefault(depth, threading.RLock())

    def truth_path(self, depth: int) -> Path:
        return self.root / 'truth' / f'truth_depth{depth}_{_source_key(self.cfg, depth)}.bundle'

    def source_path(self, depth: int) -> Path:
        return self.root / 'sources' / f'source_depth{depth}_{_source_key(self.cfg, depth)}.joblib'

    def truth(self, depth: int) -> LocalIterationModel:
        with self._guard(depth):
            if depth in self._truths:
                return self._truths[depth]
            path = self.truth_path(depth)
            if path.is_file():
                truth = LocalIterationModel.from_bundle(path.read_text(encoding='utf-8'))
                logger.info('harness.truth_loaded', depth=depth, path=str(path))
            else:
                e = self.cfg.experiment
                truth = random_local_model(e.n, e.l, depth, fork_rng(e.seed, 'truth', depth))
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text(truth.to_bundle(), encoding='utf-8')
                logger.info('harness.truth_generated', depth=depth, size=truth.size, path=str(path))
            self._truths[depth] = truth
            return truth

    def source(self, depth: int) -> SourceModel:
        with self._guard(depth):
            if depth in self._sources:
                return self._sources[depth]
            path = self.source_path(depth)
            if path.is_file():
                source = load_source(path)
                logger.info('harness.source_loaded', depth=depth, backend=source.backend, path=str(path))
            else:
                source = self._build_source(depth)
                save_source(source, path)
            self._sources[depth] = source
            return source

    def _build_source(self, depth: int) -> SourceModel:
        e = self.cfg.experiment
        truth = self.truth(depth)
        if e.backend == 'mlp':
            mlp_cfg = replace(self.cfg.mlp, seed=cell_seed(e.seed, 'mlp', depth))
            return train_mlp_source(truth, mlp_cfg)
        o = self.cfg.oracle
        return build_oracle_source(OracleSpec(truth, distractors=o.distractors, distractor_width=o.distractor_width,
                                              noise=o.noise, seed=cell_seed(e.seed, 'oracle', depth)))


# Sweep cells

@dataclass(frozen=True)
class Cell:
    cell_id: str
    seed: int
    compute: Callable[[], Tuple[List[Dict[str, Any]], Dict[str, Any]]]


@dataclass
class CellResult:
    cell_id: str
    status: str
    rows: List[Dict[str, Any]] = field(default_factory=list)
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    error: Optional[Dict[str, Any]] = None
    skipped: bool = False


def _execute(kind: str, cell: Cell) -> CellResult:
    logger.info('sweep.cell_start', kind=kind, cell=cell.cell_id)
    try:
        rows, diagnostics = cell.compute()
    except DistillationError as error:
        payload = error.to_dict()
        if error.report is not None:
            payload['stage'] = error.report.stage
        logger.error('sweep.cell_failed', kind=kind, cell=cell.cell_id, error=payload['error'],
                     message=error.message)
        return CellResult(cell.cell_id, 'FAILED', error=payload)
    logger.info('sweep.cell_done', kind=kind, cell=cell.cell_id, rows=len(rows))
    return CellResult(cell.cell_id, 'DONE', rows=rows, diagnostics=diagnostics)


def run_cells(kind: str, digest: str, cells: Sequence[Cell], n_jobs: int = 1) -> List[CellResult]:
    """Run the unfinished cells in order; results come back in cell order"""
    finished = {record.cell_id: record for record in
                SweepCell.objects.filter(kind=kind, config_hash=digest, status='DONE')}
    results: Dict[str, CellResult] = {}
    pending: List[Cell] = []
    for cell in cells:
        record = finished.get(cell.cell_id)
        if record is not None:
            logger.info('sweep.cell_skipped', kind=kind, cell=cell.cell_id)
            results[cell.cell_id] = CellResult(cell.cell_id, 'DONE', rows=record.rows,
                                               diagnostics=record.diagnostics, skipped=True)
        else:
            pending.append(cell)

    width = max(1, effective_n_jobs(n_jobs))
    for start in range(0, len(pending), width):
        chunk = pending[start:start + width]
        if width == 1:
            outcomes = [_execute(kind, cell) for cell in chunk]
        else:
            outcomes = Parallel(n_jobs=width, prefer='threads')(delayed(_execute)(kind, cell) for cell in chunk)
        for cell, outcome in zip(chunk, outcomes):
            SweepCell.objects.update_or_create(
                kind=kind, config_hash=digest, cell_id=cell.cell_id,
                defaults={'status': outcome.status, 'seed': cell.seed, 'rows': outcome.rows,
                          'diagnostics': outcome.diagnostics, 'error': outcome.error})
            results[cell.cell_id] = outcome
    return [results[cell.cell_id] for cell in cells]


def failures(results: Sequence[CellResult]) -> List[Dict[str, Any]]:
    return [{'cell': r.cell_id, **(r.error or {})} for r in results if r.status == 'FAILED']


# CSV artifacts

def write_csv(path: Path, rows: Sequence[Mapping[str, Any]], columns: Sequence[str],
              header: Mapping[str, str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns))
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        for key, value in header.items():
            handle.write(f'# {key}: {value}\n')
        frame.to_csv(handle, index=False, float_format='%.6g', lineterminator='\n')
    logger.info('harness.csv_written', path=str(path), rows=len(frame))
    return path


def read_csv(path: Path) -> Tuple[Dict[str, str], pd.DataFrame]:
    header: Dict[str, str] = {}
    with open(path, encoding='utf-8') as handle:
        for line in handle:
            if not line.startswith('#'):
                break
            key, _, value = line[1:].partition(':')
            header[key.strip()] = value.strip()
    return header, pd.read_csv(path, comment='#')


def _rows(results: Sequence[CellResult]) -> List[Dict[str, Any]]:
    return [row for result in results if result.status == 'DONE' for row in result.rows]


def _norm_label(tau: float) -> str:
    return 'inf' if math.isinf(tau) else repr(tau)


# Drivers

def generate_truths(cfg: ExperimentConfig, two_reach: bool = False) -> List[Path]:
    store = SourceStore(cfg)
    paths = []
    for depth in cfg.experiment.depths:
        store.truth(depth)
        paths.append(store.truth_path(depth))
    if two_reach:
        model = build_two_reachability_model(cfg.experiment.n)
        path = output_dir(cfg) / 'truth' / f'two_reach_n{cfg.experiment.n}.bundle'
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(model.to_bundle(), encoding='utf-8')
        paths.append(path)
    return paths


def train_sources(cfg: ExperimentConfig) -> List[Dict[str, Any]]:
    store = SourceStore(cfg)
    summaries = []
    for depth in cfg.experiment.depths:
        source = store.source(depth)
        batch = evaluation_batch(source.n, cfg.distill.eval_samples, fork_rng(cfg.experiment.seed, 'eval', depth))
        summaries.append({
            'depth': depth,
            'backend': source.backend,
            'latent_dim': source.latent_dim,
            'bound': source.bound,
            'source_acc': source.accuracy(batch),
            'path': str(store.source_path(depth)),
        })
    return summaries


def _lrh_cell(cfg: ExperimentConfig, store: SourceStore, depth: int) -> Tuple[List[Dict[str, Any]], Dict[str, Any]]:
    e = cfg.experiment
    truth = store.truth(depth)
    source = store.source(depth)
    clauses = list(dict.fromkeys(c.canonical() for c in truth.global_tree.root_prefix_paths()))
    batch = evaluation_batch(e.n, cfg.distill.eval_samples, fork_rng(e.seed, 'eval', depth))
    source_acc = source.accuracy(batch)
    bank = ProbeBank.draw(source, e.lrh_samples, fork_rng(e.seed, 'lrh', depth))
    rows = []
    for tau in e.lrh_norms:
        fits = [bank.fit(clause, tau, steps=e.lrh_steps) for clause in clauses]
        rows.append({
            'depth': depth,
            'norm': _norm_label(tau),
            'n_conj': len(clauses),
            'source_acc': source_acc,
            'avg_train_err': float(np.mean([f[1] for f in fits])),
            'avg_test_err': float(np.mean([f[2] for f in fits])),
        })
    return rows, {'probes': bank.probes}


def run_lrh_table(cfg: ExperimentConfig) -> Tuple[Path, List[CellResult]]:
    store = SourceStore(cfg)
    e = cfg.experiment
    cells = [Cell(f'depth={d}', cell_seed(e.seed, 'lrh', d), lambda d=d: _lrh_cell(cfg, store, d))
             for d in e.depths]
    results = run_cells('lrh', config_hash(cfg), cells, n_jobs=e.n_jobs)
    path = write_csv(output_dir(cfg) / 'lrh.csv', _rows(results), LRH_COLUMNS, provenance(cfg, 'lrh'))
    return path, results


def _e2e_cell(cfg: ExperimentConfig, store: SourceStore, depth: int, k: Optional[int], seed: int,
              inner_jobs: int) -> Tuple[List[Dict[str, Any]], Dict[str, Any]]:
    truth = store.truth(depth)
    source = store.source(depth)
    distill_cfg = replace(cfg.distill, R=depth, k=k, seed=seed, n_jobs=inner_jobs)
    model, report = distill(source, distill_cfg, probe_cfg=cfg.probe, truth=truth)
    label = 'inf' if k is None else k
    bundle = output_dir(cfg) / 'models' / f'e2e_depth{depth}_k{label}_{config_hash(cfg)}.bundle'
    bundle.parent.mkdir(parents=True, exist_ok=True)
    bundle.write_text(model.to_bundle(), encoding='utf-8')
    diagnostics = {
        'depth': depth,
        'k': label,
        **report.diagnostics(),
        'half_width': report.source_agreement.half_width if report.source_agreement else None,
        'v_samples': report.v_samples,
        'bundle': str(bundle),
    }
    return [report.row()], diagnostics


def run_e2e_table(cfg: ExperimentConfig) -> Tuple[List[Path], List[CellResult]]:
    store = SourceStore(cfg)
    e = cfg.experiment
    # k only shapes the top-k pool
    ks: Sequence[Optional[int]] = e.ks if cfg.distill.phase1 == 'topk' else (None,)
    inner_jobs = e.n_jobs if len(e.depths) * len(ks) == 1 else 1
    cells = []
    for depth in e.depths:
        # paired seeds across k at one depth
        seed = cell_seed(e.seed, 'e2e', depth)
        for k in ks:
            cells.append(Cell(f'depth={depth},k={"inf" if k is None else k}', seed,
                              lambda d=depth, k=k, s=seed: _e2e_cell(cfg, store, d, k, s, inner_jobs)))
    results = run_cells('e2e', config_hash(cfg), cells, n_jobs=e.n_jobs)
    header = provenance(cfg, 'e2e')
    root = output_dir(cfg)
    table = write_csv(root / 'e2e.csv', _rows(results), E2E_COLUMNS, header)
    diagnostics = [r.diagnostics for r in results if r.status == 'DONE']
    extra = write_csv(root / 'e2e_diagnostics.csv', diagnostics, DIAGNOSTIC_COLUMNS, header)
    return [table, extra], results


def _separation_cell(n_range: Sequence[int]) -> Tuple[List[Dict[str, Any]], Dict[str, Any]]:
    return [row.as_dict() for row in separation_report(n_range)], {}


def run_separation(cfg: ExperimentConfig) -> Tuple[Path, List[CellResult]]:
    n_range = cfg.experiment.separation_range
    cell_id = 'n=' + ','.join(str(n) for n in n_range)
    cells = [Cell(cell_id, cfg.experiment.seed, lambda: _separation_cell(n_range))]
    results = run_cells('separation', config_hash(cfg), cells)
    path = write_csv(output_dir(cfg) / 'separation.csv', _rows(results), SEPARATION_COLUMNS,
                     provenance(cfg, 'separation'))
    return path, results


# Report

def _cell_text(value: Any) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ''
    if isinstance(value, float):
        return f'{value:.4g}'
    return str(value)


def markdown_table(frame: pd.DataFrame) -> str:
    lines = ['| ' + ' | '.join(str(c) for c in frame.columns) + ' |',
             '|' + '|'.join('---' for _ in frame.columns) + '|']
    for row in frame.itertuples(index=False):
        lines.append('| ' + ' | '.join(_cell_text(v) for v in row) + ' |')
    return '\n'.join(lines)


def render_report(root: Path) -> str:
    chunks = ['# Distillation report', '']
    paths = sorted(Path(root).glob('*.csv'))
    if not paths:
        chunks.append(f'No CSV artifacts in {root}.')
    for path in paths:
        header, frame = read_csv(path)
        chunks.append(f'## {path.stem}')
        chunks.append('')
        chunks.extend(f'- {key}: {value}' for key, value in header.items())
        chunks.append('')
        chunks.append(markdown_table(frame))
        chunks.append('')
    return '\n'.join(chunks)


def write_report(cfg: ExperimentConfig) -> Path:
    root = output_dir(cfg)
    path = root / 'report.md'
    root.mkdir(parents=True, exist_ok=True)
    path.write_text(render_report(root), encoding='utf-8')
    return path
