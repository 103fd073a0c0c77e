import json
from typing import Any, Dict, List, Tuple

import structlog
from django.core.management import call_command
from django.core.management.base import BaseCommand, CommandError
from django.db import connection
from django.utils import timezone

from apps.experiments.config import ExperimentConfig, config_hash, render_config
from apps.experiments.harness import VERSION, load_config, write_config
from apps.experiments.models import ExperimentRun, SweepCell
from distillation.exceptions import DistillationError

logger = structlog.get_logger(__name__)

# flag destination -> config key
FLAG_KEYS = {
    'profile': 'experiment.profile',
    'seed': 'experiment.seed',
    'n': 'experiment.n',
    'l': 'experiment.l',
    'depths': 'experiment.depths',
    'ks': 'experiment.ks',
    'backend': 'experiment.backend',
    'output_dir': 'experiment.output_dir',
    'n_jobs': 'experiment.n_jobs',
    'separation_range': 'experiment.separation_range',
}


def ensure_schema():
    if SweepCell._meta.db_table not in connection.introspection.table_names():
        call_command('migrate', verbosity=0, interactive=False)


def collect_overrides(options: Dict[str, Any]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for pair in options.get('set') or []:
        key, sep, value = pair.partition('=')
        if not sep:
            raise CommandError(json.dumps({'error': 'config', 'message': f'--set expects section.key=value, got {pair!r}'}),
                               returncode=2)
        overrides[key.strip()] = value.strip()
    for dest, key in FLAG_KEYS.items():
        if options.get(dest) is not None:
            overrides[key] = str(options[dest])
    return overrides


class ExperimentCommand(BaseCommand):
    """Shared flags, config loading, run records and JSON error reporting"""

    def add_arguments(self, parser):
        parser.add_argument('--config', help='INI config file')
        parser.add_argument('--set', action='append', metavar='SECTION.KEY=VALUE', help='override one config key')
        parser.add_argument('--profile', choices=['desk', 'full'])
        parser.add_argument('--seed', type=int)
        parser.add_argument('--n', type=int)
        parser.add_argument('--l', type=int)
        parser.add_argument('--depths', help='comma-separated per-vertex depths')
        parser.add_argument('--ks', help='comma-separated top-k sizes')
        parser.add_argument('--backend', choices=['oracle', 'mlp'])
        parser.add_argument('--output-dir', dest='output_dir')
        parser.add_argument('--n-jobs', dest='n_jobs', type=int)

    def run_experiment(self, cfg: ExperimentConfig, options: Dict[str, Any]) -> Tuple[List[str], Dict[str, Any]]:
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            cfg = load_config(options.get('config'), collect_overrides(options))
        except DistillationError as error:
            raise CommandError(json.dumps(error.to_dict()), returncode=2)

        ensure_schema()
        run = ExperimentRun.objects.create(
            command=self.command_name(), config_hash=config_hash(cfg), config_text=render_config(cfg),
            seed=cfg.experiment.seed, version=VERSION)
        structlog.contextvars.bind_contextvars(command=run.command, config_hash=run.config_hash)
        try:
            config_path = write_config(cfg)
            paths, summary = self.run_experiment(cfg, options)
        except DistillationError as error:
            payload = error.to_dict()
            self._finish(run, 'FAILED', error=payload)
            raise CommandError(json.dumps(payload), returncode=2)
        finally:
            structlog.contextvars.unbind_contextvars('command', 'config_hash')

        failed = summary.get('failures') or []
        self._finish(run, 'FAILED' if failed else 'DONE', paths=[str(config_path), *paths],
                     error={'failures': failed} if failed else None)
        self.stdout.write(json.dumps({'status': run.status, 'config_hash': run.config_hash,
                                      'outputs': run.output_paths, **summary}, default=str))
        if failed:
            raise CommandError(json.dumps({'error': 'cell_failures', 'failures': failed}, default=str),
                               returncode=2)

    def command_name(self) -> str:
        return self.__module__.rsplit('.', 1)[-1]

    def _finish(self, run: ExperimentRun, status: str, paths=None, error=None):
        run.status = status
        run.output_paths = paths or []
        run.error = error
        run.finished_at = timezone.now()
        run.save()
        logger.info('harness.run_finished', command=run.command, status=status)
