import json
import math
from io import StringIO

import pandas as pd
import pytest
from django.core.management import call_command
from django.core.management.base import CommandError

from apps.experiments.config import parse_config
from apps.experiments.harness import (
    Cell,
    SourceStore,
    cell_seed,
    failures,
    markdown_table,
    read_csv,
    run_cells,
    write_csv,
)
from apps.experiments.management.commands.report import Command as ReportCommand
from apps.experiments.models import ExperimentRun, SweepCell
from distillation.exceptions import ResourceBoundError

pytestmark = pytest.mark.django_db


def run(command, tmp_path, **options):
    out = StringIO()
    call_command(command, output_dir=str(tmp_path), stdout=out, **options)
    return json.loads(out.getvalue())


class TestSweepCells:
    def test_finished_cells_are_skipped(self):
        calls = []

        def compute(name):
            calls.append(name)
            return [{'cell': name}], {'name': name}

        cells = [Cell(name, 7, lambda name=name: compute(name)) for name in ('a', 'b')]
        first = run_cells('unit', 'hash0', cells)
        assert [r.status for r in first] == ['DONE', 'DONE']
        assert not any(r.skipped for r in first)

        again = run_cells('unit', 'hash0', cells)
        assert all(r.skipped for r in again)
        assert again[1].rows == [{'cell': 'b'}]
        assert calls == ['a', 'b']
        assert SweepCell.objects.filter(kind='unit', status='DONE').count() == 2

    def test_failed_cells_are_recorded_and_retried(self):
        attempts = []

        def broken():
            attempts.append(1)
            raise ResourceBoundError('too big', cap=3)

        cells = [Cell('ok', 1, lambda: ([], {})), Cell('bad', 2, broken)]
        results = run_cells('unit', 'hash1', cells)
        assert [r.status for r in results] == ['DONE', 'FAILED']
        assert failures(results) == [{'cell': 'bad', 'error': 'resource_bound', 'message': 'too big', 'cap': 3}]
        record = SweepCell.objects.get(kind='unit', config_hash='hash1', cell_id='bad')
        assert record.status == 'FAILED' and record.error['cap'] == 3

        run_cells('unit', 'hash1', cells)
        assert len(attempts) == 2
        assert SweepCell.objects.filter(config_hash='hash1').count() == 2

    def test_threaded_cells_keep_their_order(self):
        cells = [Cell(str(i), i, lambda i=i: ([{'i': i}], {})) for i in range(5)]
        results = run_cells('unit', 'hash2', cells, n_jobs=2)
        assert [r.rows[0]['i'] for r in results] == list(range(5))

    def test_cell_seeds(self):
        assert cell_seed(0, 'e2e', 2) == cell_seed(0, 'e2e', 2)
        assert cell_seed(0, 'e2e', 2) != cell_seed(0, 'e2e', 3)
        assert 0 <= cell_seed(5, 'lrh') < 2**32


class TestArtifacts:
    def test_csv_carries_provenance(self, tmp_path):
        path = tmp_path / 'table.csv'
        rows = [{'depth': 2, 'err': 1 / 3}, {'depth': 3, 'err': None}]
        write_csv(path, rows, ['depth', 'err'], {'kind': 'unit', 'seed': '0'})
        text = path.read_text()
        assert text.startswith('# kind: unit\n# seed: 0\ndepth,err\n2,0.333333\n')
        header, frame = read_csv(path)
        assert header == {'kind': 'unit', 'seed': '0'}
        assert frame['depth'].tolist() == [2, 3]
        assert pd.isna(frame['err'][1])

        write_csv(path, rows, ['depth', 'err'], {'kind': 'unit', 'seed': '0'})
        assert path.read_text() == text

    def test_markdown_table(self):
        frame = pd.DataFrame({'n': [3], 'growth': [float('nan')], 'acc': [0.123456]})
        assert markdown_table(frame).splitlines() == [
            '| n | growth | acc |',
            '|---|---|---|',
            '| 3 |  | 0.1235 |',
        ]

    def test_truths_are_written_once(self, tmp_path):
        cfg = parse_config('', {'experiment.n': '3', 'experiment.output_dir': str(tmp_path)})
        truth = SourceStore(cfg).truth(1)
        assert SourceStore(cfg).truth_path(1).is_file()
        assert SourceStore(cfg).truth(1) == truth


class TestCommands:
    def test_separation(self, tmp_path):
        summary = run('separation', tmp_path, separation_range='3,4')
        assert summary['status'] == 'DONE'
        header, frame = read_csv(tmp_path / 'separation.csv')
        assert header['kind'] == 'separation'
        assert header['config_hash'] == summary['config_hash']
        assert frame['negatives'].tolist() == [3, 9]
        assert frame['dp_agreement'].tolist() == [1.0, 1.0]
        assert ExperimentRun.objects.get().status == 'DONE'

        before = (tmp_path / 'separation.csv').read_bytes()
        run('separation', tmp_path, separation_range='3,4')
        assert (tmp_path / 'separation.csv').read_bytes() == before
        assert SweepCell.objects.filter(kind='separation').count() == 1

    def test_config_errors_exit_with_code_two(self, tmp_path):
        with pytest.raises(CommandError) as info:
            run('separation', tmp_path, set=['experiment.n=-1'])
        assert info.value.returncode == 2
        payload = json.loads(str(info.value))
        assert payload['error'] == 'config' and payload['key'] == 'n'

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(CommandError) as info:
            run('separation', tmp_path, config=str(tmp_path / 'absent.ini'))
        assert info.value.returncode == 2

    def test_distill_and_resume(self, tmp_path):
        options = {'n': 3, 'l': 2, 'depths': '1', 'set': ['probe.samples=256']}
        summary = run('distill', tmp_path, **options)
        assert summary['cells'] == 1 and summary['skipped'] == 0
        header, frame = read_csv(tmp_path / 'e2e.csv')
        assert header['kind'] == 'e2e'
        row = frame.iloc[0]
        assert (row['depth'], row['k'], row['probes']) == (1, math.inf, 6)
        assert row['source_acc'] == 1.0
        assert row['distill_acc'] >= 0.5
        assert list((tmp_path / 'models').glob('e2e_depth1_kinf_*.bundle'))
        _, diagnostics = read_csv(tmp_path / 'e2e_diagnostics.csv')
        assert diagnostics['v_samples'].iloc[0] > 0

        again = run('distill', tmp_path, **options)
        assert again['skipped'] == 1
        assert again['config_hash'] == summary['config_hash']

    def test_linear_probes_of_an_oracle(self, tmp_path):
        run('probe_lrh', tmp_path, n=3, l=2, depths='1')
        _, frame = read_csv(tmp_path / 'lrh.csv')
        assert frame['norm'].tolist() == [math.inf, 0.001]
        exact, tight = frame['avg_test_err'].tolist()
        assert exact <= 1e-6
        assert tight >= exact
        assert frame['source_acc'].tolist() == [1.0, 1.0]

    def test_truths_and_sources(self, tmp_path):
        summary = run('gen_truth', tmp_path, n=3, l=1, depths='1,2', two_reach=True)
        assert summary['truths'] == 3
        assert (tmp_path / 'truth' / 'two_reach_n3.bundle').is_file()
        summary = run('train_source', tmp_path, n=3, l=1, depths='1')
        assert summary['sources'][0]['backend'] == 'oracle'
        assert summary['sources'][0]['source_acc'] == 1.0

    def test_report(self, tmp_path):
        run('separation', tmp_path, separation_range='3')
        summary = run('report', tmp_path)
        text = (tmp_path / 'report.md').read_text()
        assert text.startswith('# Distillation report')
        assert '## separation' in text
        assert '- kind: separation' in text
        assert summary['outputs'][-1].endswith('report.md')

    def test_report_help_maps_hyphenated_names(self):
        for name in ('gen_truth', 'train_source', 'probe_lrh'):
            assert name in ReportCommand.help
            assert name.replace('_', '-') in ReportCommand.help
