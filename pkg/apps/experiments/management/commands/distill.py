from apps.experiments.harness import failures, run_e2e_table

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Run end-to-end distillation over depths and k, writing e2e.csv and its diagnostics'

    def run_experiment(self, cfg, options):
        paths, results = run_e2e_table(cfg)
        return [str(p) for p in paths], {'cells': len(results), 'skipped': sum(r.skipped for r in results),
                                         'failures': failures(results)}
