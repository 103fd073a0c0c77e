from apps.experiments.harness import failures, run_lrh_table

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Probe every root-prefix conjunction of the true trees and write lrh.csv'

    def run_experiment(self, cfg, options):
        path, results = run_lrh_table(cfg)
        return [str(path)], {'cells': len(results), 'skipped': sum(r.skipped for r in results),
                             'failures': failures(results)}
