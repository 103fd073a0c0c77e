from apps.experiments.harness import failures, run_separation

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Count negatives and minimal tree sizes on the restricted two-hop family'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--range', dest='separation_range', help='comma-separated vertex counts')

    def run_experiment(self, cfg, options):
        path, results = run_separation(cfg)
        return [str(path)], {'failures': failures(results)}
