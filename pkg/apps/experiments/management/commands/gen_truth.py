from apps.experiments.harness import generate_truths

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Generate the ground-truth local-iteration models, one bundle per depth'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--two-reach', action='store_true', help='also write the two-hop reachability model')

    def run_experiment(self, cfg, options):
        paths = generate_truths(cfg, two_reach=options['two_reach'])
        return [str(p) for p in paths], {'truths': len(paths)}
