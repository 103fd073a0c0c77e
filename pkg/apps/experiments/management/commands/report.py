from apps.experiments.harness import write_report

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = ('Render every CSV artifact in the output directory as markdown. Command names use underscores: '
            'gen-truth runs as gen_truth, train-source as train_source, probe-lrh as probe_lrh')

    def run_experiment(self, cfg, options):
        path = write_report(cfg)
        return [str(path)], {}
