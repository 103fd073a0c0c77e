from apps.experiments.harness import train_sources

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Build or train the source model for every depth and write its checkpoint'

    def run_experiment(self, cfg, options):
        summaries = train_sources(cfg)
        return [s['path'] for s in summaries], {'sources': summaries}
