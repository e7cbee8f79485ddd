from pathlib import Path

from django.core.management.base import CommandError

from experiments.runs import USAGE_ERROR, RunCommand
from mpl_trainer.training import adapt


class Command(RunCommand):
    help = 'Adapt a pretrained encoder from the labelled source echo to the target echo'
    run_name = 'adapt'

    def add_run_arguments(self, parser):
        parser.add_argument('--data', type=Path, help='dataset directory (default: output.dataset_dir)')
        parser.add_argument('--mae', type=Path, help='pretrained autoencoder checkpoint')
        parser.add_argument('--source-only', action='store_true',
                            help='train the source-only baseline instead of adapting')

    def inputs(self, config, options):
        if options['mae'] is None and not options['source_only']:
            raise CommandError('--mae is required unless --source-only is given', returncode=USAGE_ERROR)
        return {
            'dataset': options['data'] or Path(config['output']['dataset_dir']),
            'mae': options['mae'],
        }

    def run(self, config, out_dir, options):
        dataset = options['data'] or Path(config['output']['dataset_dir'])
        result = adapt(config, options['mae'], dataset, out_dir,
                       source_only=options['source_only'], on_event=self.event)
        mode = 'source-only baseline' if options['source_only'] else 'adaptation'
        return (f"Finished {mode} after {result.epochs_run} epochs ({result.steps} steps); "
                f"best validation dice {result.best_dice:.4f} in {result.checkpoint}")
