from pathlib import Path

from experiments.runs import RunCommand
from mae_trainer.training import pretrain


class Command(RunCommand):
    help = 'Masked-autoencoder pretraining with cross-echo consistency'
    run_name = 'pretrain'

    def add_run_arguments(self, parser):
        parser.add_argument('--data', type=Path, help='dataset directory (default: output.dataset_dir)')
        parser.add_argument('--resume', type=Path, help='continue from an mae_<step>.ckpt checkpoint')

    def inputs(self, config, options):
        return {
            'dataset': options['data'] or Path(config['output']['dataset_dir']),
            'resume': options['resume'],
        }

    def run(self, config, out_dir, options):
        dataset = options['data'] or Path(config['output']['dataset_dir'])
        checkpoint = pretrain(config, dataset, out_dir, resume=options['resume'], on_event=self.event)
        return f"Pretraining finished: {checkpoint}"
