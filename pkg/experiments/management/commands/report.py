from pathlib import Path

import pandas as pd
from django.core.management.base import CommandError

from dataprep.datasets import SliceStore
from experiments.figures import save_loss_curves, save_overlay
from experiments.runs import USAGE_ERROR, RunCommand
from metrics.evaluation import predict_slice
from metrics.report import TABLE_COLUMNS, MetricReport
from networks.checkpoints import load_segmenter
from phantom.io import Manifest

from .evaluate import METRICS_CSV

COMPARISON_CSV = 'comparison_table.csv'


def metrics_path(path: Path) -> Path:
    return path / METRICS_CSV if path.is_dir() else path


class Command(RunCommand):
    help = 'Comparison tables, loss curves and prediction overlays from finished runs'
    run_name = 'report'

    def add_run_arguments(self, parser):
        parser.add_argument('evaluations', nargs='+', type=Path,
                            help='evaluate output directories or their metrics.csv files')
        parser.add_argument('--names', nargs='+', help='method name per evaluation (default: directory name)')
        parser.add_argument('--logs', nargs='*', type=Path, default=[], help='loss_log.csv files to plot')
        parser.add_argument('--checkpoint', type=Path, help='mpl checkpoint whose predictions are overlaid')
        parser.add_argument('--data', type=Path, help='dataset directory for overlays')

    def inputs(self, config, options):
        names = options['names']
        if names and len(names) != len(options['evaluations']):
            raise CommandError('--names needs one name per evaluation', returncode=USAGE_ERROR)
        inputs = {f'metrics_{i}': metrics_path(p) for i, p in enumerate(options['evaluations'])}
        inputs.update({f'log_{i}': p for i, p in enumerate(options['logs'])})
        inputs['checkpoint'] = options['checkpoint']
        if options['checkpoint']:
            inputs['dataset'] = options['data'] or Path(config['output']['dataset_dir'])
        return inputs

    def run(self, config, out_dir, options):
        names = options['names'] or [self._default_name(p) for p in options['evaluations']]
        tables = [
            MetricReport.from_csv(metrics_path(path)).table(name)
            for name, path in zip(names, options['evaluations'])
        ]
        comparison = pd.concat(tables, ignore_index=True).sort_values(['Echo', 'Method'], kind='stable')
        comparison = comparison[TABLE_COLUMNS]
        comparison.to_csv(out_dir / COMPARISON_CSV, index=False)
        for echo, rows in comparison.groupby('Echo'):
            self.stdout.write(f"Echo {echo}")
            self.stdout.write(rows.to_string(index=False, float_format=lambda v: f'{v:.2f}'))

        for log_path in options['logs']:
            save_loss_curves(pd.read_csv(log_path), out_dir / f'loss_{log_path.parent.name}.png',
                             title=log_path.parent.name)

        overlays = 0
        if options['checkpoint']:
            overlays = self._overlays(config, out_dir, options)
        return (f"Compared {len(tables)} evaluations over {comparison['Echo'].nunique()} echoes; "
                f"{len(options['logs'])} loss plots, {overlays} overlays in {out_dir}")

    @staticmethod
    def _default_name(path: Path) -> str:
        return (path if path.is_dir() else path.parent).name

    def _overlays(self, config, out_dir, options) -> int:
        """First test slice of every echo: input, prediction overlay and ground truth."""
        model, _ = load_segmenter(options['checkpoint'], 'cpu')
        manifest = Manifest.load(options['data'] or Path(config['output']['dataset_dir']))
        store = SliceStore(manifest, config['dataprep']['percentile'])
        series = manifest.series('test')
        if not series:
            return 0
        (subject_id, slice_id), by_echo = next(iter(series.items()))
        for echo, record in sorted(by_echo.items()):
            image = store.image(record)
            prediction = predict_slice(model, image, model.spec.encoder.img_size)
            save_overlay(image, prediction, store.label(record), out_dir / f'overlay_echo{echo}.png',
                         title=f'{subject_id} slice {slice_id}, echo {echo}')
        return len(by_echo)
