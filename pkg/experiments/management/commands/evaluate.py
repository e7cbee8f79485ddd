from dataclasses import asdict
from pathlib import Path

import pandas as pd

from experiments.config import resolve_device
from experiments.models import SliceMetric
from experiments.runs import RunCommand
from experiments.serializers import SliceMetricSerializer
from metrics.evaluation import evaluate_checkpoint
from networks.checkpoints import load_segmenter

METRICS_CSV = 'metrics.csv'
TABLE_CSV = 'metrics_table.csv'


class Command(RunCommand):
    help = 'Score student and teacher weights (and an optional baseline) on the test split'
    run_name = 'evaluate'

    def add_run_arguments(self, parser):
        parser.add_argument('--data', type=Path, help='dataset directory (default: output.dataset_dir)')
        parser.add_argument('--checkpoint', type=Path, required=True, help='mpl_best.ckpt from adapt')
        parser.add_argument('--baseline', type=Path, help='checkpoint of a source-only run')

    def inputs(self, config, options):
        return {
            'dataset': options['data'] or Path(config['output']['dataset_dir']),
            'checkpoint': options['checkpoint'],
            'baseline': options['baseline'],
        }

    def run(self, config, out_dir, options):
        dataset = options['data'] or Path(config['output']['dataset_dir'])
        device = resolve_device(config['output']['device'])
        evaluation = config['evaluation']
        weight_sets = [('student', options['checkpoint'], 'student'), ('teacher', options['checkpoint'], 'teacher')]
        if options['baseline']:
            weight_sets.append(('baseline', options['baseline'], 'student'))

        report = None
        for label, path, weights in weight_sets:
            model, _ = load_segmenter(path, device, weights=weights)
            report = evaluate_checkpoint(
                model, dataset, evaluation, weights=label, echoes=evaluation['echoes'],
                percentile=config['dataprep']['percentile'], view_size=model.spec.encoder.img_size,
                report=report,
            )

        rows = SliceMetric.objects.bulk_create(
            [SliceMetric(run=self.record, **asdict(record)) for record in report.records]
        )
        metrics = pd.DataFrame(SliceMetricSerializer(rows, many=True).data,
                               columns=SliceMetricSerializer.Meta.fields)
        metrics.to_csv(out_dir / METRICS_CSV, index=False)
        table = report.table()
        table.to_csv(out_dir / TABLE_CSV, index=False)
        self.stdout.write(table.to_string(index=False, float_format=lambda v: f'{v:.2f}'))
        return f"Scored {len(rows)} slice records; metrics in {out_dir / METRICS_CSV}"
