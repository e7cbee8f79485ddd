import copy
import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
import yaml
from django.core.management import call_command, load_command_class
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from losses.objectives import LossWeights
from metrics.report import TABLE_COLUMNS, MetricReport
from phantom.io import file_digest

from .config import ConfigError, env_overrides, load_run_config, seed_overrides
from .models import ExperimentRun, SliceMetric
from .runs import INCOMPLETE_MARKER
from .serializers import SliceMetricSerializer
from .testing import TINY_OVERRIDES, tiny_run_config


def write_config(root: Path, **sections) -> Path:
    config = copy.deepcopy(TINY_OVERRIDES)
    config['output'].update({'dataset_dir': str(root / 'data'), 'runs_dir': str(root / 'runs')})
    for name, values in sections.items():
        config.setdefault(name, {}).update(values)
    path = root / 'run.yaml'
    path.write_text(yaml.safe_dump(config))
    return path


def run(command, *args, **options):
    out = StringIO()
    call_command(command, *args, stdout=out, **options)
    return out.getvalue()


class RunConfigTests(SimpleTestCase):

    def test_defaults_are_valid(self):
        config = load_run_config(environ={})
        self.assertEqual(config['mpl']['ema_stages'], [[1000, 0.99], [2000, 0.999], [None, 0.9999]])
        self.assertEqual(config['loss']['beta'], 0.5)
        self.assertEqual(config['mae']['lr'], 2e-4)

    def test_published_recipes_are_the_defaults(self):
        config = load_run_config(environ={})
        mae = {k: config['mae'][k] for k in ('epochs', 'lr', 'weight_decay', 'beta1', 'beta2', 'batch_size',
                                              'mask_ratio', 'gamma_sc')}
        self.assertEqual(mae, {'epochs': 300, 'lr': 2e-4, 'weight_decay': 0.05, 'beta1': 0.9, 'beta2': 0.95,
                               'batch_size': 4, 'mask_ratio': 0.70, 'gamma_sc': 0.4})
        mpl = {k: config['mpl'][k] for k in ('epochs', 'warmup_epochs', 'patience', 'lr', 'weight_decay',
                                              'batch_size', 'mask_ratio')}
        self.assertEqual(mpl, {'epochs': 150, 'warmup_epochs': 50, 'patience': 75, 'lr': 1e-4,
                               'weight_decay': 0.01, 'batch_size': 1, 'mask_ratio': 0.70})

    def test_unknown_keys_rejected(self):
        with self.assertRaises(ConfigError):
            load_run_config(environ={}, overrides={'loss': {'alpha': 1.0}})
        with self.assertRaises(ConfigError):
            load_run_config(environ={}, overrides={'training': {'lr': 1.0}})

    def test_literal_cosine_flag(self):
        self.assertFalse(load_run_config(environ={})['loss']['paper_literal_cosine'])
        config = load_run_config(environ={}, overrides={'loss': {'paper_literal_cosine': True}})
        self.assertTrue(LossWeights.from_section(config['loss']).paper_literal_cosine)
        config = load_run_config(environ={'PLACENTA_LOSS__PAPER_LITERAL_COSINE': 'true'})
        self.assertTrue(config['loss']['paper_literal_cosine'])
        with self.assertRaises(ConfigError):
            load_run_config(environ={}, overrides={'loss': {'max_norm_cosine': True}})

    def test_range_checks(self):
        for overrides in (
            {'loss': {'beta': -0.1}},
            {'mae': {'mask_ratio': 1.0}},
            {'dataprep': {'augment_prob': 1.5}},
            {'phantom': {'te_ms': [3.0, 2.0]}},
            {'mpl': {'ema_stages': [[2000, 0.99], [1000, 0.999], [None, 0.9999]]}},
            {'mpl': {'warmup_epochs': 150}},
            {'mpl': {'target_echo': 9}},
        ):
            with self.assertRaises(ConfigError, msg=overrides):
                load_run_config(environ={}, overrides=overrides)

    def test_precedence(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.yaml'
            path.write_text(yaml.safe_dump({'loss': {'beta': 0.7, 'gamma_glc': 2.0}, 'seeds': {'model': 4}}))
            config = load_run_config(path, environ={'PLACENTA_LOSS__BETA': '0.6'},
                                     overrides=seed_overrides(10))
        self.assertEqual(config['loss']['beta'], 0.6)
        self.assertEqual(config['loss']['gamma_glc'], 2.0)
        self.assertEqual(config['seeds'], {'phantom': 10, 'data': 11, 'model': 12})

    def test_env_overrides_parse_yaml_literals(self):
        overrides = env_overrides({
            'PLACENTA_MPL__EMA_STAGES': '[[10, 0.9], [null, 0.99]]',
            'PLACENTA_OUTPUT__DEVICE': 'cpu',
            'PLACENTA_SECRET_KEY': 'ignored',
            'HOME': '/root',
        })
        self.assertEqual(overrides, {'mpl': {'ema_stages': [[10, 0.9], [None, 0.99]]}, 'output': {'device': 'cpu'}})

    def test_missing_or_malformed_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                load_run_config(Path(tmp) / 'absent.yaml', environ={})
            path = Path(tmp) / 'list.yaml'
            path.write_text('- 1\n- 2\n')
            with self.assertRaises(ConfigError):
                load_run_config(path, environ={})


class CommandContractTests(TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = write_config(self.root)

    def tearDown(self):
        self.tmp.cleanup()

    def test_phantom_writes_a_self_describing_dataset(self):
        output = run('phantom', config=self.config)
        data = self.root / 'data'
        manifest = json.loads((data / 'manifest.json').read_text())
        self.assertIn('Wrote', output)
        self.assertEqual(len(list((data / 'images').iterdir())), len(manifest['records']))
        self.assertEqual(len({r['subject_id'] for r in manifest['records']}), 8)
        self.assertTrue((data / 'resolved_config.yaml').exists())
        info = json.loads((data / 'run_info.json').read_text())
        self.assertEqual(info['command'], 'phantom')
        self.assertFalse((data / INCOMPLETE_MARKER).exists())

        run_record = ExperimentRun.objects.get()
        self.assertEqual(run_record.status, 'COMPLETED')
        self.assertEqual(list(run_record.events.values_list('kind', flat=True)), ['START', 'COMPLETE'])

    def test_phantom_rerun_is_identical(self):
        first, second = self.root / 'first', self.root / 'second'
        run('phantom', config=self.config, seed=3, out=first)
        run('phantom', config=self.config, seed=3, out=second)
        self.assertEqual(file_digest(first / 'manifest.json'), file_digest(second / 'manifest.json'))
        self.assertEqual((first / 'resolved_config.yaml').read_text(), (second / 'resolved_config.yaml').read_text())
        self.assertEqual(ExperimentRun.objects.filter(seed=3).count(), 2)

    def test_invalid_config_is_a_usage_error(self):
        bad = write_config(self.root, loss={'unknown_weight': 1.0})
        with self.assertRaises(CommandError) as caught:
            run('phantom', config=bad)
        self.assertEqual(caught.exception.returncode, 1)
        self.assertFalse(ExperimentRun.objects.exists())

    def test_missing_inputs_are_usage_errors(self):
        with self.assertRaises(CommandError) as caught:
            run('pretrain', config=self.config, data=self.root / 'absent')
        self.assertEqual(caught.exception.returncode, 1)
        with self.assertRaises(CommandError) as caught:
            run('adapt', config=self.config)
        self.assertEqual(caught.exception.returncode, 1)
        with self.assertRaises(CommandError) as caught:
            run('evaluate', config=self.config, checkpoint=self.root / 'absent.ckpt')
        self.assertEqual(caught.exception.returncode, 1)

    def test_argument_errors_are_usage_errors(self):
        with self.assertRaises(CommandError) as caught:
            run('evaluate', config=self.config)
        self.assertEqual(caught.exception.returncode, 1)
        with self.assertRaises(CommandError) as caught:
            run('phantom', '--bogus-flag', config=self.config)
        self.assertEqual(caught.exception.returncode, 1)
        self.assertFalse(ExperimentRun.objects.exists())

    def test_argument_errors_exit_with_one_from_the_shell(self):
        for argv in (['manage.py', 'phantom', '--bogus-flag'], ['manage.py', 'evaluate', '--out', str(self.root)]):
            command = load_command_class('experiments', argv[1])
            with mock.patch('sys.stderr', new_callable=StringIO) as stderr, self.assertRaises(SystemExit) as caught:
                command.run_from_argv(argv)
            self.assertEqual(caught.exception.code, 1, argv)
            self.assertIn('error:', stderr.getvalue())

    def test_runtime_failure_leaves_marker(self):
        run('phantom', config=self.config)
        bad = write_config(self.root, mpl={'target_echo': 3})
        out = self.root / 'failed'
        with self.assertRaises(CommandError) as caught:
            run('adapt', config=bad, source_only=True, out=out)
        self.assertEqual(caught.exception.returncode, 2)
        self.assertTrue((out / INCOMPLETE_MARKER).exists())
        failed = ExperimentRun.objects.get(command='adapt')
        self.assertEqual(failed.status, 'FAILED')
        self.assertTrue(failed.events.filter(kind='FAILURE').exists())


class PipelineTests(TestCase):
    """phantom -> pretrain -> adapt (and the source-only baseline) -> evaluate -> report."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.config = write_config(cls.root, mpl={'epochs': 2, 'warmup_epochs': 1})
        runs = cls.root / 'runs'
        run('phantom', config=cls.config)
        run('pretrain', config=cls.config, out=runs / 'pretrain')
        run('adapt', config=cls.config, mae=runs / 'pretrain' / 'mae_4.ckpt', out=runs / 'adapt')
        run('adapt', config=cls.config, source_only=True, out=runs / 'baseline')
        cls.evaluate_output = run('evaluate', config=cls.config, checkpoint=runs / 'adapt' / 'mpl_best.ckpt',
                                  baseline=runs / 'baseline' / 'mpl_best.ckpt', out=runs / 'evaluate')
        run('report', runs / 'evaluate', config=cls.config, names=['phantom'],
            logs=[runs / 'pretrain' / 'loss_log.csv', runs / 'adapt' / 'loss_log.csv'],
            checkpoint=runs / 'adapt' / 'mpl_best.ckpt', out=runs / 'report')
        cls.runs = runs

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_every_run_completed_cleanly(self):
        commands = list(ExperimentRun.objects.order_by('id').values_list('command', 'status'))
        self.assertEqual([c for c, _ in commands], ['phantom', 'pretrain', 'adapt', 'adapt', 'evaluate', 'report'])
        self.assertTrue(all(status == 'COMPLETED' for _, status in commands))
        for name in ('pretrain', 'adapt', 'baseline', 'evaluate', 'report'):
            self.assertFalse((self.runs / name / INCOMPLETE_MARKER).exists(), name)
            self.assertTrue((self.runs / name / 'resolved_config.yaml').exists(), name)
        pretrain = ExperimentRun.objects.get(command='pretrain')
        self.assertEqual(pretrain.events.filter(kind='CHECKPOINT').count(), 2)

    def test_run_info_records_input_digests(self):
        info = json.loads((self.runs / 'evaluate' / 'run_info.json').read_text())
        self.assertEqual(set(info['inputs']), {'dataset', 'checkpoint', 'baseline'})
        self.assertEqual(info['inputs']['checkpoint']['sha256'],
                         file_digest(self.runs / 'adapt' / 'mpl_best.ckpt'))

    def test_metrics_csv_contract(self):
        metrics = pd.read_csv(self.runs / 'evaluate' / 'metrics.csv')
        self.assertEqual(list(metrics.columns), SliceMetricSerializer.Meta.fields)
        # two test subjects x one slice x eight echoes, for three weight sets
        self.assertEqual(len(metrics), 48)
        self.assertEqual(sorted(metrics['weights'].unique()), ['baseline', 'student', 'teacher'])
        self.assertEqual(SliceMetric.objects.count(), 48)
        self.assertIn('Dice (%)', self.evaluate_output)

    def test_evaluate_rerun_is_identical(self):
        out = self.root / 'evaluate-again'
        run('evaluate', config=self.config, checkpoint=self.runs / 'adapt' / 'mpl_best.ckpt',
            baseline=self.runs / 'baseline' / 'mpl_best.ckpt', out=out)
        self.assertEqual(file_digest(out / 'metrics.csv'), file_digest(self.runs / 'evaluate' / 'metrics.csv'))

    def test_report_reproduces_aggregates(self):
        comparison = pd.read_csv(self.runs / 'report' / 'comparison_table.csv')
        self.assertEqual(list(comparison.columns), TABLE_COLUMNS)
        metrics = pd.read_csv(self.runs / 'evaluate' / 'metrics.csv')
        for (weights, echo), group in metrics.groupby(['weights', 'echo']):
            row = comparison[(comparison['Method'] == f'phantom {weights}') & (comparison['Echo'] == echo)].iloc[0]
            self.assertAlmostEqual(row['Dice (%)'], group['dice'].mean() * 100, delta=1e-9)
            self.assertAlmostEqual(row['NSD (%)'], group['nsd'].mean() * 100, delta=1e-9)
        reloaded = MetricReport.from_csv(self.runs / 'evaluate' / 'metrics.csv').aggregates()
        self.assertEqual(len(reloaded), len(comparison))

    def test_report_figures(self):
        report = self.runs / 'report'
        self.assertTrue((report / 'loss_pretrain.png').exists())
        self.assertTrue((report / 'loss_adapt.png').exists())
        self.assertEqual(len(list(report.glob('overlay_echo*.png'))), 8)

    def test_adapt_outputs(self):
        adapt = self.runs / 'adapt'
        log = pd.read_csv(adapt / 'loss_log.csv')
        self.assertEqual(list(log.columns), ['step', 'mpl', 'glc', 'sc', 'fss', 'total', 'alpha'])
        self.assertTrue(np.isfinite(log['total']).all())
        self.assertTrue((adapt / 'panel_epoch000.png').exists())
        self.assertEqual(tiny_run_config()['mpl']['target_echo'], 6)
