import math
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from django.test import SimpleTestCase

from dataprep.datasets import DataprepOptions, SliceStore
from experiments.testing import make_tiny_dataset, tiny_run_config
from networks.checkpoints import load_checkpoint, load_mae
from networks.segmenter import NetworkSpec, build_mae
from phantom.io import Manifest

from .training import LOSS_COLUMNS, EchoPool, MaeConfig, cross_echo_similarity, pretrain, sample_echo_pair


class MaeConfigTests(SimpleTestCase):

    def test_defaults(self):
        config = MaeConfig()
        self.assertEqual((config.lr, config.weight_decay, config.beta1, config.beta2), (2e-4, 0.05, 0.9, 0.95))
        self.assertEqual((config.epochs, config.batch_size, config.mask_ratio, config.gamma_sc), (300, 4, 0.70, 0.4))

    def test_total_steps(self):
        self.assertEqual(MaeConfig(epochs=3, batch_size=4).total_steps(10), 9)
        self.assertEqual(MaeConfig(epochs=3, batch_size=4, max_steps=5).total_steps(10), 5)

    def test_unknown_schedule_rejected(self):
        with self.assertRaises(ValueError):
            MaeConfig(lr_schedule='step')

    def test_from_config_reads_seeds(self):
        config = MaeConfig.from_config(tiny_run_config())
        self.assertEqual((config.model_seed, config.data_seed, config.max_steps), (13, 12, 4))


class EchoPairTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.config = tiny_run_config()
        dataset = make_tiny_dataset(Path(cls.tmp.name) / 'data', cls.config)
        cls.store = SliceStore(Manifest.load(dataset))
        cls.options = DataprepOptions.from_section(cls.config['dataprep'])
        cls.pool = EchoPool(cls.store, cls.options, mask_ratio=0.7)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_pair_contract(self):
        first, second = sample_echo_pair(self.pool, np.random.default_rng(0))
        self.assertEqual((first.subject_id, first.slice_id), (second.subject_id, second.slice_id))
        self.assertNotEqual(first.echo, second.echo)
        self.assertEqual(first.views.location, second.views.location)
        self.assertEqual(first.local_plan.masked_indices, second.local_plan.masked_indices)
        self.assertEqual(first.global_plan.masked_indices, second.global_plan.masked_indices)

    def test_same_seed_same_pair(self):
        a = sample_echo_pair(self.pool, np.random.default_rng(3))
        b = sample_echo_pair(self.pool, np.random.default_rng(3))
        for x, y in zip(a, b):
            self.assertEqual(x.echo, y.echo)
            np.testing.assert_array_equal(x.local_masked, y.local_masked)
            np.testing.assert_array_equal(x.views.global_view, y.views.global_view)

    def test_every_pool_echo_is_drawn(self):
        rng = np.random.default_rng(1)
        seen = set()
        for _ in range(1000):
            seen.update(view.echo for view in sample_echo_pair(self.pool, rng))
        self.assertEqual(sorted(seen), self.pool.echoes)
        self.assertEqual(len(self.pool.echoes), 5)

    def test_single_echo_slices_rejected(self):
        with self.assertLogs('mae_trainer.training', level='WARNING'), self.assertRaises(ValueError):
            EchoPool(self.store, self.options, mask_ratio=0.7, split='validation')


class PretrainTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.config = tiny_run_config()
        cls.dataset = make_tiny_dataset(cls.root / 'data', cls.config)
        cls.events = []
        cls.final = pretrain(cls.config, cls.dataset, cls.root / 'full',
                             on_event=lambda kind, message, step: cls.events.append((kind, step)))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_outputs(self):
        out = self.root / 'full'
        self.assertEqual(self.final, out / 'mae_4.ckpt')
        self.assertTrue((out / 'mae_2.ckpt').exists())
        self.assertTrue((out / 'reconstruction.png').exists())
        log = pd.read_csv(out / 'loss_log.csv')
        self.assertEqual(list(log.columns), LOSS_COLUMNS)
        self.assertEqual(log['step'].tolist(), [1, 2, 3, 4])
        np.testing.assert_allclose(log['total'], log['mse'] + 0.4 * log['sc'], rtol=1e-5)
        self.assertEqual(self.events, [('CHECKPOINT', 2), ('CHECKPOINT', 4)])

    def test_checkpoint_records_run_state(self):
        payload = load_checkpoint(self.final, kind='mae')
        self.assertEqual(payload['step'], 4)
        self.assertEqual(len(payload['config_hash']), 64)
        self.assertIn('numpy', payload['rng'])
        self.assertEqual(len(payload['history']), 4)

    def test_one_step_changes_weights(self):
        config = tiny_run_config(mae={'max_steps': 1})
        spec = NetworkSpec.from_config(config)
        with tempfile.TemporaryDirectory() as tmp:
            model, _ = load_mae(pretrain(config, self.dataset, Path(tmp)), spec=spec)
        initial = build_mae(spec, seed=config['seeds']['model'])
        changed = [
            not torch.equal(value, initial.state_dict()[name]) for name, value in model.state_dict().items()
        ]
        self.assertTrue(any(changed))

    def test_resume_continues_the_run(self):
        with tempfile.TemporaryDirectory() as tmp:
            resumed = pretrain(self.config, self.dataset, Path(tmp), resume=self.root / 'full' / 'mae_2.ckpt')
            first, _ = load_mae(self.final)
            second, _ = load_mae(resumed)
            full_log = pd.read_csv(self.root / 'full' / 'loss_log.csv')
            resumed_log = pd.read_csv(Path(tmp) / 'loss_log.csv')
        pd.testing.assert_frame_equal(full_log, resumed_log, rtol=1e-6)
        for name, value in first.state_dict().items():
            torch.testing.assert_close(value, second.state_dict()[name], rtol=0, atol=1e-6)

    def test_cross_echo_similarity(self):
        model, _ = load_mae(self.final)
        similarity = cross_echo_similarity(model, self.dataset, 1, 6, view_size=64)
        self.assertTrue(math.isfinite(similarity))
        self.assertLessEqual(similarity, 1.0 + 1e-6)
        with self.assertRaises(ValueError):
            cross_echo_similarity(model, self.dataset, 1, 6, split='validation', view_size=64)


class OverfitTests(SimpleTestCase):

    def test_single_slice_loss_halves(self):
        config = tiny_run_config(
            phantom={'mae_subjects': 1},
            mae={'epochs': 200, 'max_steps': 200, 'batch_size': 2, 'augment': False,
                 'checkpoint_every': 1000, 'log_every': 50},
        )
        with tempfile.TemporaryDirectory() as tmp:
            dataset = make_tiny_dataset(Path(tmp) / 'data', config)
            pretrain(config, dataset, Path(tmp) / 'run')
            log = pd.read_csv(Path(tmp) / 'run' / 'loss_log.csv')
        self.assertEqual(len(log), 200)
        self.assertLess(log['total'].tail(10).mean(), 0.5 * log['total'].head(10).mean())


class SemanticConsistencyEffectTests(SimpleTestCase):

    def similarity_after_pretraining(self, root: Path, gamma_sc: float) -> float:
        config = tiny_run_config(
            mae={'gamma_sc': gamma_sc, 'epochs': 40, 'max_steps': 40, 'augment': False,
                 'checkpoint_every': 1000, 'log_every': 40},
        )
        dataset = make_tiny_dataset(root / 'data', config)
        model, _ = load_mae(pretrain(config, dataset, root / f'run_{gamma_sc}'))
        return cross_echo_similarity(model, dataset, 1, 6, view_size=64)

    def test_consistency_term_aligns_echoes(self):
        with tempfile.TemporaryDirectory() as tmp:
            with_sc = self.similarity_after_pretraining(Path(tmp) / 'a', 0.4)
            without_sc = self.similarity_after_pretraining(Path(tmp) / 'b', 0.0)
        self.assertGreater(with_sc, without_sc)
