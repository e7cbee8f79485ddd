import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase

from dataprep.transforms import LocationRecord
from experiments.testing import make_tiny_dataset, tiny_run_config
from losses.objectives import LossWeights
from networks.checkpoints import load_segmenter, save_checkpoint
from networks.decoders import ReconDecoderSpec, SegDecoderSpec
from networks.encoder import EncoderSpec
from networks.segmenter import NetworkSpec, build_mae, build_segmenter

from .ema import EmaSchedule, TrainState, ema_update, make_teacher
from .training import (
    LOSS_COLUMNS, EarlyStopping, MplConfig, adapt, adaptation_losses, init_from_mae, pseudo_label,
    train_source_only,
)


def small_spec(img_size=64):
    return NetworkSpec(
        encoder=EncoderSpec(depth=1, embed_dim=32, num_heads=2, patch_size=16, img_size=img_size),
        reconstruction=ReconDecoderSpec(decoder_dim=16, decoder_depth=1, num_heads=2),
        segmentation=SegDecoderSpec(aspp_channels=16, aspp_dilations=(1, 2, 3)),
    )


def toy_state(teacher_value, student_value, size=1, dtype=torch.float32):
    student = nn.Linear(size, 1, bias=False).to(dtype)
    teacher = make_teacher(student)
    with torch.no_grad():
        student.weight.copy_(torch.as_tensor(student_value, dtype=dtype))
        teacher.weight.copy_(torch.as_tensor(teacher_value, dtype=dtype))
    return TrainState(student=student, teacher=teacher)


def synthetic_batch(seed, size=64, labeled=True):
    generator = torch.Generator().manual_seed(seed)
    local = torch.rand(1, 1, size, size, generator=generator)
    global_view = torch.rand(1, 1, size, size, generator=generator)
    batch = {
        'local': local,
        'global': global_view,
        'local_masked': local.clone(),
        'global_masked': global_view.clone(),
        'locations': [LocationRecord(0, 0, size // 2, size // 2, size, size)],
    }
    if labeled:
        batch['local_label'] = (local[:, 0] > 0.5).long()
        batch['global_label'] = (global_view[:, 0] > 0.5).long()
    return batch


class EmaScheduleTests(SimpleTestCase):

    def test_stage_switches(self):
        schedule = EmaSchedule()
        self.assertEqual(schedule.alpha_at(0), 0.99)
        self.assertEqual(schedule.alpha_at(999), 0.99)
        self.assertEqual(schedule.alpha_at(1000), 0.999)
        self.assertEqual(schedule.alpha_at(1500), 0.999)
        self.assertEqual(schedule.alpha_at(1999), 0.999)
        self.assertEqual(schedule.alpha_at(2000), 0.9999)
        self.assertEqual(schedule.alpha_at(10 ** 7), 0.9999)

    def test_config_lists_match_defaults(self):
        self.assertEqual(EmaSchedule.from_config([[1000, 0.99], [2000, 0.999], [None, 0.9999]]), EmaSchedule())

    def test_invalid_stages_rejected(self):
        for stages in (
            ((None, 0.99), (1000, 0.999)),
            ((2000, 0.99), (1000, 0.999), (None, 0.9999)),
            ((1000, 0.999), (None, 0.99)),
            ((None, 1.0),),
            (),
        ):
            with self.assertRaises(ValueError):
                EmaSchedule(stages)


class EmaUpdateTests(SimpleTestCase):

    def test_scalar_parameter(self):
        state = toy_state(1.0, 0.5)
        ema_update(state, EmaSchedule())
        self.assertAlmostEqual(state.teacher.weight.item(), 0.995, places=6)
        self.assertEqual(state.step, 0)
        self.assertEqual(state.last_alpha, 0.99)

    def test_geometric_decay_towards_fixed_student(self):
        for alpha in (0.99, 0.999, 0.9999):
            start = torch.linspace(-1.0, 2.0, 4, dtype=torch.float64)[None]
            target = torch.full((1, 4), 0.25, dtype=torch.float64)
            state = toy_state(start, target, size=4, dtype=torch.float64)
            schedule = EmaSchedule(((None, alpha),))
            for _ in range(100):
                ema_update(state, schedule)
            distance = torch.linalg.norm(state.teacher.weight - target).item()
            expected = alpha ** 100 * torch.linalg.norm(start - target).item()
            self.assertAlmostEqual(distance / expected, 1.0, delta=1e-6)

    def test_step_bound_and_history_envelope(self):
        torch.manual_seed(0)
        state = toy_state(torch.zeros(1, 6), torch.zeros(1, 6), size=6)
        schedule = EmaSchedule()
        low, high = state.teacher.weight.clone(), state.teacher.weight.clone()
        for _ in range(50):
            with torch.no_grad():
                state.student.weight.copy_(torch.randn(1, 6))
            low = torch.minimum(low, state.student.weight.detach())
            high = torch.maximum(high, state.student.weight.detach())
            before = state.teacher.weight.clone()
            gap = torch.linalg.norm(before - state.student.weight.detach())
            ema_update(state, schedule)
            state.step += 1
            change = torch.linalg.norm(state.teacher.weight - before)
            self.assertLessEqual(change.item(), (1 - 0.99) * gap.item() + 1e-6)
            self.assertTrue(torch.all(state.teacher.weight >= low - 1e-6))
            self.assertTrue(torch.all(state.teacher.weight <= high + 1e-6))


class InitFromMaeTests(SimpleTestCase):

    def setUp(self):
        self.spec = small_spec()
        self.mae = build_mae(self.spec, seed=5)

    def test_teacher_equals_student(self):
        state = init_from_mae(self.mae, self.spec, seed=3)
        teacher = state.teacher.state_dict()
        for name, value in state.student.state_dict().items():
            self.assertTrue(torch.equal(value, teacher[name]), name)
        self.assertFalse(any(p.requires_grad for p in state.teacher.parameters()))

    def test_teacher_is_outside_the_optimizer(self):
        state = init_from_mae(self.mae, self.spec, seed=3)
        optimized = {id(p) for group in state.optimizer.param_groups for p in group['params']}
        self.assertFalse(optimized & {id(p) for p in state.teacher.parameters()})

    def test_kept_reconstruction_decoder_is_frozen(self):
        state = init_from_mae(self.mae, self.spec, seed=3, keep_reconstruction=True)
        decoder = list(state.student.reconstruction.parameters())
        self.assertTrue(decoder)
        self.assertFalse(any(p.requires_grad for p in decoder))
        optimized = {id(p) for group in state.optimizer.param_groups for p in group['params']}
        self.assertFalse(optimized & {id(p) for p in decoder})
        self.assertTrue(optimized >= {id(p) for p in state.student.encoder.parameters()})

    def test_encoder_restored_bit_exactly_from_checkpoint(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / 'mae.ckpt', 'mae',
                                   {'network_spec': self.spec.to_dict(), 'model': self.mae.state_dict()})
            state = init_from_mae(path, self.spec, seed=3)
        restored = state.student.encoder.state_dict()
        for name, value in self.mae.encoder.state_dict().items():
            self.assertTrue(torch.equal(value, restored[name]), name)

    def test_head_differs_across_seeds(self):
        first = init_from_mae(self.mae, self.spec, seed=3).student
        second = init_from_mae(self.mae, self.spec, seed=4).student
        self.assertFalse(torch.equal(first.head.classifier.weight, second.head.classifier.weight))
        self.assertTrue(torch.equal(first.encoder.patch_embed.proj.weight, second.encoder.patch_embed.proj.weight))

    def test_spec_mismatch_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(Path(tmp) / 'mae.ckpt', 'mae',
                                   {'network_spec': self.spec.to_dict(), 'model': self.mae.state_dict()})
            with self.assertRaises(ImproperlyConfigured):
                init_from_mae(path, small_spec(img_size=128), seed=3)


class PseudoLabelTests(SimpleTestCase):

    def setUp(self):
        self.teacher = make_teacher(build_segmenter(small_spec(), seed=0))
        self.batch = synthetic_batch(1)

    def label(self):
        return pseudo_label(self.teacher, self.batch['local'], self.batch['global'], self.batch['locations'])

    def test_binary_deterministic_and_detached(self):
        first, second = self.label(), self.label()
        self.assertTrue(torch.equal(first, second))
        self.assertEqual(tuple(first.shape), (1, 64, 64))
        self.assertTrue(set(first.unique().tolist()) <= {0, 1})
        self.assertFalse(first.requires_grad)

    def test_matches_softmax_argmax(self):
        with torch.no_grad():
            logits = self.teacher.segment(self.batch['local'], self.batch['global'], self.batch['locations'])
        self.assertTrue(torch.equal(self.label(), torch.softmax(logits, dim=1).argmax(dim=1)))

    def test_saturated_foreground(self):
        with torch.no_grad():
            self.teacher.head.classifier.weight.zero_()
            self.teacher.head.classifier.bias.copy_(torch.tensor([-50.0, 50.0]))
        self.assertTrue(torch.all(self.label() == 1))


class AdaptationLossTests(SimpleTestCase):

    def setUp(self):
        self.spec = small_spec()
        self.state = init_from_mae(build_mae(self.spec, seed=5), self.spec, seed=3)
        self.config = MplConfig()

    def target_gradient(self, warmup, weights):
        source = synthetic_batch(1)
        target = synthetic_batch(2, labeled=False)
        for key in ('local_masked', 'global_masked'):
            target[key].requires_grad_(True)
        losses = adaptation_losses(self.state, source, target, weights, self.config, warmup)
        losses['total'].backward()
        return [target[key].grad for key in ('local_masked', 'global_masked')]

    def test_warmup_trains_on_source_only(self):
        for grad in self.target_gradient(True, LossWeights()):
            self.assertTrue(grad is None or torch.count_nonzero(grad).item() == 0)

    def test_warmup_zeroes_target_terms(self):
        losses = adaptation_losses(self.state, synthetic_batch(1), synthetic_batch(2, labeled=False),
                                   LossWeights(), self.config, warmup=True)
        self.assertEqual(losses['sc'].item(), 0.0)
        torch.testing.assert_close(losses['mpl'], 0.5 * losses['fss'])

    def test_after_warmup_target_receives_gradient(self):
        local_grad, global_grad = self.target_gradient(False, LossWeights())
        self.assertGreater(torch.count_nonzero(local_grad).item(), 0)
        self.assertGreater(torch.count_nonzero(global_grad).item(), 0)

    def test_terms_are_finite(self):
        losses = adaptation_losses(self.state, synthetic_batch(1), synthetic_batch(2, labeled=False),
                                   LossWeights(), self.config, warmup=False)
        self.assertEqual(set(losses), {'mpl', 'glc', 'sc', 'fss', 'total'})
        for value in losses.values():
            self.assertTrue(torch.isfinite(value))

    def test_reconstruction_features_need_the_decoder(self):
        config = MplConfig(sc_decoder_source='reconstruction')
        with self.assertRaises(ValueError):
            adaptation_losses(self.state, synthetic_batch(1), synthetic_batch(2, labeled=False),
                              LossWeights(), config, warmup=False)


class EarlyStoppingTests(SimpleTestCase):

    def test_patience_counter(self):
        state = TrainState(student=nn.Linear(1, 1), teacher=nn.Linear(1, 1))
        stopper = EarlyStopping(state, patience=2)
        self.assertTrue(stopper.update(0.5))
        self.assertFalse(stopper.update(0.4))
        self.assertFalse(stopper.should_stop)
        self.assertTrue(stopper.update(0.6))
        self.assertFalse(stopper.update(0.6))
        self.assertFalse(stopper.update(0.1))
        self.assertTrue(stopper.should_stop)
        self.assertEqual(state.best_dice, 0.6)


class AdaptRunTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        root = Path(cls.tmp.name)
        cls.config = tiny_run_config()
        cls.dataset = make_tiny_dataset(root / 'data', cls.config)
        spec = NetworkSpec.from_config(cls.config)
        cls.mae_path = save_checkpoint(root / 'mae.ckpt', 'mae', {
            'network_spec': spec.to_dict(),
            'model': build_mae(spec, seed=cls.config['seeds']['model']).state_dict(),
        })
        cls.out = root / 'adapt'
        cls.result = adapt(cls.config, cls.mae_path, cls.dataset, cls.out)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_outputs(self):
        log = pd.read_csv(self.out / 'loss_log.csv')
        self.assertEqual(list(log.columns), LOSS_COLUMNS)
        self.assertEqual(log['step'].tolist(), list(range(1, self.result.steps + 1)))
        self.assertTrue(np.all(log['alpha'] == 0.99))
        self.assertTrue(np.isfinite(log[['mpl', 'glc', 'sc', 'fss', 'total']].to_numpy()).all())
        self.assertTrue(self.result.checkpoint.exists())
        self.assertTrue((self.out / 'panel_epoch000.png').exists())
        self.assertEqual(self.result.epochs_run, 3)
        self.assertGreaterEqual(self.result.best_dice, 0.0)

    def test_best_checkpoint_holds_both_weight_sets(self):
        student, payload = load_segmenter(self.result.checkpoint, weights='student')
        teacher, _ = load_segmenter(self.result.checkpoint, weights='teacher')
        self.assertAlmostEqual(payload['best_dice'], self.result.best_dice)
        self.assertTrue(any(
            not torch.equal(a, b) for a, b in zip(student.state_dict().values(), teacher.state_dict().values())
        ))

    def test_run_is_reproducible(self):
        with tempfile.TemporaryDirectory() as tmp:
            adapt(self.config, self.mae_path, self.dataset, Path(tmp))
            first = pd.read_csv(self.out / 'loss_log.csv')
            second = pd.read_csv(Path(tmp) / 'loss_log.csv')
        pd.testing.assert_frame_equal(first, second, rtol=1e-6)

    def test_source_only_baseline_skips_target_terms(self):
        with tempfile.TemporaryDirectory() as tmp:
            result = train_source_only(self.config, self.dataset, Path(tmp), self.mae_path)
            log = pd.read_csv(Path(tmp) / 'loss_log.csv')
        self.assertTrue(np.all(log[['mpl', 'glc', 'sc']].to_numpy() == 0))
        self.assertTrue(np.allclose(log['fss'], log['total']))
        self.assertTrue(result.checkpoint.name.endswith('.ckpt'))

    def test_early_stop_before_epoch_cap(self):
        config = tiny_run_config(mpl={'epochs': 6, 'warmup_epochs': 1, 'patience': 2})
        events = []
        with tempfile.TemporaryDirectory() as tmp, mock.patch('mpl_trainer.training.validation_dice',
                                                              return_value=0.5):
            result = adapt(config, self.mae_path, self.dataset, Path(tmp),
                           on_event=lambda kind, message, step: events.append(kind))
        self.assertTrue(result.stopped_early)
        self.assertEqual(result.epochs_run, 3)
        self.assertEqual(events, ['CHECKPOINT', 'EARLY_STOP'])

    def test_missing_target_echo_rejected(self):
        config = tiny_run_config(mpl={'target_echo': 3})
        with tempfile.TemporaryDirectory() as tmp, self.assertRaises(ValueError):
            adapt(config, self.mae_path, self.dataset, Path(tmp))
