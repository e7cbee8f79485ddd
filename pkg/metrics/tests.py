import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from experiments.testing import make_tiny_dataset, tiny_run_config
from networks.segmenter import NetworkSpec, build_segmenter

from .evaluation import evaluate_checkpoint, predict_slice
from .overlap import accuracy, dice, iou
from .report import TABLE_COLUMNS, MetricReport, SliceRecord, evaluate_slice
from .surface import brute_force_hausdorff, brute_force_nsd, hausdorff, nsd, surface_points


def square(top, left, side=3, shape=(10, 10)):
    mask = np.zeros(shape, dtype=np.uint8)
    mask[top:top + side, left:left + side] = 1
    return mask


def pixel(row, col, shape=(10, 10)):
    mask = np.zeros(shape, dtype=np.uint8)
    mask[row, col] = 1
    return mask


class OverlapTests(SimpleTestCase):

    def setUp(self):
        self.a = np.zeros((4, 4), dtype=np.uint8)
        self.b = np.zeros((4, 4), dtype=np.uint8)
        self.a[0, :4] = 1
        self.b[0, 2:4] = 1
        self.b[1, 0:2] = 1

    def test_hand_counted_pair(self):
        self.assertEqual(dice(self.a, self.b), 0.5)
        self.assertAlmostEqual(iou(self.a, self.b), 2 / 6)

    def test_identity_and_disjoint(self):
        self.assertEqual(dice(self.a, self.a), 1.0)
        self.assertEqual(iou(self.a, self.a), 1.0)
        disjoint = np.zeros_like(self.a)
        disjoint[3, :] = 1
        self.assertEqual(dice(self.a, disjoint), 0.0)
        self.assertEqual(iou(self.a, disjoint), 0.0)

    def test_empty_masks(self):
        empty = np.zeros((4, 4), dtype=np.uint8)
        self.assertEqual(dice(empty, empty), 1.0)
        self.assertEqual(iou(empty, empty), 1.0)
        self.assertEqual(dice(self.a, empty), 0.0)

    def test_accuracy(self):
        gt = square(0, 0, side=100, shape=(256, 256))
        pred = gt.copy()
        self.assertEqual(accuracy(pred, gt), 1.0)
        self.assertEqual(accuracy(1 - gt, gt), 0.0)
        pred[200, 200] = 1
        self.assertEqual(accuracy(pred, gt), 1 - 1 / 65536)

    def test_rejects_bad_inputs(self):
        with self.assertRaises(ValueError):
            dice(self.a * 2, self.b)
        with self.assertRaises(ValueError):
            iou(self.a, np.zeros((3, 3)))

    def test_iou_dice_identity_and_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = (rng.random((32, 32)) < 0.3).astype(np.uint8)
            b = (rng.random((32, 32)) < 0.3).astype(np.uint8)
            d = dice(a, b)
            self.assertAlmostEqual(iou(a, b), d / (2 - d), delta=1e-9)
            self.assertEqual(d, dice(b, a))
            self.assertEqual(iou(a, b), iou(b, a))


class SurfaceTests(SimpleTestCase):

    def test_single_pixel_is_its_own_surface(self):
        mask = pixel(4, 5)
        np.testing.assert_array_equal(surface_points(mask), mask.astype(bool))

    def test_filled_square_has_eight_border_pixels(self):
        surface = surface_points(square(3, 3))
        self.assertEqual(int(surface.sum()), 8)
        self.assertFalse(surface[4, 4])

    def test_full_image_gives_border_frame(self):
        surface = surface_points(np.ones((6, 6), dtype=np.uint8))
        frame = np.ones((6, 6), dtype=bool)
        frame[1:-1, 1:-1] = False
        np.testing.assert_array_equal(surface, frame)

    def test_empty_mask_has_no_surface(self):
        self.assertFalse(surface_points(np.zeros((5, 5))).any())

    def test_eight_connectivity_keeps_fewer_interior_pixels(self):
        plus = np.zeros((7, 7), dtype=np.uint8)
        plus[1:6, 3] = 1
        plus[3, 1:6] = 1
        self.assertFalse(surface_points(plus, connectivity=4)[3, 3])
        self.assertTrue(surface_points(plus, connectivity=8)[3, 3])
        with self.assertRaises(ValueError):
            surface_points(plus, connectivity=6)


class NsdTests(SimpleTestCase):

    def test_identical_masks(self):
        self.assertEqual(nsd(square(2, 2), square(2, 2)), 1.0)

    def test_one_pixel_shift_within_tolerance(self):
        self.assertEqual(nsd(square(2, 2), square(2, 3)), 1.0)

    def test_far_pixels(self):
        self.assertEqual(nsd(pixel(0, 0), pixel(0, 5)), 0.0)

    def test_empty_conventions(self):
        empty = np.zeros((10, 10), dtype=np.uint8)
        self.assertEqual(nsd(empty, empty), 1.0)
        self.assertEqual(nsd(square(2, 2), empty), 0.0)

    def test_negative_tolerance_rejected(self):
        with self.assertRaises(ValueError):
            nsd(square(2, 2), square(2, 2), tolerance_vox=-0.5)

    def test_growing_tolerance_never_decreases(self):
        a, b = square(1, 1, side=4), square(4, 5, side=3)
        scores = [nsd(a, b, tolerance) for tolerance in (0.0, 0.5, 1.0, 2.0, 4.0, 8.0)]
        self.assertEqual(scores, sorted(scores))
        self.assertEqual(scores[-1], 1.0)


class HausdorffTests(SimpleTestCase):

    def test_identical_masks(self):
        self.assertEqual(hausdorff(square(2, 2), square(2, 2)), 0.0)

    def test_three_four_five(self):
        self.assertEqual(hausdorff(pixel(0, 0), pixel(3, 4)), 5.0)

    def test_anisotropic_spacing(self):
        self.assertAlmostEqual(hausdorff(pixel(0, 0), pixel(3, 4), (2.0, 1.0)), math.sqrt(52), places=4)
        self.assertAlmostEqual(hausdorff(pixel(0, 0), pixel(3, 4), (2.0, 1.0)), 7.2111, places=4)

    def test_empty_conventions(self):
        empty = np.zeros((10, 10), dtype=np.uint8)
        self.assertEqual(hausdorff(empty, empty), 0.0)
        with self.assertLogs('metrics.surface', level='WARNING'):
            self.assertEqual(hausdorff(square(2, 2), empty), math.inf)

    def test_percentile_variant_is_bounded_by_max(self):
        a, b = square(0, 0, side=5), square(3, 4, side=2)
        self.assertLessEqual(hausdorff(a, b, percentile=95), hausdorff(a, b))

    def test_bad_spacing_rejected(self):
        with self.assertRaises(ValueError):
            hausdorff(pixel(0, 0), pixel(1, 1), (0.0, 1.0))


class OracleTests(SimpleTestCase):

    def test_random_pairs_match_brute_force(self):
        rng = np.random.default_rng(2024)
        spacings = [(1.0, 1.0), (2.0, 1.0), (1.37, 2.73)]
        for index in range(50):
            a = (rng.random((32, 32)) < rng.uniform(0.05, 0.5)).astype(np.uint8)
            b = (rng.random((32, 32)) < rng.uniform(0.05, 0.5)).astype(np.uint8)
            spacing = spacings[index % len(spacings)]
            if spacing == (1.37, 2.73):
                self.assertAlmostEqual(hausdorff(a, b, spacing), brute_force_hausdorff(a, b, spacing), delta=1e-9)
            else:
                self.assertEqual(hausdorff(a, b, spacing), brute_force_hausdorff(a, b, spacing))
            self.assertAlmostEqual(nsd(a, b), brute_force_nsd(a, b), delta=1e-9)
            self.assertEqual(hausdorff(a, b, spacing), hausdorff(b, a, spacing))
            self.assertEqual(nsd(a, b), nsd(b, a))

    def test_blobs_match_brute_force(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = square(*rng.integers(0, 20, size=2), side=int(rng.integers(1, 12)), shape=(32, 32))
            b = square(*rng.integers(0, 20, size=2), side=int(rng.integers(1, 12)), shape=(32, 32))
            self.assertEqual(hausdorff(a, b), brute_force_hausdorff(a, b))
            self.assertAlmostEqual(nsd(a, b, 2.0), brute_force_nsd(a, b, 2.0), delta=1e-9)


class MetricReportTests(SimpleTestCase):

    def report(self):
        report = MetricReport((1.0, 1.0))
        report.add('sub-001', 0, 2, evaluate_slice(square(2, 2), square(2, 2)))
        report.add('sub-001', 1, 2, evaluate_slice(square(2, 2), square(2, 3)))
        report.add('sub-002', 0, 2, evaluate_slice(np.zeros((10, 10), dtype=np.uint8), square(2, 2)))
        report.add('sub-001', 0, 6, evaluate_slice(square(2, 2), square(2, 2)), weights='teacher')
        return report

    def test_aggregates_skip_infinite_distances(self):
        aggregates = self.report().aggregates()
        student = aggregates[(aggregates['weights'] == 'student') & (aggregates['echo'] == 2)].iloc[0]
        self.assertEqual(student['slices'], 3)
        self.assertEqual(student['empty_surfaces'], 1)
        self.assertAlmostEqual(student['hd'], (0.0 + 1.0) / 2)
        self.assertAlmostEqual(student['dice'], (1.0 + 6 / 9 + 0.0) / 3)

    def test_table_layout(self):
        table = self.report().table()
        self.assertEqual(list(table.columns), TABLE_COLUMNS)
        self.assertEqual(sorted(table['Method']), ['student', 'teacher'])
        self.assertEqual(sorted(self.report().table('ours')['Method']), ['ours student', 'ours teacher'])
        teacher = table[table['Method'] == 'teacher'].iloc[0]
        self.assertEqual(teacher['Dice (%)'], 100.0)
        self.assertEqual(teacher['HD (mm)'], 0.0)

    def test_csv_reload(self):
        report = self.report()
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'metrics.csv'
            report.frame().to_csv(path, index=False)
            reloaded = MetricReport.from_csv(path)
        self.assertEqual(len(reloaded.records), 4)
        self.assertTrue(math.isinf(reloaded.records[2].hd))
        self.assertTrue(reloaded.records[2].empty_surface)
        self.assertEqual(reloaded.records[3].weights, 'teacher')

    def test_record_invariants(self):
        with self.assertRaises(ValueError):
            SliceRecord('sub-001', 0, 1, dice=0.4, iou=0.5, accuracy=1.0, nsd=1.0, hd=0.0)
        with self.assertRaises(ValueError):
            SliceRecord('sub-001', 0, 1, dice=1.2, iou=0.5, accuracy=1.0, nsd=1.0, hd=0.0)
        with self.assertRaises(ValueError):
            SliceRecord('sub-001', 0, 1, dice=1.0, iou=1.0, accuracy=1.0, nsd=1.0, hd=-1.0)

    def test_empty_report(self):
        self.assertTrue(MetricReport().aggregates().empty)
        self.assertEqual(list(MetricReport().table().columns), TABLE_COLUMNS)


class EvaluationTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.config = tiny_run_config()
        cls.dataset = make_tiny_dataset(Path(cls.tmp.name) / 'data', cls.config)
        cls.model = build_segmenter(NetworkSpec.from_config(cls.config), seed=0)

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_prediction_matches_slice_shape(self):
        image = np.random.default_rng(0).random((64, 80)).astype(np.float32)
        prediction = predict_slice(self.model, image, view_size=64)
        self.assertEqual(prediction.shape, (64, 80))
        self.assertTrue(set(np.unique(prediction)) <= {0, 1})

    def test_every_test_slice_and_echo_is_scored(self):
        report = evaluate_checkpoint(self.model, self.dataset, self.config['evaluation'], view_size=64)
        # two test subjects, one slice each, eight echoes
        self.assertEqual(len(report.records), 16)
        self.assertEqual(sorted(report.aggregates()['echo']), list(range(1, 9)))

    def test_echo_filter_and_weights_label(self):
        report = evaluate_checkpoint(self.model, self.dataset, self.config['evaluation'], weights='teacher',
                                     echoes=[2, 6], view_size=64)
        self.assertEqual({r.echo for r in report.records}, {2, 6})
        self.assertEqual({r.weights for r in report.records}, {'teacher'})
