import numpy as np
from django.test import SimpleTestCase

from .datasets import DataprepOptions, collate, prepare_views
from .masking import MaskPlan, apply_mask, plan_mask
from .transforms import LocationRecord, ViewPair, augment, extract_views, normalize


def ramp_slice(height=128, width=96, seed=0):
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.1, 1.0, size=(height, width))
    image[:8] = 0.0
    return image


def blob_label(height=128, width=96):
    label = np.zeros((height, width), dtype=np.uint8)
    label[40:90, 20:70] = 1
    return label


class NormalizeTests(SimpleTestCase):

    def test_constant_foreground_maps_to_one(self):
        image = np.zeros((32, 32))
        image[8:24, 8:24] = 7.5
        out = normalize(image)
        np.testing.assert_array_equal(out[8:24, 8:24], 1.0)
        self.assertEqual(out[0, 0], 0.0)

    def test_all_zero_image(self):
        np.testing.assert_array_equal(normalize(np.zeros((16, 16))), 0.0)

    def test_linear_percentile_of_ramp(self):
        image = np.zeros(1600)
        image[:1000] = np.arange(1, 1001)
        out = normalize(image.reshape(40, 40)).ravel()
        self.assertAlmostEqual(out[999], 1.0)
        self.assertAlmostEqual(out[499], 500 / 995.005, places=12)

    def test_idempotent_when_saturated(self):
        rng = np.random.default_rng(1)
        image = rng.uniform(0.5, 2.0, size=(64, 64))
        image[rng.random((64, 64)) < 0.05] = 10.0
        once = normalize(image)
        np.testing.assert_allclose(normalize(once), once, atol=1e-7)

    def test_explicit_background_mask(self):
        image = np.full((8, 8), 4.0)
        image[:4] = 100.0
        background = np.zeros((8, 8), dtype=bool)
        background[:4] = True
        out = normalize(image, background)
        np.testing.assert_array_equal(out[4:], 1.0)
        np.testing.assert_array_equal(out[:4], 1.0)

    def test_shape_mismatch_rejected(self):
        with self.assertRaises(ValueError):
            normalize(np.ones((8, 8)), np.zeros((4, 4), dtype=bool))


class ViewExtractionTests(SimpleTestCase):

    def test_full_crop_equals_global_view(self):
        pair = extract_views(ramp_slice(), blob_label(), crop_fraction=1.0, rng_seed=3)
        np.testing.assert_array_equal(pair.local, pair.global_view)
        np.testing.assert_array_equal(pair.labels[0], pair.labels[1])

    def test_crop_area_matches_fraction(self):
        pair = extract_views(ramp_slice(), crop_fraction=0.5, rng_seed=5)
        loc = pair.location
        self.assertLessEqual(abs(loc.height - 64), 1)
        self.assertLessEqual(abs(loc.width - 48), 1)
        self.assertAlmostEqual(loc.area_fraction, 0.25, delta=(loc.height + loc.width) / (128 * 96))

    def test_same_seed_same_rectangle(self):
        a = extract_views(ramp_slice(), rng_seed=9)
        b = extract_views(ramp_slice(), rng_seed=9)
        self.assertEqual(a.location, b.location)

    def test_views_are_resized_and_bounded(self):
        pair = extract_views(ramp_slice(), blob_label(), rng_seed=2)
        self.assertEqual(pair.local.shape, (256, 256))
        self.assertEqual(pair.global_view.shape, (256, 256))
        self.assertGreaterEqual(pair.local.min(), 0.0)
        self.assertLessEqual(pair.global_view.max(), 1.0)

    def test_nearest_resampling_keeps_binary_labels(self):
        pair = extract_views(ramp_slice(), blob_label(), rng_seed=4)
        for label in pair.labels:
            self.assertTrue(set(np.unique(label)) <= {0, 1})

    def test_rejects_bad_inputs(self):
        with self.assertRaises(ValueError):
            extract_views(ramp_slice(), crop_fraction=0.0)
        with self.assertRaises(ValueError):
            extract_views(ramp_slice(), crop_fraction=1.5)
        with self.assertRaises(ValueError):
            extract_views(np.ones((32, 128)))

    def test_location_outside_slice_rejected(self):
        with self.assertRaises(ValueError):
            LocationRecord(top=100, left=0, height=64, width=64, source_height=128, source_width=128)


class AugmentTests(SimpleTestCase):

    def setUp(self):
        self.pair = extract_views(ramp_slice(), blob_label(), rng_seed=1)

    def test_zero_probability_is_identity(self):
        out = augment(self.pair, 0.0, rng_seed=3)
        np.testing.assert_array_equal(out.local, self.pair.local)
        np.testing.assert_array_equal(out.global_view, self.pair.global_view)
        self.assertEqual(out.location, self.pair.location)

    def test_double_flip_restores_geometry(self):
        once = augment(self.pair, 1.0, rng_seed=3, operations=('hflip', 'vflip'))
        twice = augment(once, 1.0, rng_seed=3, operations=('hflip', 'vflip'))
        np.testing.assert_array_equal(twice.local, self.pair.local)
        np.testing.assert_array_equal(twice.labels[0], self.pair.labels[0])
        self.assertEqual(twice.location, self.pair.location)

    def test_labels_follow_flips(self):
        out = augment(self.pair, 1.0, rng_seed=8)
        np.testing.assert_array_equal(out.labels[0], self.pair.labels[0][::-1, ::-1])
        np.testing.assert_array_equal(out.labels[1], self.pair.labels[1][::-1, ::-1])

    def test_jitter_stays_in_unit_range_and_skips_labels(self):
        out = augment(self.pair, 1.0, rng_seed=8, operations=('jitter',))
        self.assertGreaterEqual(out.local.min(), 0.0)
        self.assertLessEqual(out.local.max(), 1.0)
        self.assertFalse(np.array_equal(out.local, self.pair.local))
        np.testing.assert_array_equal(out.labels[0], self.pair.labels[0])

    def test_flip_mirrors_location(self):
        out = augment(self.pair, 1.0, rng_seed=8, operations=('hflip',))
        loc, original = out.location, self.pair.location
        self.assertEqual(loc.left, original.source_width - original.right)
        self.assertEqual(loc.top, original.top)

    def test_deterministic_per_seed(self):
        a = augment(self.pair, 0.35, rng_seed=21)
        b = augment(self.pair, 0.35, rng_seed=21)
        np.testing.assert_array_equal(a.local, b.local)
        np.testing.assert_array_equal(a.global_view, b.global_view)

    def test_rejects_bad_probability(self):
        with self.assertRaises(ValueError):
            augment(self.pair, 1.5, rng_seed=0)


class MaskingTests(SimpleTestCase):

    def test_local_plan_count(self):
        plan = plan_mask('local', 0.70, rng_seed=123)
        self.assertEqual(plan.grid, (32, 32))
        self.assertEqual(len(plan.masked_indices), 716)

    def test_global_plan_count(self):
        plan = plan_mask('global', 0.70, rng_seed=123)
        self.assertEqual(plan.grid, (64, 64))
        self.assertEqual(len(plan.masked_indices), 2867)

    def test_zero_ratio_plan_is_empty(self):
        self.assertEqual(plan_mask('local', 0.0, rng_seed=1).masked_indices, ())

    def test_indices_sorted_unique_and_seeded(self):
        plan = plan_mask('global', 0.5, rng_seed=7)
        self.assertEqual(list(plan.masked_indices), sorted(set(plan.masked_indices)))
        self.assertEqual(plan, plan_mask('global', 0.5, rng_seed=7))

    def test_rejects_ratio_of_one(self):
        with self.assertRaises(ValueError):
            plan_mask('local', 1.0)

    def test_empty_plan_is_identity(self):
        view = np.random.default_rng(0).random((256, 256))
        masked, mask_map = apply_mask(view, plan_mask('local', 0.0))
        np.testing.assert_array_equal(masked, view)
        self.assertEqual(mask_map.sum(), 0)

    def test_full_plan_zeroes_everything(self):
        view = np.random.default_rng(0).random((256, 256))
        plan = MaskPlan(patch_size=4, masked_indices=tuple(range(4096)), grid=(64, 64), seed=0)
        masked, _ = apply_mask(view, plan)
        np.testing.assert_array_equal(masked, 0.0)

    def test_masked_pixel_count_is_exact(self):
        view = np.ones((256, 256))
        for kind in ('local', 'global'):
            plan = plan_mask(kind, 0.7, rng_seed=4)
            masked, mask_map = apply_mask(view, plan)
            self.assertEqual(int(mask_map.sum()), len(plan.masked_indices) * plan.patch_size ** 2)
            self.assertEqual(mask_map.mean(), len(plan.masked_indices) / plan.patch_count)
            np.testing.assert_array_equal(masked + view * mask_map, view)

    def test_grid_mismatch_rejected(self):
        with self.assertRaises(ValueError):
            apply_mask(np.ones((128, 128)), plan_mask('local', 0.5))


class PrepareViewsTests(SimpleTestCase):

    def test_same_seed_shares_geometry_across_echoes(self):
        options = DataprepOptions()
        a = prepare_views(ramp_slice(seed=1), None, options, seed=77, mask_ratio=0.7)
        b = prepare_views(ramp_slice(seed=2), None, options, seed=77, mask_ratio=0.7)
        self.assertEqual(a.views.location, b.views.location)
        self.assertEqual(a.local_plan, b.local_plan)
        self.assertEqual(a.global_plan, b.global_plan)

    def test_collate_shapes(self):
        options = DataprepOptions()
        samples = [prepare_views(ramp_slice(seed=s), blob_label(), options, seed=s, mask_ratio=0.7) for s in range(3)]
        batch = collate(samples)
        self.assertEqual(tuple(batch['local'].shape), (3, 1, 256, 256))
        self.assertEqual(tuple(batch['global_mask_map'].shape), (3, 1, 256, 256))
        self.assertEqual(tuple(batch['local_label'].shape), (3, 256, 256))
        self.assertEqual(len(batch['locations']), 3)
        self.assertIsInstance(samples[0].views, ViewPair)
