import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase
from scipy import ndimage

from .dataset import PhantomConfig, assign_splits, make_dataset
from .io import Manifest, ManifestRecord, check_split_hygiene, read_mask_png, read_raster, write_mask_png, write_raster
from .simulation import default_te_list, fit_t2star, make_series, simulate_echo
from .tissue import PLACENTA, TissueMap, make_tissue_map


def uniform_tissue(s0=100.0, t2star=50.0, size=64):
    return TissueMap(
        label_grid=np.full((size, size), PLACENTA, dtype=np.uint8),
        s0_grid=np.full((size, size), s0),
        t2star_grid=np.full((size, size), t2star),
        seed=0,
    )


def small_config(**overrides):
    options = dict(subjects=8, slices_per_subject=2, height=64, width=64,
                   test_subjects=2, mae_subjects=2, seed=11)
    options.update(overrides)
    return PhantomConfig(**options)


class TissueMapTests(SimpleTestCase):

    def test_same_seed_is_bit_identical(self):
        a = make_tissue_map(7, 256, 256)
        b = make_tissue_map(7, 256, 256)
        np.testing.assert_array_equal(a.label_grid, b.label_grid)
        np.testing.assert_array_equal(a.s0_grid, b.s0_grid)
        np.testing.assert_array_equal(a.t2star_grid, b.t2star_grid)

    def test_seed_changes_labels(self):
        a = make_tissue_map(7, 256, 256)
        b = make_tissue_map(8, 256, 256)
        self.assertFalse(np.array_equal(a.label_grid, b.label_grid))

    def test_placenta_is_one_component_in_fraction_band(self):
        for seed in range(20):
            tissue = make_tissue_map(seed, 96, 128)
            self.assertGreaterEqual(tissue.placenta_fraction, 0.05)
            self.assertLessEqual(tissue.placenta_fraction, 0.30)
            _, components = ndimage.label(tissue.placenta_mask)
            self.assertEqual(components, 1)

    def test_elongated_grids(self):
        for height, width in ((64, 1024), (1024, 64)):
            for seed in range(20):
                tissue = make_tissue_map(seed, height, width)
                self.assertEqual(tissue.shape, (height, width))
                self.assertGreaterEqual(tissue.placenta_fraction, 0.05, (height, width, seed))
                self.assertLessEqual(tissue.placenta_fraction, 0.30, (height, width, seed))

    def test_square_and_stretched_grids_cover_the_same_fraction(self):
        square = make_tissue_map(4, 256, 256).placenta_fraction
        stretched = make_tissue_map(4, 128, 512).placenta_fraction
        self.assertAlmostEqual(square, stretched, delta=0.01)

    def test_background_has_zero_amplitude(self):
        tissue = make_tissue_map(3, 128, 128)
        np.testing.assert_array_equal(tissue.s0_grid == 0, tissue.label_grid == 0)
        self.assertTrue(np.all(tissue.t2star_grid[tissue.label_grid > 0] > 0))

    def test_placenta_t2star_contrasts_with_neighbours(self):
        tissue = make_tissue_map(5, 128, 128)
        placenta = tissue.t2star_grid[tissue.label_grid == 2]
        for label in (1, 3):
            other = tissue.t2star_grid[tissue.label_grid == label]
            separated = placenta.max() * 1.3 <= other.min() or other.max() * 1.3 <= placenta.min()
            self.assertTrue(separated, f"class {label} too close to placenta")

    def test_rejects_small_grids(self):
        with self.assertRaises(ValueError):
            make_tissue_map(1, 32, 256)


class SimulationTests(SimpleTestCase):

    def test_first_echo_signal(self):
        image = simulate_echo(uniform_tissue(), 3.15, 0.0, seed=0)
        self.assertAlmostEqual(float(image[0, 0]), 93.90, delta=0.01)

    def test_last_echo_signal(self):
        image = simulate_echo(uniform_tissue(), 37.45, 0.0, seed=0)
        self.assertAlmostEqual(float(image[0, 0]), 47.28, delta=0.01)

    def test_vanishing_echo_time_returns_amplitude(self):
        image = simulate_echo(uniform_tissue(), 1e-9, 0.0, seed=0)
        self.assertAlmostEqual(float(image[5, 5]), 100.0, places=5)

    def test_noise_is_seeded_and_clamped(self):
        tissue = make_tissue_map(2, 64, 64)
        a = simulate_echo(tissue, 20.0, 30.0, seed=4)
        b = simulate_echo(tissue, 20.0, 30.0, seed=4)
        np.testing.assert_array_equal(a, b)
        self.assertGreaterEqual(a.min(), 0.0)
        self.assertTrue(np.all(a[tissue.label_grid == 0] == 0))

    def test_rejects_non_finite_inputs(self):
        with self.assertRaises(ValueError):
            simulate_echo(uniform_tissue(), float('nan'), 0.0, seed=0)
        with self.assertRaises(ValueError):
            simulate_echo(uniform_tissue(), 5.0, float('inf'), seed=0)

    def test_default_echo_spacing(self):
        te = default_te_list()
        self.assertEqual(len(te), 8)
        self.assertAlmostEqual(te[1] - te[0], 4.9, places=9)
        self.assertAlmostEqual(te[-1], 37.45, places=9)

    def test_series_decays_and_shares_mask(self):
        tissue = make_tissue_map(9, 128, 128)
        series = make_series(tissue, default_te_list(), 0.0, seed=1)
        means = [series.images[k][series.mask == 1].mean() for k in range(8)]
        self.assertTrue(all(b < a for a, b in zip(means, means[1:])))
        np.testing.assert_array_equal(series.mask, tissue.label_grid == 2)

    def test_rejects_unordered_echo_times(self):
        with self.assertRaises(ValueError):
            make_series(uniform_tissue(), [5.0, 3.0], 0.0, seed=0)
        with self.assertRaises(ValueError):
            make_series(uniform_tissue(), [], 0.0, seed=0)

    def test_log_linear_fit_recovers_t2star(self):
        tissue = make_tissue_map(12, 96, 96)
        series = make_series(tissue, default_te_list(), 0.0, seed=0)
        fitted = fit_t2star(series)
        body = tissue.label_grid > 0
        relative = np.abs(fitted[body] - tissue.t2star_grid[body]) / tissue.t2star_grid[body]
        self.assertLess(relative.max(), 1e-6)


class DatasetTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def test_splits_are_subject_disjoint(self):
        manifest = Manifest.load(make_dataset(small_config(), self.root / 'a').parent)
        subjects = {split: {r.subject_id for r in manifest.select(split)}
                    for split in ('mae', 'source', 'validation', 'test')}
        adaptation = subjects['source'] | subjects['validation']
        self.assertFalse(subjects['test'] & adaptation)
        self.assertFalse(subjects['test'] & subjects['mae'])
        self.assertFalse(subjects['mae'] & adaptation)
        self.assertFalse(subjects['source'] & subjects['validation'])

    def test_label_availability_by_role(self):
        manifest = Manifest.load(make_dataset(small_config(), self.root / 'b').parent)
        self.assertTrue(all(r.labeled and r.mask for r in manifest.select('source')))
        self.assertTrue(all(not r.labeled and r.mask is None for r in manifest.select('target')))
        self.assertTrue(all(not r.labeled for r in manifest.select('mae')))
        self.assertEqual(manifest.echoes('source'), [1])
        self.assertEqual(manifest.echoes('target'), [2, 6])
        self.assertEqual(manifest.echoes('mae'), [3, 4, 5, 7, 8])
        self.assertEqual(manifest.echoes('test'), list(range(1, 9)))
        self.assertEqual(manifest.meta['echo_spacing'], 'uniform (assumed)')

    def test_regeneration_is_identical(self):
        first = make_dataset(small_config(), self.root / 'c').read_bytes()
        second = make_dataset(small_config(), self.root / 'd').read_bytes()
        self.assertEqual(first, second)

    def test_image_count_matches_config(self):
        config = small_config()
        manifest = Manifest.load(make_dataset(config, self.root / 'e').parent)
        series = {r.series_key for r in manifest.records}
        self.assertEqual(len(series), config.subjects * config.slices_per_subject)
        self.assertEqual(len(list((self.root / 'e' / 'images').iterdir())), len(manifest.records))

    def test_stored_images_match_simulation(self):
        manifest = Manifest.load(make_dataset(small_config(noise_sigma=0.0), self.root / 'f').parent)
        record = manifest.select('test', echo=1)[0]
        image = manifest.image(record)
        mask = manifest.mask(record)
        self.assertEqual(image.shape, (64, 64))
        self.assertTrue(np.all(image[mask == 1] > 0))

    def test_withheld_labels_cannot_be_read(self):
        manifest = Manifest.load(make_dataset(small_config(), self.root / 'g').parent)
        with self.assertRaises(ValueError):
            manifest.mask(manifest.select('target')[0])

    def test_assign_splits_rejects_impossible_counts(self):
        with self.assertRaises(ValueError):
            assign_splits(small_config(subjects=4, test_subjects=2, mae_subjects=2))

    def test_hygiene_check_rejects_shared_subjects(self):
        records = [
            ManifestRecord('sub-001', 0, 1, 3.15, 'source', True, 'a', 'm'),
            ManifestRecord('sub-001', 0, 1, 3.15, 'test', True, 'b', 'm'),
        ]
        with self.assertRaises(ValueError):
            check_split_hygiene(records)


class RasterFormatTests(SimpleTestCase):

    def test_raster_header_and_payload(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'x.f32'
            image = np.arange(64 * 80, dtype=np.float32).reshape(64, 80)
            write_raster(path, image)
            data = path.read_bytes()
            self.assertEqual(len(data), 12 + 64 * 80 * 4)
            self.assertEqual(tuple(np.frombuffer(data[4:12], dtype='<i4')), (64, 80))
            np.testing.assert_array_equal(read_raster(path), image)

    def test_mask_png_is_binary(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'm.png'
            mask = np.zeros((64, 64), dtype=np.uint8)
            mask[10:20, 5:9] = 1
            write_mask_png(path, mask)
            np.testing.assert_array_equal(read_mask_png(path), mask)
