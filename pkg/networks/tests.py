import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from django.core.exceptions import ImproperlyConfigured
from django.test import SimpleTestCase

from dataprep.transforms import LocationRecord, extract_views

from .checkpoints import capture_rng_state, load_checkpoint, load_mae, restore_rng_state, save_checkpoint
from .decoders import ReconDecoderSpec, SegDecoderSpec
from .encoder import EncoderSpec, count_parameters, get_2d_sincos_pos_embed
from .fusion import feature_rectangle, fuse_global_local
from .segmenter import NetworkSpec, build_mae, build_segmenter, segment, segment_global


def tiny_spec(**encoder_overrides):
    encoder = dict(depth=1, embed_dim=32, num_heads=2, patch_size=16, img_size=256)
    encoder.update(encoder_overrides)
    return NetworkSpec(
        encoder=EncoderSpec(**encoder),
        reconstruction=ReconDecoderSpec(decoder_dim=16, decoder_depth=1, num_heads=2),
        segmentation=SegDecoderSpec(aspp_channels=16, aspp_dilations=(1, 2, 3)),
    )


def full_location(size=256):
    return LocationRecord(0, 0, size, size, size, size)


class ShapeContractTests(SimpleTestCase):

    def test_default_spec_shapes(self):
        spec = NetworkSpec(EncoderSpec(), ReconDecoderSpec(), SegDecoderSpec())
        mae = build_mae(spec, seed=0)
        segmenter = build_segmenter(spec, seed=1, mae=mae)
        view = torch.rand(1, 1, 256, 256)
        with torch.no_grad():
            reconstruction, features, decoder_features = mae(view)
            output = segmenter(view, view, full_location())
        self.assertEqual(tuple(features.shape), (1, 512, 16, 16))
        self.assertEqual(tuple(reconstruction.shape), (1, 1, 256, 256))
        self.assertEqual(tuple(decoder_features.shape), (1, 256, 16, 16))
        self.assertEqual(tuple(output.logits.shape), (1, 2, 256, 256))
        self.assertEqual(tuple(output.global_logits.shape), (1, 2, 256, 256))
        self.assertEqual(tuple(output.decoder_features.shape), (1, 256, 16, 16))
        for tensor in (reconstruction, features, output.logits, output.global_logits):
            self.assertTrue(torch.isfinite(tensor).all())

    def test_encoder_rejects_wrong_view_size(self):
        mae = build_mae(tiny_spec(), seed=0)
        with self.assertRaises(ValueError):
            mae.encoder(torch.rand(1, 1, 128, 128))
        with self.assertRaises(ValueError):
            mae.encoder(torch.rand(1, 2, 256, 256))

    def test_patch_must_divide_view(self):
        with self.assertRaises(ValueError):
            EncoderSpec(patch_size=24)

    def test_position_table_is_fixed(self):
        table = get_2d_sincos_pos_embed(32, 16)
        self.assertEqual(table.shape, (256, 32))
        np.testing.assert_array_equal(table, get_2d_sincos_pos_embed(32, 16))
        mae = build_mae(tiny_spec(), seed=0)
        self.assertNotIn('encoder.pos_embed', mae.state_dict())

    def test_head_rejects_unexpected_channels(self):
        segmenter = build_segmenter(tiny_spec(), seed=0)
        with self.assertRaises(ValueError):
            segmenter.head(torch.rand(1, 48, 16, 16))


class DeterminismTests(SimpleTestCase):

    def test_same_seed_same_weights_and_outputs(self):
        a = build_mae(tiny_spec(), seed=5)
        b = build_mae(tiny_spec(), seed=5)
        for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            self.assertTrue(torch.equal(pa, pb), name)
        view = torch.rand(2, 1, 256, 256)
        with torch.no_grad():
            self.assertTrue(torch.equal(a(view)[0], b(view)[0]))

    def test_different_seed_different_weights(self):
        a = build_mae(tiny_spec(), seed=5)
        b = build_mae(tiny_spec(), seed=6)
        self.assertFalse(torch.equal(a.encoder.blocks[0].attn.qkv.weight, b.encoder.blocks[0].attn.qkv.weight))

    def test_building_does_not_consume_global_rng(self):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        build_mae(tiny_spec(), seed=0)
        self.assertTrue(torch.equal(torch.rand(3), expected))

    def test_parameter_count_is_stable(self):
        counts = {count_parameters(build_mae(tiny_spec(), seed=s)) for s in range(3)}
        self.assertEqual(len(counts), 1)


class FusionTests(SimpleTestCase):

    def test_local_channels_pass_through(self):
        local = torch.rand(1, 8, 16, 16)
        global_features = torch.rand(1, 8, 16, 16)
        fused = fuse_global_local(local, global_features, LocationRecord(40, 60, 128, 128, 256, 256))
        self.assertEqual(tuple(fused.shape), (1, 16, 16, 16))
        self.assertTrue(torch.equal(fused[:, :8], local))

    def test_quadrant_maps_to_first_half_rows(self):
        self.assertEqual(feature_rectangle(LocationRecord(0, 0, 128, 128, 256, 256), 16), (0, 8, 0, 8))
        self.assertEqual(feature_rectangle(LocationRecord(128, 128, 128, 128, 256, 256), 16), (8, 16, 8, 16))

    def test_rounding_ties_go_toward_origin(self):
        # 8 px of a 256 px slice is half a cell
        self.assertEqual(feature_rectangle(LocationRecord(8, 24, 16, 16, 256, 256), 16), (0, 1, 1, 2))

    def test_tiny_crop_keeps_one_cell(self):
        r0, r1, c0, c1 = feature_rectangle(LocationRecord(100, 100, 2, 2, 256, 256), 16)
        self.assertEqual((r1 - r0, c1 - c0), (1, 1))

    def test_full_crop_reuses_whole_global_grid(self):
        image = np.random.default_rng(0).uniform(0.1, 1.0, size=(200, 180))
        pair = extract_views(image, crop_fraction=1.0, rng_seed=0)
        self.assertEqual(feature_rectangle(pair.location, 16), (0, 16, 0, 16))
        local = torch.rand(1, 4, 16, 16)
        global_features = torch.rand(1, 4, 16, 16)
        fused = fuse_global_local(local, global_features, pair.location)
        torch.testing.assert_close(fused[:, 4:], global_features)

    def test_quadrant_region_is_upsampled_from_crop(self):
        global_features = torch.rand(1, 3, 16, 16)
        fused = fuse_global_local(torch.zeros(1, 3, 16, 16), global_features, LocationRecord(0, 0, 128, 128, 256, 256))
        expected = F.interpolate(global_features[:, :, :8, :8], size=(16, 16), mode='bilinear', align_corners=False)
        torch.testing.assert_close(fused[:, 3:], expected)

    def test_batch_and_shape_checks(self):
        with self.assertRaises(ValueError):
            fuse_global_local(torch.rand(2, 4, 16, 16), torch.rand(2, 4, 16, 16), [full_location()])
        with self.assertRaises(ValueError):
            fuse_global_local(torch.rand(1, 4, 16, 16), torch.rand(1, 4, 8, 8), full_location())

    def test_fusion_gradients(self):
        local = torch.rand(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        global_features = torch.rand(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        location = LocationRecord(16, 0, 32, 48, 64, 64)
        self.assertTrue(torch.autograd.gradcheck(
            lambda a, b: fuse_global_local(a, b, location), (local, global_features)))


class WeightSharingTests(SimpleTestCase):

    def test_segmenter_encoder_is_the_autoencoder_encoder(self):
        mae = build_mae(tiny_spec(), seed=0)
        segmenter = build_segmenter(tiny_spec(), seed=1, mae=mae)
        self.assertIs(segmenter.encoder, mae.encoder)
        with torch.no_grad():
            mae.encoder.norm.weight.add_(1.0)
        self.assertTrue(torch.equal(segmenter.encoder.norm.weight, mae.encoder.norm.weight))

    def test_spec_mismatch_rejected(self):
        mae = build_mae(tiny_spec(), seed=0)
        with self.assertRaises(ValueError):
            build_segmenter(tiny_spec(depth=2), seed=1, mae=mae)

    def test_numpy_entry_points(self):
        segmenter = build_segmenter(tiny_spec(), seed=0).eval()
        pair = extract_views(np.random.default_rng(1).uniform(size=(128, 128)), rng_seed=3)
        self.assertEqual(tuple(segment(segmenter, pair).shape), (1, 2, 256, 256))
        self.assertEqual(tuple(segment_global(segmenter, pair.global_view).shape), (1, 2, 256, 256))


class CheckpointTests(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def trained_payload(self):
        spec = tiny_spec()
        mae = build_mae(spec, seed=0)
        optimizer = torch.optim.AdamW(mae.parameters(), lr=1e-3, betas=(0.9, 0.95))
        reconstruction, _, _ = mae(torch.rand(1, 1, 256, 256))
        reconstruction.mean().backward()
        optimizer.step()
        generator = np.random.default_rng(4)
        generator.uniform(size=3)
        return spec, mae, {
            'network_spec': spec.to_dict(),
            'model': mae.state_dict(),
            'optimizer': optimizer.state_dict(),
            'step': 1,
            'rng': capture_rng_state(generator),
            'config_hash': 'abc',
        }

    def test_save_load_save_is_bit_exact(self):
        _, _, payload = self.trained_payload()
        first = save_checkpoint(self.root / 'a.ckpt', 'mae', payload)
        loaded = load_checkpoint(first, kind='mae')
        second = save_checkpoint(self.root / 'b.ckpt', 'mae', loaded)
        self.assertEqual(first.read_bytes(), second.read_bytes())
        self.assertFalse((self.root / 'a.ckpt.tmp').exists())

    def test_restored_model_matches(self):
        spec, mae, payload = self.trained_payload()
        path = save_checkpoint(self.root / 'mae.ckpt', 'mae', payload)
        restored, stored = load_mae(path, spec=spec)
        for name, tensor in mae.state_dict().items():
            self.assertTrue(torch.equal(tensor, restored.state_dict()[name]), name)
        self.assertEqual(stored['optimizer']['param_groups'][0]['betas'], (0.9, 0.95))
        optimizer = torch.optim.AdamW(restored.parameters(), lr=1e-3)
        optimizer.load_state_dict(stored['optimizer'])

    def test_rng_state_resumes_stream(self):
        generator = np.random.default_rng(9)
        torch.manual_seed(9)
        state = capture_rng_state(generator)
        path = save_checkpoint(self.root / 'rng.ckpt', 'mae', {'rng': state})
        expected = (generator.uniform(size=4), torch.rand(4))
        other = np.random.default_rng(0)
        restore_rng_state(load_checkpoint(path)['rng'], other)
        np.testing.assert_array_equal(other.uniform(size=4), expected[0])
        self.assertTrue(torch.equal(torch.rand(4), expected[1]))

    def test_kind_and_spec_mismatch_rejected(self):
        _, _, payload = self.trained_payload()
        path = save_checkpoint(self.root / 'mae.ckpt', 'mae', payload)
        with self.assertRaises(ImproperlyConfigured):
            load_checkpoint(path, kind='mpl')
        with self.assertRaises(ImproperlyConfigured):
            load_mae(path, spec=tiny_spec(depth=2))

    def test_garbage_file_rejected(self):
        path = self.root / 'junk.ckpt'
        path.write_bytes(b'not a checkpoint')
        with self.assertRaises(ImproperlyConfigured):
            load_checkpoint(path)

    def test_file_is_a_plain_torch_archive(self):
        _, mae, payload = self.trained_payload()
        path = save_checkpoint(self.root / 'mae.ckpt', 'mae', payload)
        container = torch.load(path, map_location='cpu', weights_only=False)
        self.assertEqual((container['format_version'], container['kind']), (1, 'mae'))
        self.assertEqual(container['payload']['network_spec'], payload['network_spec'])
        for name, tensor in mae.state_dict().items():
            self.assertTrue(torch.equal(container['payload']['model'][name], tensor), name)

    def test_bytes_do_not_depend_on_file_name(self):
        _, _, payload = self.trained_payload()
        first = save_checkpoint(self.root / 'mae_2.ckpt', 'mae', payload)
        second = save_checkpoint(self.root / 'other' / 'renamed.ckpt', 'mae', payload)
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_unversioned_torch_file_rejected(self):
        path = self.root / 'bare.pt'
        torch.save({'model': {}}, path)
        with self.assertRaises(ImproperlyConfigured):
            load_checkpoint(path)


class OverfitTests(SimpleTestCase):

    def test_tiny_segmenter_fits_one_slice(self):
        torch.manual_seed(0)
        segmenter = build_segmenter(tiny_spec(), seed=0)
        view = torch.zeros(1, 1, 256, 256)
        view[:, :, 64:128, 96:192] = 1.0
        label = view[:, 0].long()
        optimizer = torch.optim.Adam(segmenter.parameters(), lr=1e-3)
        losses = []
        for _ in range(150):
            optimizer.zero_grad()
            loss = F.cross_entropy(segmenter.segment(view, view, full_location()), label)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        self.assertLess(losses[-1], 0.5 * losses[0])

    def test_autoencoder_reconstructs_one_view(self):
        mae = build_mae(tiny_spec(), seed=0)
        view = torch.zeros(1, 1, 256, 256)
        view[:, :, 32:160, 64:224] = 0.8
        optimizer = torch.optim.Adam(mae.parameters(), lr=1e-3)
        losses = []
        for _ in range(200):
            optimizer.zero_grad()
            reconstruction, _, _ = mae(view)
            loss = F.mse_loss(reconstruction, view)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        self.assertLess(losses[-1], losses[0] / 10)

    def test_class_probabilities(self):
        segmenter = build_segmenter(tiny_spec(), seed=0).eval()
        view = torch.rand(2, 1, 256, 256)
        with torch.no_grad():
            logits = segmenter.segment(view, view, [full_location(), full_location()])
        probabilities = torch.softmax(logits, dim=1)
        torch.testing.assert_close(probabilities.sum(dim=1), torch.ones(2, 256, 256))
        self.assertTrue(set(logits.argmax(dim=1).unique().tolist()) <= {0, 1})
