import math

import torch
from django.test import SimpleTestCase

from .objectives import (
    LossWeights, TrainingDiverged, cosine_align, ensure_finite, glc_loss, mae_loss, mae_total, masked_mse,
    mpl_loss, mpl_total, seg_loss, semantic_consistency,
)


def half_label(size=8):
    label = torch.zeros(1, size, size, dtype=torch.long)
    label[:, :, : size // 2] = 1
    return label


class MaskedMseTests(SimpleTestCase):

    def test_perfect_reconstruction_is_zero(self):
        x = torch.rand(1, 1, 8, 8)
        mask = torch.ones_like(x)
        self.assertEqual(masked_mse(x, x, mask).item(), 0.0)

    def test_constant_error_on_half_mask(self):
        original = torch.ones(1, 1, 8, 8)
        mask = torch.zeros_like(original)
        mask[..., :4] = 1
        self.assertEqual(masked_mse(torch.zeros_like(original), original, mask).item(), 1.0)

    def test_matches_brute_force_sum(self):
        generator = torch.Generator().manual_seed(3)
        recon = torch.rand(4, 4, generator=generator, dtype=torch.float64)
        original = torch.rand(4, 4, generator=generator, dtype=torch.float64)
        mask = (torch.rand(4, 4, generator=generator) > 0.5).double()
        mask[0, 0] = 1
        expected, count = 0.0, 0
        for i in range(4):
            for j in range(4):
                if mask[i, j]:
                    expected += (recon[i, j].item() - original[i, j].item()) ** 2
                    count += 1
        self.assertAlmostEqual(masked_mse(recon, original, mask).item(), expected / count, places=12)

    def test_empty_mask_warns_and_returns_zero(self):
        x = torch.rand(1, 1, 4, 4)
        with self.assertLogs('losses.objectives', level='WARNING'):
            value = masked_mse(x, torch.zeros_like(x), torch.zeros_like(x))
        self.assertEqual(value.item(), 0.0)

    def test_mae_loss_adds_both_views(self):
        original = torch.ones(1, 1, 4, 4)
        full = torch.ones_like(original)
        local = (torch.zeros_like(original), original, full)
        global_pair = (torch.full_like(original, 0.5), original, full)
        self.assertAlmostEqual(mae_loss(local, global_pair).item(), 1.25, places=6)
        self.assertEqual(mae_loss((original, original, full), (original, original, full)).item(), 0.0)


class SegLossTests(SimpleTestCase):

    def test_saturated_correct_logits(self):
        label = half_label()
        logits = torch.stack([(1 - label) * 20.0, label * 20.0], dim=1).float()
        self.assertLess(seg_loss(logits, label).item(), 1e-3)

    def test_uniform_logits_closed_form(self):
        label = half_label()
        logits = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
        # sum p = 32, sum q = 32, sum pq = 16
        expected = math.log(2) + (1 - 33 / 65)
        self.assertAlmostEqual(seg_loss(logits, label).item(), expected, places=10)

    def test_non_binary_target_rejected(self):
        label = half_label()
        label[0, 0, 0] = 2
        with self.assertRaises(ValueError):
            seg_loss(torch.zeros(1, 2, 8, 8), label)

    def test_shape_checks(self):
        with self.assertRaises(ValueError):
            seg_loss(torch.zeros(1, 3, 8, 8), half_label())
        with self.assertRaises(ValueError):
            seg_loss(torch.zeros(1, 2, 8, 8), half_label(4))

    def test_gradient_matches_finite_differences(self):
        logits = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        label = half_label(4)
        self.assertTrue(torch.autograd.gradcheck(lambda x: seg_loss(x, label), (logits,)))


class MplLossTests(SimpleTestCase):

    def test_equal_terms_weighted_by_beta(self):
        logits = torch.randn(1, 2, 8, 8)
        label = half_label()
        single = seg_loss(logits, label).item()
        self.assertAlmostEqual(mpl_loss(logits, label, logits, label, beta=0.5).item(), 1.5 * single, places=5)

    def test_beta_zero_keeps_target_only(self):
        target_logits, source_logits = torch.randn(1, 2, 8, 8), torch.randn(1, 2, 8, 8)
        label = half_label()
        self.assertAlmostEqual(mpl_loss(target_logits, label, source_logits, label, beta=0.0).item(),
                               seg_loss(target_logits, label).item(), places=6)

    def test_recomposition(self):
        generator = torch.Generator().manual_seed(0)
        target_logits = torch.randn(1, 2, 8, 8, generator=generator)
        source_logits = torch.randn(1, 2, 8, 8, generator=generator)
        pseudo = (torch.rand(1, 8, 8, generator=generator) > 0.5).long()
        label = half_label()
        expected = seg_loss(target_logits, pseudo) + 0.3 * seg_loss(source_logits, label)
        self.assertAlmostEqual(mpl_loss(target_logits, pseudo, source_logits, label, beta=0.3).item(),
                               expected.item(), places=6)

    def test_warmup_weight_blocks_target_gradient(self):
        target_logits = torch.randn(1, 2, 8, 8, requires_grad=True)
        source_logits = torch.randn(1, 2, 8, 8, requires_grad=True)
        label = half_label()
        loss = mpl_loss(target_logits, label, source_logits, label, beta=0.5, target_weight=0.0)
        grad_target, grad_source = torch.autograd.grad(loss, (target_logits, source_logits), allow_unused=True)
        self.assertIsNone(grad_target)
        self.assertGreater(grad_source.abs().sum().item(), 0)


class CosineTests(SimpleTestCase):

    def test_identical_orthogonal_and_opposite(self):
        a = torch.tensor([[1.0, 2.0, 3.0]])
        self.assertAlmostEqual(cosine_align(a, a).item(), 0.0, places=6)
        self.assertAlmostEqual(cosine_align(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]])).item(), 1.0)
        self.assertAlmostEqual(cosine_align(a, -a).item(), 2.0, places=6)

    def test_grids_are_pooled_before_cosine(self):
        a = torch.zeros(1, 2, 4, 4)
        a[:, 0, :2] = 2.0
        b = torch.zeros(1, 2, 4, 4)
        b[:, 0, 2:] = 5.0
        # pooled vectors are parallel even though no position overlaps
        self.assertAlmostEqual(cosine_align(a, b).item(), 0.0, places=6)

    def test_scale_invariance(self):
        generator = torch.Generator().manual_seed(1)
        a = torch.randn(2, 8, 4, 4, generator=generator, dtype=torch.float64)
        b = torch.randn(2, 8, 4, 4, generator=generator, dtype=torch.float64)
        for c in (0.01, 3.0, 250.0):
            self.assertAlmostEqual(cosine_align(c * a, b).item(), cosine_align(a, b).item(), delta=1e-6)
            self.assertAlmostEqual(cosine_align(a, c * b).item(), cosine_align(a, b).item(), delta=1e-6)

    def test_zero_vectors_stay_finite(self):
        zero = torch.zeros(1, 4)
        self.assertEqual(cosine_align(zero, zero).item(), 1.0)

    def test_literal_denominator(self):
        a = torch.tensor([[3.0, 0.0]])
        self.assertAlmostEqual(cosine_align(a, a, max_norm=True).item(), -2.0, places=6)

    def test_gradient_matches_finite_differences(self):
        a = torch.randn(1, 4, 2, 2, dtype=torch.float64, requires_grad=True)
        b = torch.randn(1, 4, 2, 2, dtype=torch.float64, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(cosine_align, (a, b)))


class CompositeLossTests(SimpleTestCase):

    def setUp(self):
        generator = torch.Generator().manual_seed(7)
        self.enc = [torch.randn(1, 8, 4, 4, generator=generator) for _ in range(2)]
        self.dec = [torch.randn(1, 6, 4, 4, generator=generator) for _ in range(2)]

    def test_semantic_consistency(self):
        self.assertAlmostEqual(
            semantic_consistency(self.enc[0], self.enc[0], self.dec[0], self.dec[0]).item(), 0.0, places=6)
        encoder_only = semantic_consistency(*self.enc, *self.dec, lambda_enc=0.5, lambda_dec=0.0)
        self.assertAlmostEqual(encoder_only.item(), 0.5 * cosine_align(*self.enc).item(), places=6)
        combined = semantic_consistency(*self.enc, *self.dec, lambda_enc=0.3, lambda_dec=0.7)
        expected = 0.3 * cosine_align(*self.enc) + 0.7 * cosine_align(*self.dec)
        self.assertAlmostEqual(combined.item(), expected.item(), places=6)

    def test_semantic_consistency_gradient(self):
        tensors = [t.double().requires_grad_() for t in (*self.enc, *self.dec)]
        self.assertTrue(torch.autograd.gradcheck(semantic_consistency, tuple(tensors)))

    def test_glc(self):
        logits = torch.randn(1, 2, 8, 8)
        label = half_label()
        self.assertEqual(glc_loss(logits, label, *self.enc, gamma=0.0, delta=0.0).item(), 0.0)
        self.assertAlmostEqual(
            glc_loss(logits, None, self.enc[0], self.enc[0], gamma=0.0, delta=1.0).item(), 0.0, places=6)
        expected = 1.0 * seg_loss(logits, label) + 0.1 * cosine_align(*self.enc)
        self.assertAlmostEqual(glc_loss(logits, label, *self.enc, gamma=1.0, delta=0.1).item(),
                               expected.item(), places=6)
        with self.assertRaises(ValueError):
            glc_loss(logits, None, *self.enc, gamma=1.0)

    def test_glc_gradient(self):
        logits = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
        local = torch.randn(1, 4, 2, 2, dtype=torch.float64, requires_grad=True)
        global_features = torch.randn(1, 4, 2, 2, dtype=torch.float64, requires_grad=True)
        label = half_label(4)
        self.assertTrue(torch.autograd.gradcheck(
            lambda x, a, b: glc_loss(x, label, a, b, gamma=1.0, delta=0.1), (logits, local, global_features)))

    def test_masked_mse_gradient(self):
        recon = torch.rand(1, 1, 4, 4, dtype=torch.float64, requires_grad=True)
        original = torch.rand(1, 1, 4, 4, dtype=torch.float64)
        mask = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
        mask[..., 1:3, :] = 1
        self.assertTrue(torch.autograd.gradcheck(lambda r: masked_mse(r, original, mask), (recon,)))

    def test_mae_total(self):
        mae, sc = torch.tensor(1.5), torch.tensor(2.0)
        self.assertAlmostEqual(mae_total(mae, sc, gamma_sc=0.4).item(), 2.3, places=6)
        self.assertEqual(mae_total(mae, sc, gamma_sc=0.0).item(), 1.5)
        self.assertAlmostEqual((mae_total(mae, sc + 1) - mae_total(mae, sc)).item(), 0.4, places=6)

    def test_mpl_total_is_linear_in_each_term(self):
        parts = dict(mpl_term=torch.tensor(0.7), glc_term=torch.tensor(0.2),
                     sc_term=torch.tensor(0.9), fss_term=torch.tensor(0.4))
        base = mpl_total(**parts, gamma_sc=0.4).item()
        self.assertAlmostEqual(base, 0.7 + 0.2 + 0.4 * 0.9 + 0.4, places=6)
        coefficients = {'mpl_term': 1.0, 'glc_term': 1.0, 'sc_term': 0.4, 'fss_term': 1.0}
        for name, coefficient in coefficients.items():
            bumped = dict(parts, **{name: parts[name] + 1.0})
            self.assertAlmostEqual(mpl_total(**bumped, gamma_sc=0.4).item() - base, coefficient, places=5)
        zeros = {k: torch.tensor(0.0) for k in parts}
        self.assertEqual(mpl_total(**zeros).item(), 0.0)


class LossWeightTests(SimpleTestCase):

    def test_defaults(self):
        weights = LossWeights()
        self.assertEqual((weights.beta, weights.gamma_sc_mae, weights.gamma_sc_mpl), (0.5, 0.4, 0.4))

    def test_negative_weight_rejected(self):
        with self.assertRaises(ValueError):
            LossWeights(beta=-0.1)
        with self.assertRaises(ValueError):
            LossWeights(epsilon=0.0)

    def test_non_finite_loss_raises(self):
        with self.assertRaises(TrainingDiverged):
            ensure_finite('mse', torch.tensor(float('nan')), step=3)
        self.assertEqual(ensure_finite('mse', torch.tensor(1.0)).item(), 1.0)
