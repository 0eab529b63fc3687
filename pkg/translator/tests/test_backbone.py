from unittest.mock import patch

import torch
from django.test import TestCase

from ..backbone import (
    Backbone,
    BackboneConfig,
    ConditioningEmbedder,
    DiTBlock,
    adaln_modulate,
    analytic_parameter_count,
    build_conditioning,
    construct_input,
    count_parameters,
)
from ..calibration import AdapterBank, calibration_loss, init_adapter_bank
from ..diffusion import LatentBatch
from ..exceptions import DivergenceError, RegistryError, ScaleError, ShapeError
from ..registry import LatentShapeContract, build_default_registry
from .utils import micro_backbone_config, micro_model, micro_registry, perturb


def scaled(data, modality=0):
    return LatentBatch(data, modality=modality, scaled=True)


class ConditioningTests(TestCase):
    """Unit tests for the timestep / source / target conditioning"""

    def setUp(self):
        self.embedder = ConditioningEmbedder(3, 16, freq_dim=16, seed=0).double()

    def test_conditioning_separates_directions(self):
        """Test that swapping source and target gives a different conditioning vector"""
        forward = build_conditioning(10, 0, 1, self.embedder)
        backward = build_conditioning(10, 1, 0, self.embedder)
        self.assertEqual(tuple(forward.shape), (1, 16))
        self.assertFalse(torch.allclose(forward, backward))
        self.assertFalse(torch.allclose(forward, build_conditioning(11, 0, 1, self.embedder)))

    def test_batch_broadcast(self):
        """Test that scalar ids broadcast over a vector of steps"""
        c = build_conditioning(torch.tensor([1, 5, 9]), 0, 2, self.embedder)
        self.assertEqual(tuple(c.shape), (3, 16))
        single = build_conditioning(5, 0, 2, self.embedder)
        self.assertTrue(torch.allclose(c[1:2], single))

    def test_out_of_range_ids(self):
        """Test that unknown modality ids and steps beyond T are rejected"""
        with self.assertRaises(RegistryError):
            build_conditioning(1, 3, 0, self.embedder)
        with self.assertRaises(RegistryError):
            build_conditioning(1, 0, -1, self.embedder)
        with self.assertRaises(ShapeError):
            build_conditioning(51, 0, 1, self.embedder, T=50)

    def test_indicator_mode_freezes_tables(self):
        """Test that indicator embeddings are fixed while learned ones train"""
        frozen = ConditioningEmbedder(3, 16, freq_dim=16, mode='indicator', seed=0)
        self.assertFalse(frozen.src_table.weight.requires_grad)
        self.assertFalse(frozen.tgt_table.weight.requires_grad)
        self.assertTrue(self.embedder.src_table.weight.requires_grad)
        # same seed gives the same initial rows in both modes
        self.assertTrue(torch.equal(frozen.src_table.weight.double(), self.embedder.src_table.weight))
        with self.assertRaises(ShapeError):
            ConditioningEmbedder(3, 16, mode='one-hot')


class AdaLNTests(TestCase):
    """Unit tests for adaptive layer-norm modulation"""

    def test_zero_gates_give_identity(self):
        """Test that a fresh block passes its input through unchanged"""
        block = DiTBlock(16, 2).double()
        x = torch.randn(2, 4, 16, dtype=torch.float64)
        c = torch.randn(2, 16, dtype=torch.float64)
        self.assertTrue(torch.equal(adaln_modulate(x, c, block), x))

    def test_conditioning_changes_the_output(self):
        """Test that a trained block responds to the conditioning vector"""
        block = perturb(DiTBlock(16, 2).double())
        x = torch.randn(2, 4, 16, dtype=torch.float64)
        c = torch.randn(2, 16, dtype=torch.float64)
        out = adaln_modulate(x, c, block)
        self.assertEqual(out.shape, x.shape)
        self.assertFalse(torch.allclose(out, x))
        self.assertFalse(torch.allclose(out, adaln_modulate(x, c + 1.0, block)))

    def test_width_mismatch(self):
        """Test that a conditioning vector of the wrong width is rejected"""
        block = DiTBlock(16, 2)
        with self.assertRaises(ShapeError):
            adaln_modulate(torch.randn(1, 4, 16), torch.randn(1, 8), block)


class BackboneTests(TestCase):
    """Unit tests for the shared denoiser"""

    def setUp(self):
        self.model = micro_model()
        self.c = build_conditioning(10, 0, 1, self.model.conditioner)

    def test_fresh_backbone_predicts_zero(self):
        """Test that the zero-initialised head predicts exactly zero, tagged with the target"""
        inputs = torch.randn(1, 4, 4, 4, dtype=torch.float64)
        z_hat = self.model.backbone.predict_x0(inputs, self.c, tgt=1)
        self.assertTrue(torch.equal(z_hat.data, torch.zeros(1, 2, 4, 4, dtype=torch.float64)))
        self.assertEqual((z_hat.modality, z_hat.scaled), (1, True))

    def test_input_layout(self):
        """Test that the noisy target channels come first and the source second"""
        z_t = scaled(torch.zeros(1, 2, 4, 4))
        z_src = scaled(torch.ones(1, 2, 4, 4))
        inputs = construct_input(z_t, z_src)
        self.assertEqual(tuple(inputs.shape), (1, 4, 4, 4))
        self.assertEqual(float(inputs[:, :2].abs().sum()), 0.0)
        self.assertEqual(float(inputs[:, 2:].min()), 1.0)
        with self.assertRaises(ScaleError):
            construct_input(z_t, LatentBatch(torch.ones(1, 2, 4, 4), modality=0))
        with self.assertRaises(ShapeError):
            construct_input(z_t, scaled(torch.ones(2, 2, 4, 4)))

    def test_source_conditions_the_prediction(self):
        """Test that a trained backbone's prediction depends on the source latent"""
        backbone = perturb(self.model.backbone)
        z_t = scaled(torch.randn(1, 2, 4, 4, dtype=torch.float64))
        a = backbone.predict_x0(construct_input(z_t, scaled(torch.zeros(1, 2, 4, 4, dtype=torch.float64))), self.c, 1)
        b = backbone.predict_x0(construct_input(z_t, scaled(torch.ones(1, 2, 4, 4, dtype=torch.float64))), self.c, 1)
        self.assertEqual(tuple(a.data.shape), (1, 2, 4, 4))
        self.assertFalse(torch.allclose(a.data, b.data))

    def test_batch_permutation(self):
        """Test that permuting the batch permutes the predictions the same way"""
        perturb(self.model.conditioner)
        perturb(self.model.backbone, seed=1)
        generator = torch.Generator().manual_seed(4)
        inputs = torch.randn(5, 4, 4, 4, generator=generator, dtype=torch.float64)
        t = torch.tensor([1, 7, 20, 33, 50])
        src, tgt = torch.tensor([0, 2, 1, 0, 2]), torch.tensor([1, 1, 0, 2, 0])
        perm = torch.tensor([3, 0, 4, 1, 2])
        c = build_conditioning(t, src, tgt, self.model.conditioner)
        permuted_c = build_conditioning(t[perm], src[perm], tgt[perm], self.model.conditioner)
        out = self.model.backbone.predict_x0(inputs, c, 1).data
        permuted = self.model.backbone.predict_x0(inputs[perm], permuted_c, 1).data
        self.assertTrue(torch.allclose(permuted, out[perm], rtol=0, atol=1e-12))

    def test_wrong_input_shape(self):
        """Test that inputs that are not [z_t, z_src] on the latent grid are rejected"""
        with self.assertRaises(ShapeError):
            self.model.backbone.predict_x0(torch.zeros(1, 2, 4, 4, dtype=torch.float64), self.c, 1)

    def test_non_finite_activations(self):
        """Test that NaN activations surface as a divergence"""
        inputs = torch.full((1, 4, 4, 4), float('nan'), dtype=torch.float64)
        with self.assertRaises(DivergenceError):
            perturb(self.model.backbone).predict_x0(inputs, self.c, 1)

    def test_patch_must_divide_the_grid(self):
        """Test that configurations inconsistent with the contract are rejected"""
        contract = LatentShapeContract(2, 4, 4)
        with self.assertRaises(ShapeError):
            Backbone(micro_backbone_config(patch=3), contract)
        with self.assertRaises(ShapeError):
            Backbone(micro_backbone_config(heads=3), contract)

    def test_parameter_count_matches_closed_form(self):
        """Test that the instantiated parameter counts equal the closed-form counts"""
        for model_config, n in ((micro_backbone_config(), 3), (BackboneConfig.from_preset('desk', 4), 5)):
            contract = LatentShapeContract(model_config.latent_channels, 8, 8)
            expected = analytic_parameter_count(model_config, n)
            self.assertEqual(count_parameters(Backbone(model_config, contract)), expected['backbone'])
            conditioner = ConditioningEmbedder(n, model_config.width, model_config.freq_dim)
            self.assertEqual(count_parameters(conditioner), expected['conditioner'])

    def test_large_preset_size(self):
        """Test that the L/4 preset lands near 456M backbone parameters"""
        counts = analytic_parameter_count(BackboneConfig.from_preset('L/4', 4), 5)
        self.assertEqual(counts['backbone'], 455_650_368)
        with self.assertRaises(ShapeError):
            BackboneConfig.from_preset('XL/2', 4)


class AdapterBankTests(TestCase):
    """Unit tests for the residual calibration adapters"""

    def setUp(self):
        self.registry = micro_registry()
        self.bank = init_adapter_bank(self.registry).double()
        self.z_hat = scaled(torch.randn(2, 2, 4, 4, dtype=torch.float64), modality=1)

    def test_one_branch_per_modality(self):
        """Test that the bank holds one branch per registered modality"""
        self.assertEqual(len(self.bank), 3)
        self.assertEqual(self.bank.hidden, 4)
        with self.assertRaises(RegistryError):
            init_adapter_bank(micro_registry(freeze=False))

    def test_fresh_bank_is_identity(self):
        """Test that zero-initialised adapters leave the prediction unchanged"""
        calibrated = self.bank.calibrate(1, self.z_hat)
        self.assertTrue(torch.equal(calibrated.data, self.z_hat.data))
        self.assertEqual((calibrated.modality, calibrated.scaled), (1, True))

    def test_only_the_target_branch_is_used(self):
        """Test that calibration consults exactly the target's branch"""
        perturb(self.bank)
        calls = []
        for index, branch in enumerate(self.bank.branches):
            patch.object(branch, 'forward', side_effect=lambda x, i=index, f=branch.forward: calls.append(i) or f(x)).start()
        self.addCleanup(patch.stopall)
        calibrated = self.bank.calibrate(1, self.z_hat)
        self.assertEqual(calls, [1])
        self.assertFalse(torch.allclose(calibrated.data, self.z_hat.data))

    def test_misuse(self):
        """Test that unscaled, mistagged and out-of-range inputs are rejected"""
        with self.assertRaises(ScaleError):
            self.bank.calibrate(1, LatentBatch(self.z_hat.data, modality=1))
        with self.assertRaises(ShapeError):
            self.bank.calibrate(0, self.z_hat)
        with self.assertRaises(RegistryError):
            self.bank.calibrate(3, scaled(self.z_hat.data, modality=3))
        with self.assertRaises(ShapeError):
            self.bank.calibrate(1, scaled(torch.zeros(2, 2, 8, 8, dtype=torch.float64), modality=1))

    def test_calibration_loss_stops_gradient(self):
        """Test that the calibration loss never reaches the prediction unless asked to"""
        perturb(self.bank)
        target = scaled(torch.randn(2, 2, 4, 4, dtype=torch.float64), modality=1)
        prediction = self.z_hat.data.clone().requires_grad_(True)
        calibration_loss(self.bank, scaled(prediction, 1), target, 1).backward()
        self.assertIsNone(prediction.grad)
        self.assertIsNotNone(self.bank.branch(1).conv_out.weight.grad)

        literal = self.z_hat.data.clone().requires_grad_(True)
        calibration_loss(self.bank, scaled(literal, 1), target, 1, detach_prediction=False).backward()
        self.assertIsNotNone(literal.grad)

    def test_calibration_loss_of_fresh_bank(self):
        """Test that a no-op adapter gives the plain prediction error"""
        target = scaled(torch.randn(2, 2, 4, 4, dtype=torch.float64), modality=1)
        loss = calibration_loss(self.bank, self.z_hat, target, 1)
        expected = (self.z_hat.data - target.data).pow(2).mean()
        self.assertAlmostEqual(float(loss), float(expected), places=12)

    def test_calibration_loss_of_a_constant_offset(self):
        """Test that a fresh bank scores a target offset by 0.3 as 0.09"""
        target = scaled(self.z_hat.data + 0.3, modality=1)
        self.assertAlmostEqual(float(calibration_loss(self.bank, self.z_hat, target, 1)), 0.09, places=12)

    def test_calibration_learns_a_constant_offset(self):
        """Test that training on a +0.3 mismatch drives the branch output to 0.3 everywhere"""
        target = scaled(self.z_hat.data + 0.3, modality=1)
        branch = self.bank.branch(1)
        optimizer = torch.optim.LBFGS(branch.parameters(), lr=1.0, max_iter=500, tolerance_grad=1e-12,
                                      tolerance_change=1e-16, line_search_fn='strong_wolfe')

        def closure():
            optimizer.zero_grad()
            loss = calibration_loss(self.bank, self.z_hat, target, 1)
            loss.backward()
            return loss

        optimizer.step(closure)
        with torch.no_grad():
            correction = self.bank.calibrate(1, self.z_hat).data - self.z_hat.data
        self.assertLess(float((correction - 0.3).abs().max()), 0.02)
        for index in (0, 2):
            self.assertEqual(float(self.bank.branch(index).conv_out.weight.abs().sum()), 0.0)

    def test_default_hidden_width(self):
        """Test that the hidden width defaults to twice the latent channels"""
        bank = AdapterBank(5, build_default_registry('desk').contract)
        self.assertEqual(bank.hidden, 8)
