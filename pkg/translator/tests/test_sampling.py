from unittest.mock import patch

import torch
from django.test import TestCase

from .. import sampling
from ..exceptions import DirectionError, RegistryError, ScheduleError
from ..sampling import SampleConfig, translate
from .utils import micro_model, perturb


def random_image(channels, size, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return (torch.rand(channels, size, size, generator=generator, dtype=torch.float64) * 2 - 1)


class TranslateTests(TestCase):
    """Unit tests for the translation pipeline"""

    def setUp(self):
        self.model = micro_model()
        perturb(self.model.backbone)
        perturb(self.model.adapters, seed=1)
        self.sar = random_image(1, 16)

    def test_perfect_predictor_recovers_the_target(self):
        """Test that an x0 oracle yields the decoded, calibrated target latent"""
        rgb = random_image(3, 16, seed=1)
        z_star = self.model.encode_scaled('RGB', rgb.unsqueeze(0))
        with patch.object(self.model.backbone, 'predict_x0', return_value=z_star):
            output = translate(self.sar, ('SAR', 'RGB'), self.model, SampleConfig(steps=5))
        with torch.no_grad():
            expected = self.model.decode_scaled('RGB', self.model.adapters.calibrate(1, z_star)).clamp(-1, 1)
        self.assertTrue(torch.equal(output, expected[0]))

    def test_component_call_counts(self):
        """Test that the backbone runs once per step and the adapter and decoder once per translation"""
        backbone, adapters, decoder = self.model.backbone, self.model.adapters, self.model.codec('RGB')
        with patch.object(backbone, 'predict_x0', wraps=backbone.predict_x0) as predict, \
                patch.object(adapters, 'calibrate', wraps=adapters.calibrate) as calibrate, \
                patch.object(decoder, 'decode', wraps=decoder.decode) as decode:
            translate(self.sar, ('SAR', 'RGB'), self.model, SampleConfig(steps=7))
        self.assertEqual(predict.call_count, 7)
        self.assertEqual(calibrate.call_count, 1)
        self.assertEqual(decode.call_count, 1)
        self.assertEqual(calibrate.call_args.args[0], 1)

    def test_adapter_can_be_skipped(self):
        """Test that use_adapter=False bypasses calibration"""
        adapters = self.model.adapters
        with patch.object(adapters, 'calibrate', wraps=adapters.calibrate) as calibrate:
            plain = translate(self.sar, ('SAR', 'RGB'), self.model, SampleConfig(steps=3, use_adapter=False))
        self.assertEqual(calibrate.call_count, 0)
        calibrated = translate(self.sar, ('SAR', 'RGB'), self.model, SampleConfig(steps=3))
        self.assertFalse(torch.equal(plain, calibrated))

    def test_same_seed_same_output(self):
        """Test that translation is a pure function of the seed"""
        config = SampleConfig(steps=4, seed=3)
        first = translate(self.sar, ('SAR', 'RGB'), self.model, config)
        second = translate(self.sar, ('SAR', 'RGB'), self.model, config)
        self.assertTrue(torch.equal(first, second))
        other = translate(self.sar, ('SAR', 'RGB'), self.model, SampleConfig(steps=4, seed=4))
        self.assertFalse(torch.equal(first, other))

    def test_stochastic_sampling_is_seeded(self):
        """Test that eta>0 stays reproducible for a fixed seed"""
        config = SampleConfig(steps=4, eta=1.0, seed=2)
        first = translate(self.sar, ('SAR', 'RGB'), self.model, config)
        self.assertTrue(torch.equal(first, translate(self.sar, ('SAR', 'RGB'), self.model, config)))
        deterministic = translate(self.sar, ('SAR', 'RGB'), self.model, SampleConfig(steps=4, seed=2))
        self.assertFalse(torch.equal(first, deterministic))

    def test_stochastic_steps_share_the_seeded_generator(self):
        """Test that every DDIM step draws its noise from the generator seeded for the initial latent"""
        with patch.object(sampling, 'ddim_step', wraps=sampling.ddim_step) as step:
            translate(self.sar, ('SAR', 'RGB'), self.model, SampleConfig(steps=4, eta=0.5, seed=2))
        self.assertEqual(step.call_count, 4)
        generators = [call.args[6] for call in step.call_args_list]
        self.assertTrue(all(isinstance(generator, torch.Generator) for generator in generators))
        self.assertEqual(len({id(generator) for generator in generators}), 1)

    def test_zero_shot_direction_is_served(self):
        """Test that an untrained direction goes through the same path and yields the target shape"""
        output = translate(self.sar, 'SAR:PAN', self.model, SampleConfig(steps=2))
        self.assertEqual(tuple(output.shape), (1, 32, 32))
        self.assertLessEqual(float(output.abs().max()), 1.0)

    def test_batch_input(self):
        """Test that a batch of sources gives a batch of outputs"""
        batch = torch.stack([self.sar, random_image(1, 16, seed=5)])
        output = translate(batch, ('SAR', 'RGB'), self.model, SampleConfig(steps=2))
        self.assertEqual(tuple(output.shape), (2, 3, 16, 16))

    def test_invalid_requests(self):
        """Test that identity and unknown directions and bad sampler settings are rejected"""
        with self.assertRaises(DirectionError):
            translate(self.sar, ('SAR', 'SAR'), self.model, SampleConfig(steps=2))
        with self.assertRaises(RegistryError):
            translate(self.sar, ('SAR', 'NIR'), self.model, SampleConfig(steps=2))
        with self.assertRaises(DirectionError):
            translate(self.sar, 'SAR-RGB', self.model, SampleConfig(steps=2))
        with self.assertRaises(ScheduleError):
            translate(self.sar, ('SAR', 'RGB'), self.model, SampleConfig(steps=51))
        for kwargs in ({'steps': 0}, {'eta': -1.0}, {'spacing': 'quadratic'}):
            with self.assertRaises(ScheduleError):
                SampleConfig(**kwargs)
