import torch
from django.test import TestCase

from ..diffusion import (
    LatentBatch,
    build_schedule,
    ddim_step,
    eps_from_x0,
    forward_diffuse,
    sample_timesteps,
    sampling_timesteps,
    x0_from_eps,
)
from ..exceptions import ScheduleError, ShapeError


class NoiseScheduleTests(TestCase):
    """Unit tests for the linear noise schedule"""

    def test_alpha_bar_starts_at_one(self):
        """Test that the clean state has alpha_bar exactly 1 and the schedule is strictly decreasing"""
        sched = build_schedule(1000, 1e-4, 0.02)
        self.assertEqual(sched.alpha_bar.shape[0], 1001)
        self.assertEqual(float(sched.alpha_bar[0]), 1.0)
        self.assertTrue(torch.all(sched.alpha_bar[1:] < sched.alpha_bar[:-1]))
        self.assertGreater(float(sched.alpha_bar[-1]), 0.0)

    def test_endpoints_are_inclusive(self):
        """Test that beta runs from beta_start to beta_end inclusive"""
        sched = build_schedule(1000, 1e-4, 0.02)
        self.assertAlmostEqual(float(sched.beta[0]), 1e-4, places=12)
        self.assertAlmostEqual(float(sched.beta[-1]), 0.02, places=12)
        self.assertAlmostEqual(float(sched.alpha_bar[1]), 1 - 1e-4, places=12)

    def test_final_alpha_bar(self):
        """Test that the default schedule ends near 4.0e-5 and alpha_bar is the running product of 1 - beta"""
        sched = build_schedule(1000, 1e-4, 0.02)
        self.assertAlmostEqual(float(sched.alpha_bar[1000]), 4.0e-5, delta=1e-6)
        product = 1.0
        for t, beta in enumerate(sched.beta.tolist(), start=1):
            product *= 1.0 - beta
            self.assertLess(abs(float(sched.alpha_bar[t]) - product), 1e-12 * product)

    def test_invalid_bounds(self):
        """Test that out-of-range betas and step counts are rejected"""
        for args in ((0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)):
            with self.assertRaises(ScheduleError):
                build_schedule(*args)


class DiffusionIdentityTests(TestCase):
    """Unit tests for forward noising and the x0 / eps duality"""

    def setUp(self):
        self.sched = build_schedule(1000, 1e-4, 0.02)
        generator = torch.Generator().manual_seed(0)
        self.z0 = torch.randn(4, 4, 8, 8, generator=generator, dtype=torch.float64)
        self.eps = torch.randn(4, 4, 8, 8, generator=generator, dtype=torch.float64)

    def test_duality_round_trip(self):
        """Test that recovering x0 and eps from z_t inverts the forward process"""
        for t in (1, 10, 500, 1000):
            z_t = forward_diffuse(self.z0, t, self.eps, self.sched)
            self.assertLess(float((x0_from_eps(z_t, self.eps, t, self.sched) - self.z0).abs().max()), 1e-6)
            self.assertLess(float((eps_from_x0(z_t, self.z0, t, self.sched) - self.eps).abs().max()), 1e-6)

    def test_worked_example(self):
        """Test that alpha_bar=0.25 with z0=eps=1 noises to 1.3660 and recovers 1.0000"""
        sched = build_schedule(1, 0.75, 0.75)
        self.assertEqual(float(sched.alpha_bar[1]), 0.25)
        ones = torch.ones(1, 2, 2, 2, dtype=torch.float64)
        z_t = forward_diffuse(ones, 1, ones, sched)
        self.assertTrue(torch.allclose(z_t, torch.full_like(ones, 0.5 + 0.75 ** 0.5), rtol=0, atol=1e-12))
        self.assertAlmostEqual(float(z_t[0, 0, 0, 0]), 1.3660, places=4)
        x0 = x0_from_eps(torch.full_like(ones, 1.3660), ones, 1, sched)
        self.assertLess(float((x0 - 1.0).abs().max()), 1e-4)

    def test_energy_is_preserved(self):
        """Test that unit-variance latents and noise mix to unit energy at every step"""
        generator = torch.Generator().manual_seed(5)
        z0 = torch.randn(16, 4, 32, 32, generator=generator, dtype=torch.float64)
        eps = torch.randn(16, 4, 32, 32, generator=generator, dtype=torch.float64)
        for t in (1, 100, 500, 900, 1000):
            energy = float(forward_diffuse(z0, t, eps, self.sched).pow(2).mean())
            self.assertAlmostEqual(energy, 1.0, delta=0.05)

    def test_clean_state(self):
        """Test that t=0 returns the clean latent and eps is undefined there"""
        z_t = forward_diffuse(self.z0, 0, self.eps, self.sched)
        self.assertTrue(torch.equal(z_t, self.z0))
        with self.assertRaises(ScheduleError):
            eps_from_x0(z_t, self.z0, 0, self.sched)

    def test_per_example_steps(self):
        """Test that a vector of steps noises each example at its own level"""
        t = torch.tensor([1, 10, 100, 1000])
        batched = forward_diffuse(self.z0, t, self.eps, self.sched)
        for i, step in enumerate(t.tolist()):
            single = forward_diffuse(self.z0[i:i + 1], step, self.eps[i:i + 1], self.sched)
            self.assertTrue(torch.allclose(batched[i:i + 1], single, atol=1e-12))

    def test_latent_batch_is_preserved(self):
        """Test that tagged latents keep their modality and scaling state"""
        latent = LatentBatch(self.z0.float(), modality=2, scaled=True)
        z_t = forward_diffuse(latent, 10, self.eps.float(), self.sched)
        self.assertIsInstance(z_t, LatentBatch)
        self.assertEqual((z_t.modality, z_t.scaled), (2, True))
        self.assertEqual(z_t.data.dtype, torch.float32)

    def test_shape_and_range_errors(self):
        """Test that mismatched shapes and out-of-range steps fail"""
        with self.assertRaises(ShapeError):
            forward_diffuse(self.z0, 10, self.eps[:, :2], self.sched)
        with self.assertRaises(ScheduleError):
            forward_diffuse(self.z0, 1001, self.eps, self.sched)
        with self.assertRaises(ShapeError):
            forward_diffuse(self.z0, torch.tensor([1, 2]), self.eps, self.sched)
        with self.assertRaises(ShapeError):
            LatentBatch(torch.zeros(4, 8, 8), modality=0)


class SamplerTests(TestCase):
    """Unit tests for the DDIM step and the sampling grid"""

    def setUp(self):
        self.sched = build_schedule(1000, 1e-4, 0.02)
        generator = torch.Generator().manual_seed(1)
        self.z_t = torch.randn(2, 4, 8, 8, generator=generator, dtype=torch.float64)
        self.x0 = torch.randn(2, 4, 8, 8, generator=generator, dtype=torch.float64)

    def test_last_step_returns_prediction(self):
        """Test that stepping to t_prev=0 yields the x0 prediction exactly"""
        out = ddim_step(self.z_t, self.x0, 4, 0, 0.0, self.sched)
        self.assertTrue(torch.equal(out, self.x0))

    def test_deterministic_without_eta(self):
        """Test that eta=0 ignores the noise source"""
        a = ddim_step(self.z_t, self.x0, 500, 250, 0.0, self.sched, torch.Generator().manual_seed(1))
        b = ddim_step(self.z_t, self.x0, 500, 250, 0.0, self.sched, torch.Generator().manual_seed(2))
        self.assertTrue(torch.equal(a, b))

    def test_stochastic_with_eta(self):
        """Test that eta>0 draws fresh noise from the given source"""
        a = ddim_step(self.z_t, self.x0, 500, 250, 1.0, self.sched, torch.Generator().manual_seed(1))
        b = ddim_step(self.z_t, self.x0, 500, 250, 1.0, self.sched, torch.Generator().manual_seed(2))
        self.assertFalse(torch.equal(a, b))

    def test_consistent_prediction_is_a_fixed_point(self):
        """Test that a prediction matching z_t's implied noise lands on the forward process at t_prev"""
        eps = eps_from_x0(self.z_t, self.x0, 500, self.sched)
        expected = forward_diffuse(self.x0, 250, eps, self.sched)
        out = ddim_step(self.z_t, self.x0, 500, 250, 0.0, self.sched)
        self.assertTrue(torch.allclose(out, expected, atol=1e-10))

    def test_exact_prediction_follows_the_trajectory(self):
        """Test that stepping with the true x0 lands on the forward process at t_prev for random cases"""
        generator = torch.Generator().manual_seed(11)
        for _ in range(25):
            t = int(torch.randint(2, 1001, (1,), generator=generator))
            t_prev = int(torch.randint(0, t, (1,), generator=generator))
            shape = (int(torch.randint(1, 4, (1,), generator=generator)), 4, 8, 8)
            z0 = torch.randn(shape, generator=generator, dtype=torch.float64)
            eps = torch.randn(shape, generator=generator, dtype=torch.float64)
            z_t = forward_diffuse(z0, t, eps, self.sched)
            out = ddim_step(z_t, z0, t, t_prev, 0.0, self.sched)
            expected = forward_diffuse(z0, t_prev, eps, self.sched)
            self.assertTrue(torch.allclose(out, expected, rtol=1e-5, atol=1e-9), (t, t_prev, shape))

    def test_stochastic_noise_comes_from_the_generator(self):
        """Test that eta>0 adds sigma times a draw from the given generator"""
        t, t_prev, eta = 500, 250, 0.7
        a_t, a_prev = float(self.sched.alpha_bar[t]), float(self.sched.alpha_bar[t_prev])
        sigma = eta * ((1 - a_prev) / (1 - a_t)) ** 0.5 * (1 - a_t / a_prev) ** 0.5
        eps_hat = eps_from_x0(self.z_t, self.x0, t, self.sched)
        xi = torch.randn(self.z_t.shape, generator=torch.Generator().manual_seed(9), dtype=torch.float64)
        expected = a_prev ** 0.5 * self.x0 + (1 - a_prev - sigma ** 2) ** 0.5 * eps_hat + sigma * xi
        out = ddim_step(self.z_t, self.x0, t, t_prev, eta, self.sched, torch.Generator().manual_seed(9))
        self.assertTrue(torch.allclose(out, expected, rtol=0, atol=1e-10))

    def test_invalid_steps(self):
        """Test that non-decreasing step pairs and negative eta are rejected"""
        with self.assertRaises(ScheduleError):
            ddim_step(self.z_t, self.x0, 10, 10, 0.0, self.sched)
        with self.assertRaises(ScheduleError):
            ddim_step(self.z_t, self.x0, 10, 5, -0.1, self.sched)

    def test_sampling_grid(self):
        """Test that the grid descends from T to 0 in exactly `steps` pairs"""
        for steps in (1, 4, 50, 250, 1000):
            grid = sampling_timesteps(1000, steps)
            self.assertEqual(len(grid), steps)
            self.assertEqual(grid[0][0], 1000)
            self.assertEqual(grid[-1][1], 0)
            for (t, t_prev), (following, _) in zip(grid, grid[1:]):
                self.assertGreater(t, t_prev)
                self.assertEqual(t_prev, following)
        self.assertEqual(sampling_timesteps(1000, 4), [(1000, 750), (750, 500), (500, 250), (250, 0)])
        with self.assertRaises(ScheduleError):
            sampling_timesteps(1000, 0)
        with self.assertRaises(ScheduleError):
            sampling_timesteps(10, 11)

    def test_training_steps_are_uniform(self):
        """Test that training steps cover 1..T with every decile within 5% of its share"""
        sched = build_schedule(1000, 1e-4, 0.02)
        t = sample_timesteps(100_000, sched, torch.Generator().manual_seed(0))
        self.assertEqual(int(t.min()), 1)
        self.assertEqual(int(t.max()), 1000)
        counts = torch.bincount((t - 1) // 100, minlength=10)
        for count in counts.tolist():
            self.assertLess(abs(count - 10_000), 500)
