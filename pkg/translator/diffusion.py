"""
Diffusion Math

Pure numerical kernel for the diffusion process: schedule construction,
forward noising, the x0 / epsilon duality and the deterministic sampler step.

Index convention: t=0 is the clean state with alpha_bar[0] == 1 exactly and
t in 1..T are noised states. All schedule arithmetic runs in float64; results
are cast back to the dtype of the latent they act on.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple, Union

import numpy as np
import torch

from .exceptions import ScheduleError, ShapeError
from .registry import LatentShapeContract

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LatentBatch:
    """A batch of latents in the shared manifold, tagged with modality id and scaling state."""

    data: torch.Tensor
    modality: int
    scaled: bool = False

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"Latent batch must be (batch, c, h, w), got shape {tuple(self.data.shape)}")

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    def check_contract(self, contract: LatentShapeContract) -> 'LatentBatch':
        if tuple(self.data.shape[1:]) != contract.as_tuple():
            raise ShapeError(
                f"Latent shape {tuple(self.data.shape[1:])} violates contract {contract.as_tuple()}"
            )
        return self

    def check_finite(self) -> 'LatentBatch':
        if not torch.isfinite(self.data).all():
            raise ShapeError("Latent batch contains non-finite entries")
        return self

    def with_data(self, data: torch.Tensor, **changes) -> 'LatentBatch':
        return replace(self, data=data, **changes)


TensorLike = Union[torch.Tensor, LatentBatch]
Step = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    beta: torch.Tensor
    alpha_bar: torch.Tensor

    def manifest_entries(self):
        return {
            'schedule.T': str(self.T),
            'schedule.beta_start': repr(self.beta_start),
            'schedule.beta_end': repr(self.beta_end),
        }


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule inclusive of both endpoints; alpha_bar[0] = 1."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(
            f"Need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    T = int(T)
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bar = torch.cat([
        torch.ones(1, dtype=torch.float64),
        torch.cumprod(1.0 - beta, dim=0),
    ])
    return NoiseSchedule(T=T, beta_start=float(beta_start), beta_end=float(beta_end), beta=beta, alpha_bar=alpha_bar)


def _unwrap(x: TensorLike) -> torch.Tensor:
    return x.data if isinstance(x, LatentBatch) else x


def _rewrap(template: TensorLike, data: torch.Tensor) -> TensorLike:
    return template.with_data(data) if isinstance(template, LatentBatch) else data


def _alpha_bar_at(sched: NoiseSchedule, t: Step, like: torch.Tensor) -> torch.Tensor:
    """alpha_bar[t] in float64, broadcastable against ``like`` (per-example when t is a vector)."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.shape[0] != like.shape[0]:
            raise ShapeError(f"Got {t.shape[0]} step indices for a batch of {like.shape[0]}")
        steps = t.long().cpu()
        if steps.min() < 0 or steps.max() > sched.T:
            raise ScheduleError(f"Step indices must lie in 0..{sched.T}")
        values = sched.alpha_bar[steps].to(like.device)
        return values.view(-1, *([1] * (like.ndim - 1)))
    step = int(t)
    if not 0 <= step <= sched.T:
        raise ScheduleError(f"Step index {step} outside 0..{sched.T}")
    return sched.alpha_bar[step].to(like.device)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(z0: TensorLike, t: Step, eps: TensorLike, sched: NoiseSchedule) -> TensorLike:
    """z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps, elementwise."""
    clean, noise = _unwrap(z0), _unwrap(eps)
    _check_same_shape(clean, noise, 'forward_diffuse')
    a = _alpha_bar_at(sched, t, clean)
    z_t = a.sqrt() * clean.double() + (1.0 - a).sqrt() * noise.double()
    return _rewrap(z0, z_t.to(clean.dtype))


def x0_from_eps(z_t: TensorLike, eps: TensorLike, t: Step, sched: NoiseSchedule) -> TensorLike:
    noisy, noise = _unwrap(z_t), _unwrap(eps)
    _check_same_shape(noisy, noise, 'x0_from_eps')
    a = _alpha_bar_at(sched, t, noisy)
    x0 = (noisy.double() - (1.0 - a).sqrt() * noise.double()) / a.sqrt()
    return _rewrap(z_t, x0.to(noisy.dtype))


def eps_from_x0(z_t: TensorLike, x0: TensorLike, t: Step, sched: NoiseSchedule) -> TensorLike:
    noisy, clean = _unwrap(z_t), _unwrap(x0)
    _check_same_shape(noisy, clean, 'eps_from_x0')
    a = _alpha_bar_at(sched, t, noisy)
    if isinstance(t, int) and t == 0:
        raise ScheduleError("eps is undefined at the clean state t=0")
    eps = (noisy.double() - a.sqrt() * clean.double()) / (1.0 - a).sqrt()
    return _rewrap(z_t, eps.to(noisy.dtype))


def ddim_step(
    z_t: TensorLike,
    x0_pred: TensorLike,
    t: int,
    t_prev: int,
    eta: float,
    sched: NoiseSchedule,
    noise_source: Optional[torch.Generator] = None,
) -> TensorLike:
    """
    One DDIM update from step t to t_prev with the backbone's x0 prediction substituted.

    With eta=0 the update is a pure function of its inputs; at t_prev=0 it
    returns x0_pred exactly because alpha_bar[0] == 1.
    """
    if not 0 <= t_prev < t <= sched.T:
        raise ScheduleError(f"Need 0 <= t_prev < t <= {sched.T}, got t={t}, t_prev={t_prev}")
    if eta < 0:
        raise ScheduleError(f"eta must be >= 0, got {eta}")
    noisy, clean = _unwrap(z_t), _unwrap(x0_pred)
    _check_same_shape(noisy, clean, 'ddim_step')

    a_t = float(sched.alpha_bar[t])
    a_prev = float(sched.alpha_bar[t_prev])
    eps_hat = (noisy.double() - a_t ** 0.5 * clean.double()) / (1.0 - a_t) ** 0.5
    sigma = eta * ((1.0 - a_prev) / (1.0 - a_t)) ** 0.5 * (1.0 - a_t / a_prev) ** 0.5
    direction_coef = max(1.0 - a_prev - sigma ** 2, 0.0) ** 0.5

    z_prev = a_prev ** 0.5 * clean.double() + direction_coef * eps_hat
    if sigma > 0:
        # the generator may live on another device than the latents
        device = noise_source.device if noise_source is not None else noisy.device
        xi = torch.randn(noisy.shape, generator=noise_source, dtype=torch.float64, device=device)
        z_prev = z_prev + sigma * xi.to(noisy.device)
    return _rewrap(z_t, z_prev.to(noisy.dtype))


def sampling_timesteps(T: int, steps: int) -> List[Tuple[int, int]]:
    """
    Evenly spaced (t, t_prev) pairs over 0..T including both endpoints, from T down to 0.

    ``steps`` is the number of pairs and therefore the number of backbone calls.
    """
    if not 1 <= steps <= T:
        raise ScheduleError(f"Sampling steps must lie in 1..{T}, got {steps}")
    grid = np.floor(np.linspace(0, T, steps + 1) + 0.5).astype(np.int64)
    descending = grid[::-1].tolist()
    return list(zip(descending[:-1], descending[1:]))


def sample_timesteps(batch: int, sched: NoiseSchedule, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Training steps drawn uniformly from 1..T."""
    return torch.randint(1, sched.T + 1, (batch,), generator=generator)
