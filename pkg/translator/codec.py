"""
Latent Codec

One variational autoencoder per modality. Each codec maps native images of
its own channel count and resolution into the shared latent contract and
back. Also hosts the Stage-I composite loss and latent-scale estimation.

    L_vae = L_rec + gamma * L_perceptual + beta_kl * L_kl
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import LatentBatch
from .exceptions import ScaleError, ShapeError
from .registry import LatentShapeContract, ModalitySpec, downsampling_depth

logger = logging.getLogger(__name__)

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0
MIN_SCALE_SAMPLES = 256


@dataclass(frozen=True)
class CodecConfig:
    modality: int
    channels: int
    native_size: int
    latent: LatentShapeContract
    depth: int
    hidden: int = 32
    gamma: float = 0.0
    beta_kl: float = 1e-5
    perceptual: str = 'gradient'

    def __post_init__(self):
        if self.gamma < 0 or self.beta_kl < 0:
            raise ValueError(f"gamma and beta_kl must be >= 0, got {self.gamma}, {self.beta_kl}")
        if self.native_size != self.latent.h * 2 ** self.depth:
            raise ShapeError(
                f"depth {self.depth} maps {self.native_size}px onto "
                f"{self.native_size // 2 ** self.depth}, contract wants {self.latent.h}"
            )

    @classmethod
    def for_modality(cls, spec: ModalitySpec, modality_id: int, contract: LatentShapeContract, **options) -> 'CodecConfig':
        return cls(
            modality=modality_id,
            channels=spec.channels,
            native_size=spec.native_size,
            latent=contract,
            depth=downsampling_depth(spec.native_size, contract.h),
            **options,
        )


@dataclass(frozen=True)
class LatentPosterior:
    mean: torch.Tensor
    logvar: torch.Tensor

    def sample(self, noise_source: Optional[torch.Generator] = None) -> torch.Tensor:
        xi = torch.randn(self.mean.shape, generator=noise_source, dtype=self.mean.dtype, device=self.mean.device)
        return self.mean + torch.exp(0.5 * self.logvar) * xi


@dataclass(frozen=True)
class LossBreakdown:
    rec: torch.Tensor
    perceptual: torch.Tensor
    kl: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> Dict[str, float]:
        return {
            'rec': float(self.rec),
            'perceptual': float(self.perceptual),
            'kl': float(self.kl),
            'total': float(self.total),
        }


def _groups(width: int) -> int:
    return 8 if width % 8 == 0 else 1


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(width), width)
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(width), width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Upsample(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode='nearest'))


class ModalityCodec(nn.Module):
    """Convolutional VAE for one modality; ``depth`` stride-2 stages reach the latent grid."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        hidden, c = config.hidden, config.latent.c

        encoder = [nn.Conv2d(config.channels, hidden, 3, padding=1)]
        for _ in range(config.depth):
            encoder += [ResBlock(hidden), nn.Conv2d(hidden, hidden, 4, stride=2, padding=1)]
        encoder += [ResBlock(hidden), nn.GroupNorm(_groups(hidden), hidden), nn.SiLU(),
                    nn.Conv2d(hidden, 2 * c, 3, padding=1)]
        self.encoder = nn.Sequential(*encoder)

        decoder = [nn.Conv2d(c, hidden, 3, padding=1), ResBlock(hidden)]
        for _ in range(config.depth):
            decoder += [Upsample(hidden), ResBlock(hidden)]
        decoder += [nn.GroupNorm(_groups(hidden), hidden), nn.SiLU(),
                    nn.Conv2d(hidden, config.channels, 3, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*decoder)

    @property
    def native_shape(self) -> Tuple[int, int, int]:
        return (self.config.channels, self.config.native_size, self.config.native_size)

    def posterior(self, image: torch.Tensor) -> LatentPosterior:
        if image.ndim != 4 or tuple(image.shape[1:]) != self.native_shape:
            raise ShapeError(
                f"Modality {self.config.modality} expects images (batch, {', '.join(map(str, self.native_shape))}), "
                f"got {tuple(image.shape)}"
            )
        mean, logvar = self.encoder(image).chunk(2, dim=1)
        return LatentPosterior(mean=mean, logvar=logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))

    def encode(
        self,
        image: torch.Tensor,
        sample: bool = False,
        noise_source: Optional[torch.Generator] = None,
    ) -> Tuple[LatentBatch, LatentPosterior]:
        posterior = self.posterior(image)
        z = posterior.sample(noise_source) if sample else posterior.mean
        latent = LatentBatch(data=z, modality=self.config.modality, scaled=False)
        return latent.check_contract(self.config.latent), posterior

    def decode(self, latent: LatentBatch) -> torch.Tensor:
        if latent.scaled:
            raise ScaleError("decode expects an unscaled latent; call remove_scale first")
        latent.check_contract(self.config.latent)
        return self.decoder(latent.data)

    def forward(self, image: torch.Tensor, noise_source: Optional[torch.Generator] = None):
        latent, posterior = self.encode(image, sample=True, noise_source=noise_source)
        return self.decoder(latent.data), posterior


def gradient_perceptual_loss(recon: torch.Tensor, image: torch.Tensor, scales=(1, 2, 4)) -> torch.Tensor:
    """Multi-scale L1 distance between horizontal and vertical image gradients."""
    terms = []
    for scale in scales:
        if min(image.shape[-2:]) < 2 * scale:
            break
        a = F.avg_pool2d(recon, scale) if scale > 1 else recon
        b = F.avg_pool2d(image, scale) if scale > 1 else image
        dx = (a[..., :, 1:] - a[..., :, :-1]) - (b[..., :, 1:] - b[..., :, :-1])
        dy = (a[..., 1:, :] - a[..., :-1, :]) - (b[..., 1:, :] - b[..., :-1, :])
        terms.append(dx.abs().mean() + dy.abs().mean())
    if not terms:
        return recon.new_zeros(())
    return torch.stack(terms).mean()


PERCEPTUAL_LOSSES: Dict[str, Callable[[torch.Tensor, torch.Tensor], torch.Tensor]] = {
    'gradient': gradient_perceptual_loss,
}


def kl_to_standard_normal(posterior: LatentPosterior) -> torch.Tensor:
    """Mean over elements of KL(N(mean, exp(logvar)) || N(0, 1))."""
    mean, logvar = posterior.mean.double(), posterior.logvar.double()
    return (0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar)).mean()


def vae_loss(
    image: torch.Tensor,
    recon: torch.Tensor,
    posterior: LatentPosterior,
    gamma: float,
    beta_kl: float,
    perceptual: Union[str, Callable, None] = 'gradient',
) -> LossBreakdown:
    if image.shape != recon.shape:
        raise ShapeError(f"vae_loss: image {tuple(image.shape)} vs recon {tuple(recon.shape)}")
    rec = F.mse_loss(recon.double(), image.double())
    kl = kl_to_standard_normal(posterior)
    if gamma > 0 and perceptual is not None:
        perceptual_fn = PERCEPTUAL_LOSSES[perceptual] if isinstance(perceptual, str) else perceptual
        perc = perceptual_fn(recon.double(), image.double())
    else:
        perc = rec.new_zeros(())
    total = rec + gamma * perc + beta_kl * kl
    return LossBreakdown(rec=rec, perceptual=perc, kl=kl, total=total)


def estimate_scale(latents: Union[torch.Tensor, LatentBatch], min_count: int = MIN_SCALE_SAMPLES) -> float:
    """Reciprocal of the pooled standard deviation over every latent entry."""
    data = latents.data if isinstance(latents, LatentBatch) else latents
    if isinstance(latents, LatentBatch) and latents.scaled:
        raise ScaleError("estimate_scale needs unscaled latents")
    if data.shape[0] < min_count:
        raise ScaleError(f"Need at least {min_count} latents to estimate a scale, got {data.shape[0]}")
    flat = data.detach().double().flatten()
    std = (flat - flat.mean()).pow(2).mean().sqrt().item()
    if not math.isfinite(std) or std <= 0:
        raise ScaleError(f"Degenerate latents: pooled std is {std}")
    return 1.0 / std


def apply_scale(latent: LatentBatch, scale_factor: Optional[float]) -> LatentBatch:
    if scale_factor is None:
        raise ScaleError(f"Scale factor for modality {latent.modality} is not set; run compute-scales")
    if latent.scaled:
        raise ScaleError("Latent is already scaled")
    return latent.with_data(latent.data * scale_factor, scaled=True)


def remove_scale(latent: LatentBatch, scale_factor: Optional[float]) -> LatentBatch:
    if scale_factor is None:
        raise ScaleError(f"Scale factor for modality {latent.modality} is not set; run compute-scales")
    if not latent.scaled:
        raise ScaleError("Latent is not scaled")
    return latent.with_data(latent.data / scale_factor, scaled=False)
