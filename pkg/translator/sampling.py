"""
The translation pipeline.

    encode(src, mean) -> scale -> z_T ~ N(0, I)
    -> for (t, t_prev): predict x0, DDIM step
    -> calibrate once -> unscale -> decode(tgt)
"""

import logging
from dataclasses import dataclass
from typing import Union

import torch

from .backbone import build_conditioning, construct_input
from .diffusion import LatentBatch, ddim_step, sampling_timesteps
from .exceptions import ScheduleError
from .model import TranslationModel
from .registry import Direction, parse_direction

logger = logging.getLogger(__name__)

SPACINGS = ('even',)


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 250
    eta: float = 0.0
    seed: int = 0
    spacing: str = 'even'
    use_adapter: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ScheduleError(f"steps must be >= 1, got {self.steps}")
        if self.eta < 0:
            raise ScheduleError(f"eta must be >= 0, got {self.eta}")
        if self.spacing not in SPACINGS:
            raise ScheduleError(f"Unknown step spacing {self.spacing!r}")


@torch.no_grad()
def translate(
    src_image: torch.Tensor,
    direction: Union[Direction, str],
    model: TranslationModel,
    config: SampleConfig = SampleConfig(),
) -> torch.Tensor:
    """
    Translate one image (C, H, W) or a batch (B, C, H, W) along ``direction``.

    Zero-shot directions go through the same path as trained ones.
    """
    src, tgt = parse_direction(direction) if isinstance(direction, str) else direction
    direction = model.registry.resolve_direction(src, tgt)
    src_id, tgt_id = model.registry.id_of(src), model.registry.id_of(tgt)
    schedule = model.schedule
    steps = sampling_timesteps(schedule.T, config.steps)

    single = src_image.ndim == 3
    images = src_image.unsqueeze(0) if single else src_image
    parameter = next(model.backbone.parameters())
    images = images.to(parameter.device, parameter.dtype)

    z_src = model.encode_scaled(src, images)
    generator = torch.Generator().manual_seed(config.seed)
    noise = torch.randn(z_src.data.shape, generator=generator, dtype=torch.float64)
    z = LatentBatch(data=noise.to(parameter.device, parameter.dtype), modality=tgt_id, scaled=True)

    for t, t_prev in steps:
        c = build_conditioning(t, src_id, tgt_id, model.conditioner, batch=z.batch_size, T=schedule.T)
        x0 = model.backbone.predict_x0(construct_input(z, z_src), c, tgt_id)
        z = ddim_step(z, x0, t, t_prev, config.eta, schedule, generator)

    if config.use_adapter:
        z = model.adapters.calibrate(tgt_id, z)
    output = model.decode_scaled(tgt, z).clamp(-1.0, 1.0)
    logger.debug(f"Translated {images.shape[0]} image(s) along {direction} ({direction.status.value})")
    return output[0] if single else output
