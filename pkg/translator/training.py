"""
Training

Stage I fits one codec per modality on its own images. Stage II freezes the
codecs and trains the conditioner, the shared backbone and the adapter bank
on paired latents with

    L_total = L_z0 + lambda * L_calib

Each Stage-II step draws one direction uniformly from the trained set and a
homogeneous batch for it. Losses are computed in double precision.
"""

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, replace
from typing import Dict, Iterable, List, Optional, Tuple

import torch
import torch.nn.functional as F
from rest_framework.renderers import JSONRenderer
from tqdm import tqdm

from .backbone import build_conditioning, construct_input
from .calibration import calibration_loss
from .checkpoint import Checkpoint, sorted_directions
from .codec import vae_loss
from .diffusion import LatentBatch, forward_diffuse, sample_timesteps
from .exceptions import DirectionError, DivergenceError, ScaleError, ShapeError, TranslatorError
from .metrics import psnr, to_pixel_scale
from .model import TranslationModel
from .registry import Direction, format_direction
from .synth import PairedDataset

logger = logging.getLogger(__name__)

PRECISIONS = {'float32': torch.float32, 'float64': torch.float64}


def seed_everything(seed: int, deterministic: bool = True):
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault('CUBLAS_WORKSPACE_CONFIG', ':4096:8')
    torch.use_deterministic_algorithms(deterministic)


@dataclass(frozen=True)
class TrainConfig:
    stage: int
    lr: float
    batch_size: int
    steps: int
    lambda_calib: float = 1.0
    directions: Tuple[Direction, ...] = ()
    seed: int = 0
    precision: str = 'float32'
    grad_clip: Optional[float] = 1.0
    detach_prediction: bool = True

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise TranslatorError(f"stage must be 1 or 2, got {self.stage}")
        if self.lambda_calib < 0:
            raise ScaleError(f"lambda must be >= 0, got {self.lambda_calib}")
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise TranslatorError(
                f"Need steps >= 0, batch_size >= 1 and lr > 0, got {self.steps}, {self.batch_size}, {self.lr}"
            )
        if self.precision not in PRECISIONS:
            raise TranslatorError(f"precision must be one of {', '.join(PRECISIONS)}")

    @property
    def dtype(self) -> torch.dtype:
        return PRECISIONS[self.precision]


@dataclass(frozen=True)
class StepReport:
    step: int
    direction: str
    l_z0: float
    l_calib: float
    l_total: float
    grad_norm: float
    wall_time: float

    def as_dict(self) -> Dict:
        return {'kind': 'stage2', **asdict(self)}


@dataclass(frozen=True)
class VaeStepReport:
    step: int
    modality: str
    rec: float
    perceptual: float
    kl: float
    total: float
    grad_norm: float
    wall_time: float

    def as_dict(self) -> Dict:
        return {'kind': 'stage1', **asdict(self)}


class StepReportWriter:
    """Streams reports as one JSON object per line."""

    def __init__(self, stream=None):
        self.stream = stream
        self.renderer = JSONRenderer()
        self.count = 0

    def write(self, report):
        self.count += 1
        if self.stream is None:
            return
        self.stream.write(self.renderer.render(report.as_dict()).decode('utf-8') + '\n')
        self.stream.flush()


def _check_finite(values: Dict[str, float], where: str):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise DivergenceError(f"{where}: non-finite {', '.join(f'{k}={v}' for k, v in bad.items())}")


def _clip(parameters: List[torch.nn.Parameter], max_norm: Optional[float]) -> float:
    return float(torch.nn.utils.clip_grad_norm_(parameters, max_norm if max_norm else float('inf')))


def reconstruction_psnr(model: TranslationModel, modality: str, images: torch.Tensor) -> float:
    """Mean round-trip PSNR (0-255 scale) with the posterior mean; exact reconstructions are skipped."""
    codec = model.codec(modality)
    with torch.no_grad():
        latent, _ = codec.encode(images.to(next(codec.parameters()).dtype), sample=False)
        recon = codec.decode(latent)
    values = [psnr(to_pixel_scale(a), to_pixel_scale(b)) for a, b in zip(recon.cpu().numpy(), images.numpy())]
    finite = [v for v in values if math.isfinite(v)]
    return sum(finite) / len(finite) if finite else math.inf


def train_vae(
    checkpoint: Checkpoint,
    modality: str,
    images: torch.Tensor,
    config: TrainConfig,
    writer: Optional[StepReportWriter] = None,
    progress: bool = False,
) -> Checkpoint:
    """Fit one codec in place for ``config.steps`` steps and return the updated checkpoint."""
    model = checkpoint.model
    codec = model.codec(modality)
    codec_config = codec.config
    expected = codec.native_shape
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise ShapeError(f"{modality} images must be (N, {', '.join(map(str, expected))}), got {tuple(images.shape)}")
    writer = writer or StepReportWriter()
    generator = torch.Generator().manual_seed(config.seed)
    parameters = list(codec.parameters())
    images = images.to(parameters[0].dtype)
    codec.requires_grad_(True)
    codec.train()
    optimizer = torch.optim.Adam(parameters, lr=config.lr)
    device = parameters[0].device
    started = time.monotonic()

    for step in tqdm(range(1, config.steps + 1), desc=f'stage1 {modality}', disable=not progress):
        index = torch.randint(images.shape[0], (config.batch_size,), generator=generator)
        batch = images[index].to(device)
        recon, posterior = codec(batch, noise_source=generator if device.type == 'cpu' else None)
        losses = vae_loss(batch, recon, posterior, codec_config.gamma, codec_config.beta_kl, codec_config.perceptual)
        values = losses.as_dict()
        _check_finite(values, f"stage1 {modality} step {step}")
        optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        grad_norm = _clip(parameters, config.grad_clip)
        _check_finite({'grad_norm': grad_norm}, f"stage1 {modality} step {step}")
        optimizer.step()
        writer.write(VaeStepReport(step=step, modality=modality, grad_norm=grad_norm,
                                   wall_time=time.monotonic() - started, **values))

    codec.eval()
    checkpoint.stage1_steps[modality] = checkpoint.stage1_steps.get(modality, 0) + config.steps
    if config.steps:
        score = reconstruction_psnr(model, modality, images[:64].cpu())
        logger.info(f"{modality} codec: {config.steps} steps, round-trip PSNR {score:.2f} dB")
    return checkpoint


@dataclass(frozen=True)
class Stage2Losses:
    l_z0: torch.Tensor
    l_calib: torch.Tensor
    total: torch.Tensor
    z_hat: LatentBatch


def stage2_objective(
    model: TranslationModel,
    direction: Direction,
    z_src: LatentBatch,
    z_tgt: LatentBatch,
    t: torch.Tensor,
    eps: torch.Tensor,
    lambda_calib: float,
    detach_prediction: bool = True,
) -> Stage2Losses:
    """The composite objective on already scaled latents; the calibration term reuses the same prediction."""
    if not (z_src.scaled and z_tgt.scaled):
        raise ScaleError("Stage II expects scaled latents")
    src_id = model.registry.id_of(direction[0])
    tgt_id = model.registry.id_of(direction[1])
    z_t = forward_diffuse(z_tgt, t, eps, model.schedule)
    inputs = construct_input(z_t, z_src)
    c = build_conditioning(t, src_id, tgt_id, model.conditioner, T=model.schedule.T)
    z_hat = model.backbone.predict_x0(inputs, c, tgt_id)
    l_z0 = F.mse_loss(z_hat.data.double(), z_tgt.data.double())
    l_calib = calibration_loss(model.adapters, z_hat, z_tgt, tgt_id, detach_prediction=detach_prediction)
    return Stage2Losses(l_z0=l_z0, l_calib=l_calib, total=l_z0 + lambda_calib * l_calib, z_hat=z_hat)


@dataclass
class Stage2State:
    model: TranslationModel
    optimizer: torch.optim.Optimizer
    directions: frozenset
    step: int = 0
    grad_clip: Optional[float] = 1.0
    detach_prediction: bool = True

    @classmethod
    def create(cls, model: TranslationModel, directions: Iterable[Direction], lr: float,
               grad_clip: Optional[float] = 1.0, detach_prediction: bool = True, step: int = 0) -> 'Stage2State':
        model.freeze_codecs()
        directions = model.registry.validate_directions(directions)
        if not directions:
            raise DirectionError("Stage II needs at least one direction")
        for name in {name for direction in directions for name in direction}:
            if model.scale_factor(name) is None:
                raise ScaleError(f"Scale factor for {name} is not set; run compute-scales first")
        optimizer = torch.optim.Adam(model.stage2_parameters(), lr=lr, weight_decay=0.0)
        return cls(model, optimizer, directions, step, grad_clip, detach_prediction)


def train_stage2_step(
    state: Stage2State,
    direction: Direction,
    x_src: torch.Tensor,
    x_tgt: torch.Tensor,
    lambda_calib: float,
    noise_source: Optional[torch.Generator] = None,
) -> StepReport:
    """One optimisation step on a homogeneous batch for ``direction``."""
    if direction not in state.directions:
        raise DirectionError(f"{format_direction(direction)} is not in the trained direction set")
    model = state.model
    started = time.monotonic()
    device = next(model.backbone.parameters()).device
    dtype = next(model.backbone.parameters()).dtype
    with torch.no_grad():
        z_src = model.encode_scaled(direction[0], x_src.to(device, dtype))
        z_tgt = model.encode_scaled(direction[1], x_tgt.to(device, dtype))
    t = sample_timesteps(z_tgt.batch_size, model.schedule, noise_source).to(device)
    eps = torch.randn(z_tgt.data.shape, generator=noise_source, dtype=dtype).to(device)

    losses = stage2_objective(model, direction, z_src, z_tgt, t, eps, lambda_calib, state.detach_prediction)
    values = {'l_z0': float(losses.l_z0), 'l_calib': float(losses.l_calib), 'l_total': float(losses.total)}
    _check_finite(values, f"stage2 step {state.step + 1}")

    parameters = state.model.stage2_parameters()
    state.optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    grad_norm = _clip(parameters, state.grad_clip)
    _check_finite({'grad_norm': grad_norm}, f"stage2 step {state.step + 1}")
    state.optimizer.step()
    state.step += 1
    return StepReport(step=state.step, direction=format_direction(direction), grad_norm=grad_norm,
                      wall_time=time.monotonic() - started, **values)


class Stage2Trainer:
    """
    Drives Stage II over a paired dataset.

    The trained set is the union of the checkpoint's directions and
    ``config.directions``; with ``from_scratch`` the stage-II modules are
    re-initialised and the checkpoint's directions are forgotten.
    """

    def __init__(
        self,
        checkpoint: Checkpoint,
        dataset: PairedDataset,
        config: TrainConfig,
        writer: Optional[StepReportWriter] = None,
        from_scratch: bool = False,
    ):
        if config.stage != 2:
            raise TranslatorError("Stage2Trainer needs a stage 2 config")
        self.checkpoint = checkpoint
        self.dataset = dataset
        self.config = config
        self.writer = writer or StepReportWriter()
        model = checkpoint.model
        if from_scratch:
            model.reset_stage2(config.seed)
            checkpoint.trained_directions = frozenset()
            checkpoint.step = 0
        directions = set(checkpoint.trained_directions) | set(config.directions)
        self.state = Stage2State.create(
            model, directions, config.lr, config.grad_clip, config.detach_prediction, step=checkpoint.step
        )
        missing = [d for d in self.state.directions if not dataset.pairs(d)]
        if missing:
            raise DirectionError(
                f"{dataset.root} has no pairs for {', '.join(format_direction(d) for d in missing)}"
            )
        self.order = sorted_directions(model.registry, self.state.directions)
        self.generator = torch.Generator().manual_seed(config.seed)
        checkpoint.trained_directions = self.state.directions
        checkpoint.seed = config.seed
        logger.info(f"Stage II over {len(self.order)} directions from step {self.state.step}")

    def step(self) -> StepReport:
        direction = self.order[int(torch.randint(len(self.order), (1,), generator=self.generator))]
        x_src, x_tgt = self.dataset.sample_batch(direction, self.config.batch_size, self.generator)
        report = train_stage2_step(self.state, direction, x_src, x_tgt, self.config.lambda_calib, self.generator)
        self.writer.write(report)
        return report

    def run(self, steps: Optional[int] = None, progress: bool = False) -> Checkpoint:
        steps = self.config.steps if steps is None else steps
        model = self.checkpoint.model
        model.backbone.train()
        last = None
        for _ in tqdm(range(steps), desc='stage2', disable=not progress):
            last = self.step()
        model.backbone.eval()
        self.checkpoint.step = self.state.step
        if last is not None:
            logger.info(f"Stage II reached step {last.step}: L_total {last.l_total:.5f}")
        return self.checkpoint


def extend_directions(
    checkpoint: Checkpoint,
    new_directions: Iterable[Direction],
    dataset: PairedDataset,
    config: TrainConfig,
    writer: Optional[StepReportWriter] = None,
) -> Stage2Trainer:
    """Resume from the checkpoint's weights with the union of old and new directions."""
    new_directions = checkpoint.registry.validate_directions(new_directions)
    merged = tuple(sorted_directions(checkpoint.registry, set(config.directions) | set(new_directions)))
    return Stage2Trainer(checkpoint, dataset, replace(config, directions=merged), writer)


def train_from_scratch(
    checkpoint: Checkpoint,
    directions: Iterable[Direction],
    dataset: PairedDataset,
    config: TrainConfig,
    writer: Optional[StepReportWriter] = None,
) -> Stage2Trainer:
    directions = tuple(sorted_directions(checkpoint.registry, checkpoint.registry.validate_directions(directions)))
    return Stage2Trainer(checkpoint, dataset, replace(config, directions=directions), writer, from_scratch=True)
