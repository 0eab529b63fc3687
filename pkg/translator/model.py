"""
The assembled translator: per-modality codecs, the conditioning embedder, the
shared backbone and the adapter bank, bound to one frozen registry and one
noise schedule.
"""

import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig, ConditioningEmbedder, count_parameters
from .calibration import init_adapter_bank
from .codec import MIN_SCALE_SAMPLES, CodecConfig, ModalityCodec, apply_scale, estimate_scale, remove_scale
from .conf import a2a_settings, codec_options, get_preset
from .diffusion import LatentBatch, NoiseSchedule, build_schedule
from .exceptions import RegistryError
from .registry import ModalityRegistry, build_default_registry

logger = logging.getLogger(__name__)

CODEC_OPTION_KEYS = ('hidden', 'gamma', 'beta_kl', 'perceptual')


class TranslationModel(nn.Module):
    def __init__(
        self,
        registry: ModalityRegistry,
        schedule: NoiseSchedule,
        backbone_config: BackboneConfig,
        codec_options: Optional[Dict[str, dict]] = None,
        adapter_hidden: Optional[int] = None,
        embedding_mode: str = 'learned',
        seed: int = 0,
    ):
        super().__init__()
        if not registry.frozen:
            raise RegistryError("TranslationModel needs a frozen registry")
        self.registry = registry
        self.schedule = schedule
        self.backbone_config = backbone_config
        self.embedding_mode = embedding_mode
        self.adapter_hidden = adapter_hidden
        self.seed = seed
        codec_options = codec_options or {}

        self.codec_configs = OrderedDict(
            (spec.name, CodecConfig.for_modality(
                spec, modality_id, registry.contract, **codec_options.get(spec.name, {})
            ))
            for modality_id, spec in enumerate(registry)
        )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.codecs = nn.ModuleDict({
                name: ModalityCodec(config) for name, config in self.codec_configs.items()
            })
        self._build_stage2(seed)

    def _build_stage2(self, seed: int):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.conditioner = ConditioningEmbedder(
                len(self.registry),
                self.backbone_config.width,
                freq_dim=self.backbone_config.freq_dim,
                mode=self.embedding_mode,
                seed=seed,
            )
            self.backbone = Backbone(self.backbone_config, self.registry.contract)
            self.adapters = init_adapter_bank(self.registry, hidden=self.adapter_hidden)

    def reset_stage2(self, seed: Optional[int] = None):
        """Fresh conditioner, backbone and adapters on the old ones' device and dtype; codecs are kept."""
        reference = next(self.backbone.parameters())
        self._build_stage2(self.seed if seed is None else seed)
        for module in (self.conditioner, self.backbone, self.adapters):
            module.to(reference.device, reference.dtype)

    def codec(self, name: str) -> ModalityCodec:
        self.registry.id_of(name)
        return self.codecs[name]

    def scale_factor(self, name: str) -> Optional[float]:
        return self.registry.get(name).scale_factor

    def encode_scaled(self, name: str, images: torch.Tensor) -> LatentBatch:
        latent, _ = self.codec(name).encode(images, sample=False)
        return apply_scale(latent, self.scale_factor(name))

    def decode_scaled(self, name: str, latent: LatentBatch) -> torch.Tensor:
        return self.codec(name).decode(remove_scale(latent, self.scale_factor(name)))

    @torch.no_grad()
    def estimate_scale_factor(self, name: str, images: torch.Tensor, batch_size: int = 64,
                              min_count: int = MIN_SCALE_SAMPLES) -> float:
        """Scale factor from the posterior means of ``images``; does not store it."""
        codec = self.codec(name)
        parameter = next(codec.parameters())
        latents = [
            codec.encode(chunk.to(parameter.device, parameter.dtype), sample=False)[0].data
            for chunk in images.split(batch_size)
        ]
        return estimate_scale(torch.cat(latents), min_count)

    def freeze_codecs(self) -> 'TranslationModel':
        for codec in self.codecs.values():
            codec.requires_grad_(False)
            codec.eval()
        return self

    def stage2_parameters(self) -> List[nn.Parameter]:
        params = []
        for module in (self.conditioner, self.backbone, self.adapters):
            params += [p for p in module.parameters() if p.requires_grad]
        return params

    def components(self) -> 'OrderedDict[str, nn.Module]':
        parts = OrderedDict((f'codec_{name}', codec) for name, codec in self.codecs.items())
        parts['conditioner'] = self.conditioner
        parts['backbone'] = self.backbone
        parts['adapters'] = self.adapters
        return parts

    def parameter_breakdown(self) -> List[Tuple[str, int]]:
        """Rows of (component, parameter count): adapters, codecs, shared subtotal, then totals."""
        rows = [(f'Residual Adapter (x{len(self.adapters)})', count_parameters(self.adapters))]
        codec_total = 0
        for name, codec in self.codecs.items():
            count = count_parameters(codec)
            codec_total += count
            rows.append((f'VAE ({name})', count))
        shared = codec_total + count_parameters(self.adapters)
        rows.append(('Shared Total (VAEs + Adapters)', shared))
        rows.append(('Conditioner', count_parameters(self.conditioner)))
        rows.append(('Backbone', count_parameters(self.backbone)))
        rows.append(('Total Parameters', count_parameters(self)))
        trainable = sum(p.numel() for p in self.stage2_parameters())
        rows.append(('Trainable Parameters', trainable))
        return rows

    def manifest_entries(self) -> Dict[str, str]:
        entries = {}
        entries.update(self.registry.snapshot())
        entries.update(self.schedule.manifest_entries())
        entries.update(self.backbone_config.manifest_entries())
        entries['backbone.embedding_mode'] = self.embedding_mode
        entries['adapters.hidden'] = str(self.adapters.hidden)
        entries['model.seed'] = str(self.seed)
        for name, config in self.codec_configs.items():
            for key in CODEC_OPTION_KEYS:
                value = getattr(config, key)
                entries[f'codec.{name}.{key}'] = repr(value) if isinstance(value, float) else str(value)
        for component, module in self.components().items():
            entries[f'params.{component}'] = str(count_parameters(module))
        entries['params.total'] = str(count_parameters(self))
        entries['params.trainable'] = str(sum(p.numel() for p in self.stage2_parameters()))
        return entries

    @classmethod
    def from_manifest(cls, entries: Dict[str, str]) -> 'TranslationModel':
        registry = ModalityRegistry.from_snapshot(entries)
        schedule = build_schedule(
            int(entries['schedule.T']),
            float(entries['schedule.beta_start']),
            float(entries['schedule.beta_end']),
        )
        backbone_config = BackboneConfig(
            latent_channels=registry.contract.c,
            patch=int(entries['backbone.patch']),
            width=int(entries['backbone.width']),
            depth=int(entries['backbone.depth']),
            heads=int(entries['backbone.heads']),
            mlp_ratio=int(entries['backbone.mlp_ratio']),
            freq_dim=int(entries['backbone.freq_dim']),
        )
        codec_options = {}
        for name in registry.names:
            codec_options[name] = {
                'hidden': int(entries[f'codec.{name}.hidden']),
                'gamma': float(entries[f'codec.{name}.gamma']),
                'beta_kl': float(entries[f'codec.{name}.beta_kl']),
                'perceptual': entries[f'codec.{name}.perceptual'],
            }
        return cls(
            registry,
            schedule,
            backbone_config,
            codec_options=codec_options,
            adapter_hidden=int(entries['adapters.hidden']),
            embedding_mode=entries['backbone.embedding_mode'],
            seed=int(entries['model.seed']),
        )


def build_model(
    preset: Optional[str] = None,
    backbone: Optional[str] = None,
    embedding_mode: Optional[str] = None,
    seed: Optional[int] = None,
    codec_hidden: Optional[int] = None,
    adapter_hidden: Optional[int] = None,
    gamma: Optional[float] = None,
    beta_kl: Optional[float] = None,
    perceptual: Optional[str] = None,
) -> TranslationModel:
    """Fresh model for a named preset; unset arguments fall back to the translator settings."""
    preset = preset or a2a_settings.PRESET
    layout = get_preset(preset)
    registry = build_default_registry(layout['registry'])
    schedule_settings = a2a_settings.SCHEDULE
    schedule = build_schedule(
        schedule_settings['T'], schedule_settings['BETA_START'], schedule_settings['BETA_END']
    )
    if backbone is None:
        backbone = a2a_settings.BACKBONE if preset == a2a_settings.PRESET else layout['backbone']
    backbone_config = BackboneConfig.from_preset(backbone, registry.contract.c)
    options = codec_options(preset, registry.names, codec_hidden, gamma, beta_kl, perceptual)
    logger.info(f"Building {preset} model with backbone {backbone_config.width}x{backbone_config.depth}")
    return TranslationModel(
        registry,
        schedule,
        backbone_config,
        codec_options=options,
        adapter_hidden=adapter_hidden,
        embedding_mode=embedding_mode or a2a_settings.EMBEDDING_MODE,
        seed=a2a_settings.SEED if seed is None else seed,
    )
