"""
Shared denoiser backbone.

A transformer over patchified, channel-concatenated latents [z_t, z_src],
modulated block by block through AdaLN from one conditioning vector

    c = MLP(e_t + e_src + e_tgt)

and regressing the clean target latent directly (x0-prediction). Gates and the
output head start at zero, so a fresh backbone is the identity per block and
predicts exactly 0.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import LatentBatch
from .exceptions import DivergenceError, RegistryError, ScaleError, ShapeError
from .registry import LatentShapeContract

logger = logging.getLogger(__name__)

ConditioningVector = torch.Tensor

BACKBONE_PRESETS = {
    'desk': {'patch': 2, 'width': 128, 'depth': 6, 'heads': 4},
    'S/4': {'patch': 4, 'width': 384, 'depth': 12, 'heads': 6},
    'B/4': {'patch': 4, 'width': 768, 'depth': 12, 'heads': 12},
    'L/4': {'patch': 4, 'width': 1024, 'depth': 24, 'heads': 16},
}

EMBEDDING_MODES = ('learned', 'indicator')


@dataclass(frozen=True)
class BackboneConfig:
    latent_channels: int
    patch: int = 2
    width: int = 128
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    freq_dim: int = 256

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels

    @classmethod
    def from_preset(cls, name: str, latent_channels: int) -> 'BackboneConfig':
        try:
            return cls(latent_channels=latent_channels, **BACKBONE_PRESETS[name])
        except KeyError:
            raise ShapeError(f"Unknown backbone preset {name!r}; choose from {', '.join(BACKBONE_PRESETS)}") from None

    def validate(self, contract: LatentShapeContract) -> 'BackboneConfig':
        if contract.h % self.patch or contract.w % self.patch:
            raise ShapeError(f"Latent {contract.h}x{contract.w} is not divisible by patch size {self.patch}")
        if self.width % self.heads:
            raise ShapeError(f"Width {self.width} is not divisible by {self.heads} heads")
        if self.latent_channels != contract.c:
            raise ShapeError(f"Backbone expects {self.latent_channels} latent channels, contract has {contract.c}")
        return self

    def manifest_entries(self) -> Dict[str, str]:
        return {
            'backbone.patch': str(self.patch),
            'backbone.width': str(self.width),
            'backbone.depth': str(self.depth),
            'backbone.heads': str(self.heads),
            'backbone.mlp_ratio': str(self.mlp_ratio),
            'backbone.freq_dim': str(self.freq_dim),
        }


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.double()[:, None] * freqs[None]
    features = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        features = torch.cat([features, torch.zeros_like(features[:, :1])], dim=-1)
    return features


def sincos_position_features(width: int, grid: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine features, one row per patch in raster order."""
    quarter = width // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter)
    coords = torch.arange(grid, dtype=torch.float64)
    ys, xs = torch.meshgrid(coords, coords, indexing='ij')
    parts = []
    for axis in (ys.flatten(), xs.flatten()):
        angles = axis[:, None] * omega[None]
        parts += [torch.sin(angles), torch.cos(angles)]
    features = torch.cat(parts, dim=1)
    if features.shape[1] < width:
        features = F.pad(features, (0, width - features.shape[1]))
    return features


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, width),
            nn.SiLU(),
            nn.Linear(width, width),
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(timestep_features(t, self.freq_dim).to(dtype))


class ConditioningEmbedder(nn.Module):
    """
    Timestep embedder plus separate source and target tables.

    ``indicator`` mode freezes both tables at their seeded initial rows;
    ``learned`` trains them with the rest of the conditioner.
    """

    def __init__(self, n_modalities: int, width: int, freq_dim: int = 256, mode: str = 'learned', seed: int = 0):
        super().__init__()
        if mode not in EMBEDDING_MODES:
            raise ShapeError(f"Embedding mode must be one of {EMBEDDING_MODES}, got {mode!r}")
        self.mode = mode
        self.n_modalities = n_modalities
        self.width = width
        self.timestep = TimestepEmbedder(width, freq_dim)
        self.src_table = nn.Embedding(n_modalities, width)
        self.tgt_table = nn.Embedding(n_modalities, width)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.src_table.weight.copy_(torch.randn(n_modalities, width, generator=generator))
            self.tgt_table.weight.copy_(torch.randn(n_modalities, width, generator=generator))
        if mode == 'indicator':
            self.src_table.weight.requires_grad_(False)
            self.tgt_table.weight.requires_grad_(False)
        self.mlp = nn.Sequential(
            nn.Linear(width, width),
            nn.SiLU(),
            nn.Linear(width, width),
        )

    def forward(self, t: torch.Tensor, src: torch.Tensor, tgt: torch.Tensor) -> ConditioningVector:
        fused = self.timestep(t) + self.src_table(src) + self.tgt_table(tgt)
        return self.mlp(fused)


def _as_index(value: Union[int, torch.Tensor], batch: int, device) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        if value.ndim == 0:
            return value.long().expand(batch).to(device)
        return value.long().to(device)
    return torch.full((batch,), int(value), dtype=torch.long, device=device)


def build_conditioning(
    t: Union[int, torch.Tensor],
    src: Union[int, torch.Tensor],
    tgt: Union[int, torch.Tensor],
    embedder: ConditioningEmbedder,
    batch: int = 1,
    T: int = None,
) -> ConditioningVector:
    """Additive fusion of timestep, source and target embeddings followed by the 2-layer map."""
    device = embedder.src_table.weight.device
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        batch = t.shape[0]
    steps = _as_index(t, batch, device)
    src_ids = _as_index(src, batch, device)
    tgt_ids = _as_index(tgt, batch, device)
    for name, ids in (('src', src_ids), ('tgt', tgt_ids)):
        if ids.min() < 0 or ids.max() >= embedder.n_modalities:
            raise RegistryError(f"{name} modality id out of range 0..{embedder.n_modalities - 1}")
    if steps.min() < 0 or (T is not None and steps.max() > T):
        raise ShapeError(f"Timestep out of range 0..{T}")
    return embedder(steps, src_ids, tgt_ids)


def construct_input(z_t: LatentBatch, z_src: LatentBatch) -> torch.Tensor:
    """Channel concatenation [z_t, z_src]: noisy target channels first, source second."""
    if not (z_t.scaled and z_src.scaled):
        raise ScaleError("construct_input expects scaled latents on both sides")
    if z_t.data.shape != z_src.data.shape:
        raise ShapeError(
            f"construct_input: noisy {tuple(z_t.data.shape)} vs source {tuple(z_src.data.shape)}"
        )
    return torch.cat([z_t.data, z_src.data], dim=1)


def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x):
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, N, C))


class DiTBlock(nn.Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.width = width
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(approximate='tanh'),
            nn.Linear(mlp_ratio * width, width),
        )
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        nn.init.zeros_(self.modulation[-1].weight)
        nn.init.zeros_(self.modulation[-1].bias)

    def forward(self, x: torch.Tensor, c: ConditioningVector) -> torch.Tensor:
        return adaln_modulate(x, c, self)


def adaln_modulate(features: torch.Tensor, c: ConditioningVector, block: DiTBlock) -> torch.Tensor:
    """
    Run one block under AdaLN modulation.

    c is projected to (shift, scale, gate) for the attention and feed-forward
    sub-layers; normalised features become x * (1 + scale) + shift and each
    residual branch is multiplied by its gate.
    """
    if c.shape[-1] != block.width:
        raise ShapeError(f"Conditioning width {c.shape[-1]} does not match block width {block.width}")
    shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = block.modulation(c).chunk(6, dim=-1)
    x = features + gate_msa.unsqueeze(1) * block.attn(modulate(block.norm1(features), shift_msa, scale_msa))
    x = x + gate_mlp.unsqueeze(1) * block.mlp(modulate(block.norm2(x), shift_mlp, scale_mlp))
    return x


class FinalLayer(nn.Module):
    def __init__(self, width: int, patch: int, out_channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        self.linear = nn.Linear(width, patch * patch * out_channels)
        for layer in (self.modulation[-1], self.linear):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x, c):
        shift, scale = self.modulation(c).chunk(2, dim=-1)
        return self.linear(modulate(self.norm(x), shift, scale))


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig, contract: LatentShapeContract):
        super().__init__()
        self.config = config.validate(contract)
        self.contract = contract
        self.grid = contract.h // config.patch
        self.patch_embed = nn.Conv2d(config.in_channels, config.width, config.patch, stride=config.patch)
        self.register_buffer(
            'pos_features',
            sincos_position_features(config.width, self.grid).float().unsqueeze(0),
            persistent=False,
        )
        self.blocks = nn.ModuleList([
            DiTBlock(config.width, config.heads, config.mlp_ratio) for _ in range(config.depth)
        ])
        self.final = FinalLayer(config.width, config.patch, contract.c)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        B = tokens.shape[0]
        p, c, g = self.config.patch, self.contract.c, self.grid
        x = tokens.reshape(B, g, g, p, p, c)
        return torch.einsum('bhwpqc->bchpwq', x).reshape(B, c, g * p, g * p)

    def forward(self, inputs: torch.Tensor, c: ConditioningVector) -> torch.Tensor:
        expected = (self.config.in_channels, self.contract.h, self.contract.w)
        if tuple(inputs.shape[1:]) != expected:
            raise ShapeError(f"Backbone input must be (batch, {expected}), got {tuple(inputs.shape)}")
        x = self.patch_embed(inputs).flatten(2).transpose(1, 2)
        x = x + self.pos_features.to(x.dtype)
        for block in self.blocks:
            x = block(x, c)
        return self.unpatchify(self.final(x, c))

    def predict_x0(self, inputs: torch.Tensor, c: ConditioningVector, tgt: int) -> LatentBatch:
        z_hat = self(inputs, c)
        if not torch.isfinite(z_hat).all():
            raise DivergenceError("Backbone produced non-finite activations")
        return LatentBatch(data=z_hat, modality=int(tgt), scaled=True)


def count_parameters(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def analytic_parameter_count(config: BackboneConfig, n_modalities: int) -> Dict[str, int]:
    """Closed-form parameter counts for the backbone and the conditioner."""
    d, p, c = config.width, config.patch, config.latent_channels
    hidden = config.mlp_ratio * d
    block = (d * 3 * d + 3 * d) + (d * d + d) + (d * hidden + hidden + hidden * d + d) + (d * 6 * d + 6 * d)
    backbone = (
        config.in_channels * d * p * p + d
        + config.depth * block
        + (d * 2 * d + 2 * d) + (d * p * p * c + p * p * c)
    )
    conditioner = (
        config.freq_dim * d + d + d * d + d
        + 2 * n_modalities * d
        + 2 * (d * d + d)
    )
    return {'backbone': backbone, 'conditioner': conditioner}
