"""
Residual calibration adapters.

One compact convolutional branch per target modality corrects the systematic
mismatch between the backbone's predicted clean latent and the target
decoder's manifold:

    z' = z_hat + A_tgt(z_hat)

Each branch ends in a zero-initialised projection, so a fresh bank is an
exact no-op. The calibration loss sees the prediction through a stop-gradient
and only ever trains the adapter.
"""

import logging
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import LatentBatch
from .exceptions import RegistryError, ScaleError, ShapeError
from .registry import LatentShapeContract, ModalityRegistry

logger = logging.getLogger(__name__)


class AdapterBranch(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.conv_in = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv_out = nn.Conv2d(hidden, channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x):
        return self.conv_out(F.silu(self.conv_in(x)))


class AdapterBank(nn.Module):
    """Target-indexed adapter branches, one per registered modality id."""

    def __init__(self, n_modalities: int, contract: LatentShapeContract, hidden: Optional[int] = None):
        super().__init__()
        self.contract = contract
        self.hidden = hidden or 2 * contract.c
        self.branches = nn.ModuleList([
            AdapterBranch(contract.c, self.hidden) for _ in range(n_modalities)
        ])

    def __len__(self):
        return len(self.branches)

    def branch(self, tgt: int) -> AdapterBranch:
        if not 0 <= tgt < len(self.branches):
            raise RegistryError(f"Target id {tgt} out of range 0..{len(self.branches) - 1}")
        return self.branches[tgt]

    def calibrate(self, tgt: int, z_hat: LatentBatch) -> LatentBatch:
        """Residual correction with exactly one branch consulted."""
        branch = self.branch(tgt)
        if not z_hat.scaled:
            raise ScaleError("calibrate expects a scaled latent")
        if z_hat.modality != tgt:
            raise ShapeError(f"Latent is tagged modality {z_hat.modality}, calibrating for {tgt}")
        z_hat.check_contract(self.contract)
        return z_hat.with_data(z_hat.data + branch(z_hat.data))


def init_adapter_bank(registry: ModalityRegistry, contract: LatentShapeContract = None, hidden: Optional[int] = None) -> AdapterBank:
    if not registry.frozen:
        raise RegistryError("Freeze the registry before building adapters; ids index the branches")
    return AdapterBank(len(registry), contract or registry.contract, hidden)


def calibration_loss(
    bank: AdapterBank,
    z_hat: LatentBatch,
    z_j: LatentBatch,
    tgt: int,
    detach_prediction: bool = True,
) -> torch.Tensor:
    """
    Mean squared error of (sg(z_hat) + A_tgt(sg(z_hat))) against the target latent.

    ``detach_prediction=False`` keeps the gradient on the leading z_hat term,
    reproducing the literal equation for ablation.
    """
    if z_hat.data.shape != z_j.data.shape:
        raise ShapeError(f"calibration_loss: {tuple(z_hat.data.shape)} vs {tuple(z_j.data.shape)}")
    frozen = z_hat.data.detach()
    leading = frozen if detach_prediction else z_hat.data
    calibrated = leading + bank.branch(tgt)(frozen)
    return F.mse_loss(calibrated.double(), z_j.data.double())
