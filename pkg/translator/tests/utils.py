"""Micro registries, models and datasets shared by the test modules."""

import shutil
import tempfile

import torch

from ..backbone import BackboneConfig
from ..checkpoint import Checkpoint
from ..diffusion import build_schedule
from ..registry import LatentShapeContract, ModalityRegistry, ModalitySpec
from ..synth import ingest_directory, make_paired_dataset
from ..model import TranslationModel

MICRO_MODALITIES = [('SAR', 1, 16), ('RGB', 3, 16), ('PAN', 1, 32)]


def micro_registry(freeze=True, scale=1.0):
    registry = ModalityRegistry(LatentShapeContract(2, 4, 4))
    for name, channels, size in MICRO_MODALITIES:
        registry.register(ModalitySpec(name, channels, size))
    if scale is not None:
        for name, _, _ in MICRO_MODALITIES:
            registry.set_scale_factor(name, scale)
    return registry.freeze() if freeze else registry


def micro_backbone_config(**overrides):
    options = dict(latent_channels=2, patch=2, width=16, depth=2, heads=2, mlp_ratio=2, freq_dim=16)
    options.update(overrides)
    return BackboneConfig(**options)


def micro_model(dtype=torch.float64, seed=0, scale=1.0, embedding_mode='learned', gamma=0.0, T=50):
    registry = micro_registry(scale=scale)
    model = TranslationModel(
        registry,
        build_schedule(T, 1e-4, 0.02),
        micro_backbone_config(),
        codec_options={name: {'hidden': 8, 'gamma': gamma} for name in registry.names},
        adapter_hidden=4,
        embedding_mode=embedding_mode,
        seed=seed,
    )
    return model.to(dtype)


def micro_checkpoint(**kwargs):
    return Checkpoint(model=micro_model(**kwargs))


@torch.no_grad()
def perturb(module, scale=0.1, seed=0):
    """Add seeded noise to every parameter so zero-initialised layers carry signal."""
    generator = torch.Generator().manual_seed(seed)
    for parameter in module.parameters():
        noise = torch.randn(parameter.shape, generator=generator, dtype=torch.float64)
        parameter.add_(scale * noise.to(parameter.dtype))
    return module


def central_difference_pairs(loss_fn, parameters, entries=50, eps=1e-6, seed=0):
    """
    (analytic, central difference) pairs for ``entries`` random scalar entries.

    ``loss_fn`` recomputes the loss from the current parameter values.
    """
    parameters = list(parameters)
    for parameter in parameters:
        parameter.grad = None
    loss_fn().backward()
    generator = torch.Generator().manual_seed(seed)
    pairs = []
    with torch.no_grad():
        for _ in range(entries):
            parameter = parameters[int(torch.randint(len(parameters), (1,), generator=generator))]
            flat = parameter.view(-1)
            index = int(torch.randint(flat.numel(), (1,), generator=generator))
            analytic = 0.0 if parameter.grad is None else float(parameter.grad.view(-1)[index])
            original = float(flat[index])
            flat[index] = original + eps
            plus = float(loss_fn())
            flat[index] = original - eps
            minus = float(loss_fn())
            flat[index] = original
            pairs.append((analytic, (plus - minus) / (2 * eps)))
    return pairs


def within_tolerance(pairs):
    """Pairs whose analytic and numeric gradients differ by more than 1e-4 relative."""
    return [(a, n) for a, n in pairs if abs(a - n) > 1e-4 * max(abs(a), abs(n)) + 1e-7]


class MicroDataset:
    """A temporary all-pairs dataset rendered for the micro registry."""

    def __init__(self, seeds=range(0, 6), registry=None):
        self.root = tempfile.mkdtemp(prefix='a2a-test-')
        self.registry = registry or micro_registry()
        self.manifest = make_paired_dataset(seeds, 'all-pairs', self.root, registry=self.registry)
        self.dataset = ingest_directory(self.root, self.registry)

    def cleanup(self):
        shutil.rmtree(self.root, ignore_errors=True)
