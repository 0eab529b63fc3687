"""
Checkpoint container.

A checkpoint is a directory:

    manifest.txt                 UTF-8 key=value lines, keys sorted
    <component>.<key>.f32        one weight array per file (see formats.py)

Components are ``codec_<NAME>``, ``conditioner``, ``backbone`` and
``adapters``. The manifest is written last, so a directory without one is an
interrupted save. Its sha256 is the checkpoint digest.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List

import torch

from .exceptions import CheckpointError, TranslatorError
from .formats import atomic_write, read_array, write_array
from .model import TranslationModel
from .registry import Direction, ModalityRegistry, format_direction, parse_direction

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.txt'
FORMAT_VERSION = 1


def sorted_directions(registry: ModalityRegistry, directions: Iterable[Direction]) -> List[Direction]:
    """Directions in (src_id, tgt_id) order."""
    return sorted(directions, key=lambda d: (registry.id_of(d[0]), registry.id_of(d[1])))


@dataclass
class Checkpoint:
    model: TranslationModel
    trained_directions: FrozenSet[Direction] = frozenset()
    step: int = 0
    seed: int = 0
    stage1_steps: Dict[str, int] = field(default_factory=dict)
    config: Dict[str, str] = field(default_factory=dict)

    @property
    def registry(self) -> ModalityRegistry:
        return self.model.registry

    def echo(self, command: str, options: Dict[str, str]):
        """Record a command's validated options under ``config.<command>.<key>``."""
        for key, value in options.items():
            self.config[f'{command}.{key}'] = value

    def manifest(self) -> Dict[str, str]:
        entries = {'format.version': str(FORMAT_VERSION)}
        entries.update(self.model.manifest_entries())
        entries['trained_directions'] = ','.join(
            format_direction(d) for d in sorted_directions(self.registry, self.trained_directions)
        )
        entries['training.step'] = str(self.step)
        entries['training.seed'] = str(self.seed)
        entries['training.optimizer'] = 'adam'
        for name, steps in self.stage1_steps.items():
            entries[f'stage1.steps.{name}'] = str(steps)
        for key, value in self.config.items():
            entries[f'config.{key}'] = value
        for component, tensors in self.arrays().items():
            for key, tensor in tensors.items():
                entries[f'array.{component}.{key}'] = ','.join(str(d) for d in tensor.shape)
        return entries

    def arrays(self) -> Dict[str, Dict[str, torch.Tensor]]:
        return {
            component: module.state_dict()
            for component, module in self.model.components().items()
        }


def render_manifest(entries: Dict[str, str]) -> bytes:
    lines = []
    for key in sorted(entries):
        value = str(entries[key])
        if '\n' in value or '=' in key:
            raise CheckpointError(f"Manifest entry {key!r} cannot be written as a key=value line")
        lines.append(f'{key}={value}\n')
    return ''.join(lines).encode('utf-8')


def parse_manifest(path: Path) -> Dict[str, str]:
    try:
        text = path.read_text(encoding='utf-8')
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no manifest; not a checkpoint directory") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: cannot read manifest ({exc})") from exc
    entries = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise CheckpointError(f"{path.name}:{number}: expected key=value, got {line!r}")
        entries[key] = value
    return entries


def save_checkpoint(checkpoint: Checkpoint, path) -> str:
    """Write the container and return the hex sha256 digest of its manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = checkpoint.manifest()
    expected = set()
    for component, tensors in checkpoint.arrays().items():
        for key, tensor in tensors.items():
            name = f'{component}.{key}.f32'
            expected.add(name)
            write_array(root / name, tensor.detach().cpu().float().numpy())
    for stale in root.glob('*.f32'):
        if stale.name not in expected:
            stale.unlink()
    payload = render_manifest(manifest)
    atomic_write(root / MANIFEST_NAME, payload)
    digest = hashlib.sha256(payload).hexdigest()
    logger.info(f"Saved checkpoint to {root} ({len(expected)} arrays, digest {digest[:12]})")
    return digest


def manifest_digest(path) -> str:
    try:
        return hashlib.sha256((Path(path) / MANIFEST_NAME).read_bytes()).hexdigest()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read manifest ({exc})") from exc


def _parse_shape(text: str):
    return tuple(int(d) for d in text.split(',')) if text else ()


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    entries = parse_manifest(root / MANIFEST_NAME)
    version = entries.get('format.version')
    if version != str(FORMAT_VERSION):
        raise CheckpointError(f"{MANIFEST_NAME}: unsupported format version {version!r}")

    try:
        model = TranslationModel.from_manifest(entries)
    except KeyError as exc:
        raise CheckpointError(f"{MANIFEST_NAME}: missing key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise CheckpointError(f"{MANIFEST_NAME}: {exc}") from exc

    listed = {key[len('array.'):] for key in entries if key.startswith('array.')}
    for component, module in model.components().items():
        state = module.state_dict()
        loaded = {}
        for key, tensor in state.items():
            name = f'{component}.{key}'
            if name not in listed:
                raise CheckpointError(f"{MANIFEST_NAME}: no array entry for {name}")
            listed.discard(name)
            shape = _parse_shape(entries[f'array.{name}'])
            if shape != tuple(tensor.shape):
                raise CheckpointError(
                    f"{name}.f32: manifest shape {shape} does not match the model's {tuple(tensor.shape)}"
                )
            array = read_array(root / f'{name}.f32')
            if array.shape != shape:
                raise CheckpointError(f"{name}.f32: file shape {array.shape} does not match manifest {shape}")
            loaded[key] = torch.from_numpy(array).to(tensor.dtype)
        module.load_state_dict(loaded)
    if listed:
        raise CheckpointError(f"{MANIFEST_NAME}: arrays not used by the model: {', '.join(sorted(listed))}")

    try:
        directions = [parse_direction(text) for text in entries.get('trained_directions', '').split(',') if text]
        trained = model.registry.validate_directions(directions)
    except TranslatorError as exc:
        raise CheckpointError(f"{MANIFEST_NAME}: trained_directions: {exc}") from exc

    stage1_steps = {
        key[len('stage1.steps.'):]: int(value)
        for key, value in entries.items() if key.startswith('stage1.steps.')
    }
    config = {key[len('config.'):]: value for key, value in entries.items() if key.startswith('config.')}
    checkpoint = Checkpoint(
        model=model,
        trained_directions=trained,
        step=int(entries.get('training.step', '0')),
        seed=int(entries.get('training.seed', '0')),
        stage1_steps=stage1_steps,
        config=config,
    )
    logger.info(f"Loaded checkpoint {root} ({len(trained)} trained directions, step {checkpoint.step})")
    return checkpoint
