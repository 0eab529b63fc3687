"""
Synthetic paired data and dataset ingestion.

A scene is a stack of smooth feature maps with a handful of sharp geometric
shapes stamped across every feature. Each modality renders the same scene
through its own mix of features, resolution and noise, so all renderings of
one scene are spatially aligned while their pixel statistics differ.

Dataset layout on disk:

    <root>/<MODALITY>/<scene_id>.img
    <root>/pairs.tsv        modA_path <TAB> modB_path <TAB> pair_tag, no header
    <root>/dataset.txt      key=value description (seed range, protocol)
"""

import functools
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from skimage.draw import disk, polygon
from skimage.measure import block_reduce
from skimage.transform import resize
from tqdm import tqdm

from .exceptions import DatasetError, DirectionError
from .formats import atomic_write, read_img, read_img_header, write_img
from .registry import Direction, ModalityRegistry, ModalitySpec, build_default_registry, format_direction, protocol_pairs

logger = logging.getLogger(__name__)

N_FEATURES = 6
OCTAVES = ((4, 1.0), (8, 0.5), (16, 0.25))
BACKGROUND_AMPLITUDE = 0.3
SCENE_STREAM = 0x5CE7E

PAIRS_FILE = 'pairs.tsv'
DESCRIPTION_FILE = 'dataset.txt'
# decoded images kept per dataset
IMAGE_CACHE_SIZE = 4096

# Rows are output channels, columns scene features. Every weight is positive so
# a shape raises or lowers all channels together and its edges survive the mix.
RGB_MIX = np.array([
    [0.50, 0.20, 0.10, 0.10, 0.05, 0.05],
    [0.20, 0.50, 0.10, 0.10, 0.05, 0.05],
    [0.10, 0.20, 0.50, 0.10, 0.05, 0.05],
])
LUMINANCE = RGB_MIX.mean(axis=0, keepdims=True)
NIR_MIX = np.array([[0.05, 0.05, 0.05, 0.70, 0.10, 0.05]])
MS_MIX = np.full((6, N_FEATURES), 0.09) + 0.46 * np.eye(6, N_FEATURES)
SAR_MIX = np.array([[0.10, 0.10, 0.10, 0.10, 0.30, 0.30]])
SPECKLE_LOOKS = 4


@dataclass(frozen=True)
class SceneField:
    seed: int
    features: np.ndarray

    @property
    def size(self) -> Tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]


def _value_noise(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    field = np.zeros((N_FEATURES, height, width))
    total = 0.0
    for cells, weight in OCTAVES:
        lattice = rng.uniform(-1.0, 1.0, size=(N_FEATURES, cells + 1, cells + 1))
        field += weight * resize(lattice, (N_FEATURES, height, width), order=1, mode='edge', anti_aliasing=False)
        total += weight
    return field * (BACKGROUND_AMPLITUDE / total)


def _shape_mask(rng: np.random.Generator, height: int, width: int):
    side = min(height, width)
    cy, cx = rng.uniform(0.15, 0.85) * height, rng.uniform(0.15, 0.85) * width
    kind = rng.integers(3)
    if kind == 0:
        return disk((cy, cx), rng.uniform(0.1, 0.22) * side, shape=(height, width))
    if kind == 1:
        n = rng.integers(3, 7)
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        radii = rng.uniform(0.12, 0.3, n) * side
        return polygon(cy + radii * np.sin(angles), cx + radii * np.cos(angles), shape=(height, width))
    # a straight road crossing the scene
    angle = rng.uniform(0, np.pi)
    dy, dx = np.sin(angle), np.cos(angle)
    half = max(1.5, 0.05 * side)
    reach = 2 * side
    ends = np.array([[cy - reach * dy, cx - reach * dx], [cy + reach * dy, cx + reach * dx]])
    offset = np.array([-dx, dy]) * half
    corners = np.array([ends[0] + offset, ends[1] + offset, ends[1] - offset, ends[0] - offset])
    return polygon(corners[:, 0], corners[:, 1], shape=(height, width))


def generate_scene(seed: int, height: int, width: int) -> SceneField:
    """Fixed-octave value noise composited with 2 to 6 seeded shapes, clipped to [-1, 1]."""
    if height < 16 or width < 16:
        raise DatasetError(f"Scenes need at least 16x16 pixels, got {height}x{width}")
    rng = np.random.default_rng([seed, SCENE_STREAM])
    features = _value_noise(rng, height, width)
    for _ in range(rng.integers(2, 7)):
        rows, cols = _shape_mask(rng, height, width)
        level = rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 0.9)
        values = level + rng.normal(0.0, 0.05, size=N_FEATURES)
        features[:, rows, cols] = values[:, None]
    return SceneField(seed=seed, features=np.clip(features, -1.0, 1.0).astype(np.float32))


def resample(features: np.ndarray, size: int) -> np.ndarray:
    """Bring a (k, H, W) stack to size x size: block means when shrinking by an integer factor."""
    height = features.shape[1]
    if height == size:
        return features.astype(np.float64)
    if height > size and height % size == 0:
        factor = height // size
        return block_reduce(features.astype(np.float64), (1, factor, factor), np.mean)
    return resize(features.astype(np.float64), (features.shape[0], size, size), order=1,
                  mode='edge', anti_aliasing=height > size)


def _mix(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    return np.einsum('ck,khw->chw', weights, features)


def _speckle_rng(scene: SceneField, name: str) -> np.random.Generator:
    return np.random.default_rng([scene.seed, zlib.crc32(name.encode('utf-8'))])


def render_rgb(features, scene, spec):
    return 0.5 * _mix(RGB_MIX, features) - 0.2


def render_nir(features, scene, spec):
    return 0.45 * np.tanh(1.2 * _mix(NIR_MIX, features)) + 0.5


def render_ms(features, scene, spec):
    return 0.5 * _mix(MS_MIX, features) + 0.3


def render_pan(features, scene, spec):
    return 0.55 * _mix(LUMINANCE, features) + 0.05


def render_sar(features, scene, spec):
    """Log-compressed intensity under multiplicative gamma speckle."""
    amplitude = np.maximum(1.0 + _mix(SAR_MIX, features), 0.05)
    speckle = _speckle_rng(scene, spec.name).gamma(SPECKLE_LOOKS, 1.0 / SPECKLE_LOOKS, size=amplitude.shape)
    return 0.3 * np.log(amplitude ** 2 * speckle) - 0.4


def render_generic(features, scene, spec):
    weights = np.random.default_rng(zlib.crc32(spec.name.encode('utf-8'))).dirichlet(
        np.ones(N_FEATURES), size=spec.channels
    )
    return 0.5 * _mix(weights, features)


Renderer = Callable[[np.ndarray, SceneField, ModalitySpec], np.ndarray]

# name -> (channels, renderer)
RENDERERS: Dict[str, Tuple[int, Renderer]] = {
    'SAR': (1, render_sar),
    'RGB': (3, render_rgb),
    'MS': (6, render_ms),
    'NIR': (1, render_nir),
    'PAN': (1, render_pan),
}


def render_modality(scene: SceneField, modality: Union[str, ModalitySpec],
                    registry: Optional[ModalityRegistry] = None) -> np.ndarray:
    """Render ``scene`` at the modality's native shape with values in [-1, 1]."""
    spec = modality if isinstance(modality, ModalitySpec) else (registry or build_default_registry()).get(modality)
    channels, renderer = RENDERERS.get(spec.name, (spec.channels, render_generic))
    if channels != spec.channels:
        renderer = render_generic
    features = resample(scene.features, spec.native_size)
    image = renderer(features, scene, spec)
    return np.clip(image, -1.0, 1.0).astype(np.float32)


def scene_id(seed: int) -> str:
    return f'{seed:06d}'


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    protocol: str
    seeds: range
    scenes: int
    rows: int
    modalities: Tuple[str, ...]

    def entries(self) -> Dict[str, str]:
        return {
            'protocol': self.protocol,
            'seeds': f'{self.seeds.start}..{self.seeds.stop - 1}',
            'scenes': str(self.scenes),
            'rows': str(self.rows),
            'modalities': ','.join(self.modalities),
        }


def as_seed_range(seeds: Sequence[int]) -> range:
    """Seeds as a step-1 range; lists must already be consecutive and ascending."""
    if isinstance(seeds, range):
        if seeds.step != 1:
            raise DatasetError(f"Seed range must have step 1, got {seeds}")
        result = seeds
    else:
        seeds = [int(seed) for seed in seeds]
        result = range(seeds[0], seeds[-1] + 1) if seeds else range(0)
        if seeds != list(result):
            raise DatasetError(f"Seeds must form a consecutive ascending run, got {seeds}")
    if len(result) == 0:
        raise DatasetError("Seed range is empty")
    return result


def make_paired_dataset(
    seeds: Sequence[int],
    protocol: str,
    out_dir,
    registry: Optional[ModalityRegistry] = None,
    workers: int = 1,
    progress: bool = False,
) -> DatasetManifest:
    registry = registry or build_default_registry()
    pairs = protocol_pairs(protocol, registry)
    seeds = as_seed_range(seeds)
    needed = [name for name in registry.names if any(name in pair for pair in pairs)]
    size = max(registry.get(name).native_size for name in needed)
    root = Path(out_dir)

    def write_scene(seed):
        scene = generate_scene(seed, size, size)
        for name in needed:
            write_img(root / name / f'{scene_id(seed)}.img', render_modality(scene, registry.get(name)))

    bar = tqdm(total=len(seeds), desc='scenes', disable=not progress)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for _ in pool.map(write_scene, seeds):
                bar.update()
    else:
        for seed in seeds:
            write_scene(seed)
            bar.update()
    bar.close()

    lines = []
    for seed in seeds:
        sid = scene_id(seed)
        for a, b in pairs:
            lines.append(f'{a}/{sid}.img\t{b}/{sid}.img\t{a}-{b}\n')
    atomic_write(root / PAIRS_FILE, ''.join(lines).encode('utf-8'))

    manifest = DatasetManifest(root, protocol, seeds, len(seeds), len(lines), tuple(needed))
    description = ''.join(f'{key}={value}\n' for key, value in sorted(manifest.entries().items()))
    atomic_write(root / DESCRIPTION_FILE, description.encode('utf-8'))
    logger.info(f"Wrote {manifest.scenes} scenes and {manifest.rows} pairs to {root}")
    return manifest


class PairRow(NamedTuple):
    a_path: str
    b_path: str
    a: str
    b: str


class PairedDataset:
    """
    Validated view of a paired directory.

    Pairs serve both directions: a row tagged ``SAR-RGB`` supervises SAR:RGB
    and RGB:SAR. Images are read lazily; the most recently used
    ``cache_size`` of them stay in memory.
    """

    def __init__(self, root: Path, registry: ModalityRegistry, rows: List[PairRow],
                 cache_size: int = IMAGE_CACHE_SIZE):
        self.root = Path(root)
        self.registry = registry
        self.rows = rows
        self.load = functools.lru_cache(maxsize=cache_size)(self._read)

    def __len__(self):
        return len(self.rows)

    @property
    def directions(self) -> List[Direction]:
        found = set()
        for row in self.rows:
            found.add((row.a, row.b))
            found.add((row.b, row.a))
        return sorted(found, key=lambda d: (self.registry.id_of(d[0]), self.registry.id_of(d[1])))

    def pairs(self, direction: Direction) -> List[Tuple[str, str]]:
        """(source path, target path) for every row covering ``direction``, in file order."""
        src, tgt = direction
        found = []
        for row in self.rows:
            if (row.a, row.b) == (src, tgt):
                found.append((row.a_path, row.b_path))
            elif (row.b, row.a) == (src, tgt):
                found.append((row.b_path, row.a_path))
        return found

    def shuffled_pairs(self, direction: Direction, seed: int) -> List[Tuple[str, str]]:
        pairs = self.pairs(direction)
        order = np.random.default_rng(seed).permutation(len(pairs))
        return [pairs[i] for i in order]

    def _read(self, relative: str) -> np.ndarray:
        return read_img(self.root / relative)

    def iter_pairs(self, direction: Direction, shuffle_seed: Optional[int] = None,
                   limit: Optional[int] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        pairs = self.pairs(direction) if shuffle_seed is None else self.shuffled_pairs(direction, shuffle_seed)
        for src_path, tgt_path in pairs[:limit]:
            yield self.load(src_path), self.load(tgt_path)

    def files(self, modality: str) -> List[str]:
        seen = {}
        for row in self.rows:
            for path, name in ((row.a_path, row.a), (row.b_path, row.b)):
                if name == modality:
                    seen.setdefault(path, None)
        return list(seen)

    def images(self, modality: str) -> torch.Tensor:
        """Every distinct image of ``modality`` as one (N, C, H, W) tensor."""
        files = self.files(modality)
        if not files:
            raise DatasetError(f"{self.root}: no {modality} images")
        return torch.from_numpy(np.stack([self.load(path) for path in files]))

    def sample_batch(self, direction: Direction, batch_size: int,
                     generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        pairs = self.pairs(direction)
        if not pairs:
            raise DirectionError(f"{self.root} holds no pairs for {format_direction(direction)}")
        index = torch.randint(len(pairs), (batch_size,), generator=generator).tolist()
        src = np.stack([self.load(pairs[i][0]) for i in index])
        tgt = np.stack([self.load(pairs[i][1]) for i in index])
        return torch.from_numpy(src), torch.from_numpy(tgt)


def ingest_directory(path, registry: Optional[ModalityRegistry] = None,
                     cache_size: int = IMAGE_CACHE_SIZE) -> PairedDataset:
    """Read ``pairs.tsv`` and shape-check every referenced file against the registry."""
    root = Path(path)
    registry = registry or build_default_registry()
    tsv = root / PAIRS_FILE
    try:
        text = tsv.read_text(encoding='utf-8')
    except OSError as exc:
        raise DatasetError(f"{tsv}: cannot read ({exc.strerror or exc})") from exc

    rows = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split('\t')
        if len(fields) != 3:
            raise DatasetError(f"{tsv}:{number}: expected 3 tab-separated fields, got {len(fields)}")
        a_path, b_path, tag = fields
        names = tag.split('-')
        if len(names) != 2 or not all(name in registry for name in names):
            raise DatasetError(f"{tsv}:{number}: pair tag {tag!r} does not name two registered modalities")
        rows.append(PairRow(a_path, b_path, names[0], names[1]))
    if not rows:
        raise DatasetError(f"{tsv}: no pairs")

    checked = set()
    for row in rows:
        for relative, name in ((row.a_path, row.a), (row.b_path, row.b)):
            if relative in checked:
                continue
            spec = registry.get(name)
            expected = (spec.channels, spec.native_size, spec.native_size)
            file = root / relative
            if not file.is_file():
                raise DatasetError(f"{file}: missing file referenced by {PAIRS_FILE}")
            found = read_img_header(file)
            if found != expected:
                raise DatasetError(f"{file}: shape {found} does not match {name}, expected {expected}")
            checked.add(relative)
    logger.info(f"Ingested {len(rows)} pairs ({len(checked)} files) from {root}")
    return PairedDataset(root, registry, rows, cache_size=cache_size)
