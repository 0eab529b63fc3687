"""
Modality Registry

Owns the set of registered modalities, the latent shape contract every codec
encodes into, and the directed graph of translation directions.

Directions come in two flavours:
- TRAINED: the pair was part of the supervised direction set
- ZERO_SHOT: never trained, still served by the shared backbone
"""

import dataclasses
import enum
import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Tuple

from .exceptions import DirectionError, RegistryError

logger = logging.getLogger(__name__)

Direction = Tuple[str, str]


@dataclass(frozen=True)
class LatentShapeContract:
    c: int
    h: int
    w: int

    def __post_init__(self):
        if min(self.c, self.h, self.w) < 1:
            raise RegistryError(f"Latent contract dimensions must be positive, got {self.as_tuple()}")

    def as_tuple(self) -> Tuple[int, int, int]:
        return (self.c, self.h, self.w)


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    channels: int
    native_size: int
    scale_factor: Optional[float] = None

    def __post_init__(self):
        if not self.name or any(ch in self.name for ch in ':,=\t\n '):
            raise RegistryError(f"Invalid modality name {self.name!r}")
        if self.channels < 1:
            raise RegistryError(f"{self.name}: channels must be >= 1, got {self.channels}")
        if self.native_size < 1:
            raise RegistryError(f"{self.name}: native_size must be >= 1, got {self.native_size}")
        if self.scale_factor is not None and not self.scale_factor > 0:
            raise RegistryError(f"{self.name}: scale_factor must be > 0, got {self.scale_factor}")


class DirectionStatus(str, enum.Enum):
    TRAINED = 'TRAINED'
    ZERO_SHOT = 'ZERO_SHOT'


class DirectionFilter(str, enum.Enum):
    ALL = 'ALL'
    TRAINED = 'TRAINED'
    ZERO_SHOT = 'ZERO_SHOT'


@dataclass(frozen=True)
class TranslationDirection:
    src: str
    tgt: str
    status: DirectionStatus

    @property
    def key(self) -> Direction:
        return (self.src, self.tgt)

    def __str__(self):
        return format_direction(self.key)


def parse_direction(text: str) -> Direction:
    """Parse ``SRC:TGT`` (case-sensitive registry names)."""
    parts = text.strip().split(':')
    if len(parts) != 2 or not all(parts):
        raise DirectionError(f"Direction must look like SRC:TGT, got {text!r}")
    return parts[0], parts[1]


def format_direction(direction: Direction) -> str:
    return f"{direction[0]}:{direction[1]}"


def downsampling_depth(native_size: int, latent_size: int) -> int:
    """Number of stride-2 stages mapping ``native_size`` onto ``latent_size``."""
    if native_size < latent_size or native_size % latent_size:
        raise RegistryError(
            f"native size {native_size} is not a multiple of latent size {latent_size}"
        )
    ratio = native_size // latent_size
    if ratio & (ratio - 1):
        raise RegistryError(f"native/latent ratio {ratio} is not a power of two")
    return ratio.bit_length() - 1


class ModalityRegistry:
    """
    Ordered set of modalities sharing one latent contract.

    Ids are assigned in registration order and index the embedding tables and
    adapter branches, so they are frozen once a model is built on top.
    Scale factors stay writable after freezing; they are set after Stage I.
    """

    def __init__(self, contract: LatentShapeContract):
        self.contract = contract
        self._specs: List[ModalitySpec] = []
        self._ids: Dict[str, int] = {}
        self._frozen = False

    def register(self, spec: ModalitySpec) -> int:
        if self._frozen:
            raise RegistryError("Registry is frozen; no further modalities can be added")
        if spec.name in self._ids:
            raise RegistryError(f"Modality {spec.name!r} is already registered")
        if self.contract.h != self.contract.w:
            raise RegistryError("Only square latent contracts are supported")
        downsampling_depth(spec.native_size, self.contract.h)

        modality_id = len(self._specs)
        self._specs.append(spec)
        self._ids[spec.name] = modality_id
        logger.debug(f"Registered modality {spec.name} as id {modality_id}")
        return modality_id

    def freeze(self) -> 'ModalityRegistry':
        if not self._specs:
            raise RegistryError("Cannot freeze an empty registry")
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def __len__(self) -> int:
        return len(self._specs)

    def __iter__(self) -> Iterator[ModalitySpec]:
        return iter(list(self._specs))

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    @property
    def names(self) -> List[str]:
        return [spec.name for spec in self._specs]

    def id_of(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise RegistryError(
                f"Unknown modality {name!r}; registered: {', '.join(self.names)}"
            ) from None

    def get(self, name: str) -> ModalitySpec:
        return self._specs[self.id_of(name)]

    def spec_for_id(self, modality_id: int) -> ModalitySpec:
        if not 0 <= modality_id < len(self._specs):
            raise RegistryError(f"Modality id {modality_id} out of range 0..{len(self._specs) - 1}")
        return self._specs[modality_id]

    def set_scale_factor(self, name: str, value: float) -> ModalitySpec:
        spec = dataclasses.replace(self.get(name), scale_factor=float(value))
        self._specs[self._ids[name]] = spec
        return spec

    def resolve_direction(self, src: str, tgt: str, trained: Iterable[Direction] = ()) -> TranslationDirection:
        """Classify ``src -> tgt``; unseen pairs are served as ZERO_SHOT, never refused."""
        self.id_of(src)
        self.id_of(tgt)
        if src == tgt:
            raise DirectionError(f"Source and target modality must differ, got {src}:{tgt}")
        status = DirectionStatus.TRAINED if (src, tgt) in set(trained) else DirectionStatus.ZERO_SHOT
        return TranslationDirection(src, tgt, status)

    def list_directions(
        self,
        trained: Iterable[Direction] = (),
        filter: DirectionFilter = DirectionFilter.ALL,
    ) -> List[TranslationDirection]:
        """All ordered pairs in (src_id, tgt_id) lexicographic order, optionally filtered."""
        if not self._specs:
            raise RegistryError("Registry is empty")
        trained = set(trained)
        filter = DirectionFilter(filter)
        directions = []
        for src in self._specs:
            for tgt in self._specs:
                if src.name == tgt.name:
                    continue
                direction = self.resolve_direction(src.name, tgt.name, trained)
                if filter is DirectionFilter.ALL or direction.status.value == filter.value:
                    directions.append(direction)
        return directions

    def validate_directions(self, directions: Iterable[Direction]) -> FrozenSet[Direction]:
        return frozenset(self.resolve_direction(src, tgt).key for src, tgt in directions)

    def snapshot(self) -> Dict[str, str]:
        """Flat key/value view for the checkpoint manifest."""
        entries = {
            'contract.c': str(self.contract.c),
            'contract.h': str(self.contract.h),
            'contract.w': str(self.contract.w),
            'modality.count': str(len(self._specs)),
        }
        for modality_id, spec in enumerate(self._specs):
            prefix = f'modality.{modality_id}'
            entries[f'{prefix}.name'] = spec.name
            entries[f'{prefix}.channels'] = str(spec.channels)
            entries[f'{prefix}.native_size'] = str(spec.native_size)
            if spec.scale_factor is not None:
                entries[f'scale_factor.{spec.name}'] = repr(spec.scale_factor)
        return entries

    @classmethod
    def from_snapshot(cls, entries: Dict[str, str]) -> 'ModalityRegistry':
        try:
            contract = LatentShapeContract(
                int(entries['contract.c']), int(entries['contract.h']), int(entries['contract.w'])
            )
            registry = cls(contract)
            for modality_id in range(int(entries['modality.count'])):
                prefix = f'modality.{modality_id}'
                name = entries[f'{prefix}.name']
                scale = entries.get(f'scale_factor.{name}')
                registry.register(ModalitySpec(
                    name=name,
                    channels=int(entries[f'{prefix}.channels']),
                    native_size=int(entries[f'{prefix}.native_size']),
                    scale_factor=float(scale) if scale is not None else None,
                ))
        except KeyError as exc:
            raise RegistryError(f"Registry snapshot is missing key {exc.args[0]!r}") from None
        return registry.freeze()


# Registration order fixes the ids: SAR=0, RGB=1, MS=2, NIR=3, PAN=4.
DEFAULT_MODALITIES = {
    'desk': {
        'contract': (4, 8, 8),
        'modalities': [('SAR', 1, 32), ('RGB', 3, 32), ('MS', 6, 16), ('NIR', 1, 32), ('PAN', 1, 64)],
    },
    'full': {
        'contract': (4, 64, 64),
        'modalities': [('SAR', 1, 256), ('RGB', 3, 256), ('MS', 6, 128), ('NIR', 1, 256), ('PAN', 1, 512)],
    },
}

FULL_SCALE_FACTORS = {
    'SAR': 0.422003,
    'RGB': 0.387068,
    'MS': 0.484645,
    'NIR': 0.568811,
    'PAN': 0.447582,
}

# The dataset's seven pairings; each pair supervises both directions.
PAIR_PROTOCOLS = {
    'seven-pair': [
        ('SAR', 'RGB'),
        ('NIR', 'RGB'),
        ('PAN', 'RGB'),
        ('NIR', 'MS'),
        ('MS', 'RGB'),
        ('SAR', 'MS'),
        ('SAR', 'NIR'),
    ],
}


def build_default_registry(preset: str = 'desk', freeze: bool = True) -> ModalityRegistry:
    try:
        layout = DEFAULT_MODALITIES[preset]
    except KeyError:
        raise RegistryError(f"Unknown registry preset {preset!r}") from None
    registry = ModalityRegistry(LatentShapeContract(*layout['contract']))
    for name, channels, native_size in layout['modalities']:
        registry.register(ModalitySpec(name, channels, native_size))
    return registry.freeze() if freeze else registry


def protocol_pairs(protocol: str, registry: ModalityRegistry) -> List[Direction]:
    """Unordered pairs of a protocol; ``all-pairs`` enumerates every registered pair."""
    if protocol == 'all-pairs':
        names = registry.names
        return [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    try:
        pairs = PAIR_PROTOCOLS[protocol]
    except KeyError:
        raise RegistryError(
            f"Unknown pair protocol {protocol!r}; choose from {', '.join([*PAIR_PROTOCOLS, 'all-pairs'])}"
        ) from None
    for a, b in pairs:
        registry.id_of(a)
        registry.id_of(b)
    return list(pairs)


def protocol_directions(protocol: str, registry: ModalityRegistry) -> FrozenSet[Direction]:
    directions = set()
    for a, b in protocol_pairs(protocol, registry):
        directions.add((a, b))
        directions.add((b, a))
    return frozenset(directions)
