"""
Binary file formats.

``.img``  16-byte header: magic b"A2AI", channels, height, width (little-endian
          u32), then row-major little-endian float32 pixels in [-1, 1].
``.f32``  16-byte preamble: magic b"A2A0", format version, rank, element count
          (little-endian u32), then ``rank`` u32 dims, then row-major
          little-endian float32 values.

Writes go to a temporary sibling and are renamed into place.
"""

import os
import struct
import tempfile
from pathlib import Path
from typing import Tuple, Type, Union

import numpy as np

from .exceptions import CheckpointError, DatasetError, TranslatorError

IMG_MAGIC = b'A2AI'
ARRAY_MAGIC = b'A2A0'
ARRAY_VERSION = 1
HEADER = struct.Struct('<4sIII')

PathLike = Union[str, Path]


def atomic_write(path: PathLike, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def _read(path: PathLike, error: Type[TranslatorError]) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise error(f"{path}: cannot read ({exc.strerror or exc})") from exc


def encode_img(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype='<f4')
    if image.ndim != 3:
        raise DatasetError(f"Images must be (channels, height, width), got shape {image.shape}")
    channels, height, width = image.shape
    return HEADER.pack(IMG_MAGIC, channels, height, width) + np.ascontiguousarray(image).tobytes()


def write_img(path: PathLike, image: np.ndarray):
    atomic_write(path, encode_img(image))


def read_img_header(path: PathLike) -> Tuple[int, int, int]:
    try:
        with open(path, 'rb') as handle:
            head = handle.read(HEADER.size)
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    if len(head) < HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, channels, height, width = HEADER.unpack(head)
    if magic != IMG_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}, expected {IMG_MAGIC!r}")
    return channels, height, width


def read_img(path: PathLike) -> np.ndarray:
    payload = _read(path, DatasetError)
    if len(payload) < HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, channels, height, width = HEADER.unpack_from(payload)
    if magic != IMG_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}, expected {IMG_MAGIC!r}")
    count = channels * height * width
    body = payload[HEADER.size:]
    if len(body) != 4 * count:
        raise DatasetError(f"{path}: expected {4 * count} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype='<f4').reshape(channels, height, width).astype(np.float32)


def encode_array(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(np.asarray(array, dtype='<f4'))
    dims = array.shape
    head = HEADER.pack(ARRAY_MAGIC, ARRAY_VERSION, len(dims), array.size)
    return head + struct.pack(f'<{len(dims)}I', *dims) + array.tobytes()


def write_array(path: PathLike, array: np.ndarray):
    atomic_write(path, encode_array(array))


def read_array(path: PathLike) -> np.ndarray:
    payload = _read(path, CheckpointError)
    name = Path(path).name
    if len(payload) < HEADER.size:
        raise CheckpointError(f"{name}: truncated header")
    magic, version, rank, count = HEADER.unpack_from(payload)
    if magic != ARRAY_MAGIC:
        raise CheckpointError(f"{name}: bad magic {magic!r}, expected {ARRAY_MAGIC!r}")
    if version != ARRAY_VERSION:
        raise CheckpointError(f"{name}: unsupported array format version {version}")
    dims_end = HEADER.size + 4 * rank
    if len(payload) < dims_end:
        raise CheckpointError(f"{name}: truncated shape block")
    dims = struct.unpack_from(f'<{rank}I', payload, HEADER.size)
    if int(np.prod(dims, dtype=np.int64)) != count:
        raise CheckpointError(f"{name}: dims {dims} disagree with element count {count}")
    body = payload[dims_end:]
    if len(body) != 4 * count:
        raise CheckpointError(f"{name}: expected {4 * count} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype='<f4').reshape(dims).copy()
