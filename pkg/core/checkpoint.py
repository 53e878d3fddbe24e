"""COCW checkpoint codec.

Layout (little-endian): magic ``COCW``, u16 version, u32 tensor count, then
per tensor a u16 name length, the UTF-8 name, u8 rank, u32 dims and f32
values in row-major order. Text metadata travels as tensors named
``meta.<key>`` whose values are the UTF-8 bytes.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from core.exceptions import FormatError, MissingArtifactError, UnsupportedVersionError
from utils.file_parser import BinaryReader, BinaryWriter

logger = logging.getLogger(__name__)

MAGIC = b"COCW"
VERSION = 1
META_PREFIX = "meta."


def encode_checkpoint(tensors: Dict[str, np.ndarray], metadata: Optional[Dict[str, str]] = None) -> bytes:
    entries = dict(tensors)
    for key, text in (metadata or {}).items():
        entries[META_PREFIX + key] = np.frombuffer(text.encode('utf-8'), dtype=np.uint8).astype(np.float32)

    writer = BinaryWriter()
    writer.write_bytes(MAGIC)
    writer.write('HI', VERSION, len(entries))
    for name, values in entries.items():
        encoded = name.encode('utf-8')
        if len(encoded) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...", offset=len(writer.buffer))
        values = np.asarray(values)
        writer.write('H', len(encoded))
        writer.write_bytes(encoded)
        writer.write('B', values.ndim)
        for dim in values.shape:
            writer.write('I', dim)
        writer.write_array(values, '<f4')
    return writer.getvalue()


def decode_checkpoint(data: bytes) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    reader = BinaryReader(data)
    magic = reader.read_bytes(4)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    version = reader.read_one('H')
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} (supported {VERSION})", offset=4)
    count = reader.read_one('I')

    tensors: Dict[str, np.ndarray] = {}
    metadata: Dict[str, str] = {}
    for _ in range(count):
        name_offset = reader.offset
        name_length = reader.read_one('H')
        try:
            name = reader.read_bytes(name_length).decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset=name_offset)
        rank = reader.read_one('B')
        shape = tuple(reader.read(f'{rank}I')) if rank else ()
        values = reader.read_array('<f4', int(np.prod(shape, dtype=np.int64)))
        values = values.reshape(shape)
        if name.startswith(META_PREFIX):
            metadata[name[len(META_PREFIX):]] = values.astype(np.uint8).tobytes().decode('utf-8')
        else:
            tensors[name] = values
    if reader.remaining():
        raise FormatError(f"{reader.remaining()} trailing bytes", offset=reader.offset)
    return tensors, metadata


def save_checkpoint(path: Path, tensors: Dict[str, np.ndarray], metadata: Optional[Dict[str, str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors, metadata))
    logger.info(f"Saved checkpoint {path} ({len(tensors)} tensors)")
    return path


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError("checkpoint", str(path))
    return decode_checkpoint(path.read_bytes())
