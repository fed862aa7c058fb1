"""
Binary checkpoint files.

Layout (little-endian throughout):
    b"ESCK" | u32 version (=1) | u32 tensor_count
    per tensor, ascending name order:
        u16 name_len | name (UTF-8) | u8 kind | u32 layer_index | u8 rank |
        u32 dim * rank | f32 data (row-major)

An empty ParamSet is the 12-byte header alone.
"""

import logging
import struct
from pathlib import Path
from typing import List

import numpy as np

from esforge.errors import CheckpointCorruptionError, CheckpointFormatError, CheckpointVersionError
from esforge.file_utils import AtomicFileWriter
from esforge.params import ParamGroup, ParamKind, ParamSet, ParamTensor

logger = logging.getLogger(__name__)

MAGIC = b"ESCK"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_GROUP = struct.Struct("<BIB")
_DIM = struct.Struct("<I")
_F32_LE = np.dtype("<f4")


def encode_checkpoint(params: ParamSet) -> bytes:
    """Serialize params to the checkpoint byte layout."""
    chunks: List[bytes] = [_HEADER.pack(MAGIC, VERSION, len(params))]
    for tensor in params:
        name = tensor.name.encode("utf-8")
        chunks.append(_NAME_LEN.pack(len(name)))
        chunks.append(name)
        group = tensor.group
        chunks.append(_GROUP.pack(int(group.kind), group.layer_index, len(tensor.shape)))
        chunks.extend(_DIM.pack(d) for d in tensor.shape)
        chunks.append(np.ascontiguousarray(tensor.data, dtype=_F32_LE).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.data):
            raise CheckpointCorruptionError(
                f"{self.source}: truncated at byte {self.offset} (needed {count} more bytes)"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> ParamSet:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointFormatError: Bad magic
        CheckpointVersionError: Unsupported version
        CheckpointCorruptionError: Truncated or inconsistent contents
    """
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {data[:4]!r}, expected {MAGIC!r}")
    reader = _Reader(data, source)
    _, version, count = reader.unpack(_HEADER)
    if version != VERSION:
        raise CheckpointVersionError(f"{source}: unsupported version {version}")

    tensors = []
    for _ in range(count):
        (name_len,) = reader.unpack(_NAME_LEN)
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointCorruptionError(f"{source}: tensor name is not UTF-8: {e}") from None
        kind_code, layer, rank = reader.unpack(_GROUP)
        try:
            kind = ParamKind(kind_code)
        except ValueError:
            raise CheckpointCorruptionError(
                f"{source}: tensor {name}: unknown kind {kind_code}"
            ) from None
        shape = tuple(reader.unpack(_DIM)[0] for _ in range(rank))
        if rank == 0 or any(d == 0 for d in shape):
            raise CheckpointCorruptionError(f"{source}: tensor {name}: invalid shape {shape}")
        size = int(np.prod(shape))
        values = np.frombuffer(reader.take(4 * size), dtype=_F32_LE).astype(np.float32)
        tensors.append(ParamTensor(name, ParamGroup(kind, layer), shape, values.reshape(shape)))

    if reader.offset != len(data):
        raise CheckpointCorruptionError(
            f"{source}: {len(data) - reader.offset} trailing bytes after {count} tensors"
        )
    try:
        return ParamSet(tensors)
    except ValueError as e:
        raise CheckpointCorruptionError(f"{source}: {e}") from None


def save_checkpoint(params: ParamSet, path: Path) -> Path:
    """Write params atomically; returns the path."""
    path = Path(path)
    AtomicFileWriter.write_bytes(path, encode_checkpoint(params))
    logger.debug(f"[ckpt] saved {len(params)} tensors to {path}")
    return path


def load_checkpoint(path: Path) -> ParamSet:
    """
    Read a checkpoint file.

    Raises:
        CheckpointFormatError: Bad magic (subclasses for version and corruption)
        OSError: If the file cannot be read
    """
    path = Path(path)
    return decode_checkpoint(AtomicFileWriter.read_bytes(path), source=str(path))
