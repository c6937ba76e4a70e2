"""
Binary checkpoint format for named float64 parameter arrays

Layout, all integers little-endian u32:
    b"GATN" | version | count | count x (name_len | utf-8 name | rank | dims... | '<f8' values)
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np

from app.errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"GATN"
VERSION = 1
_U32 = struct.Struct("<I")
_F8 = np.dtype("<f8")


def save_checkpoint(path: Path, params: Mapping[str, np.ndarray]) -> Path:
    """
    Write parameters in name order; the file is replaced atomically.

    Args:
        path: Destination file
        params: Arrays keyed by dotted parameter name

    Returns:
        The written path
    """
    path = Path(path)
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(params))]
    for name in sorted(params):
        array = np.ascontiguousarray(params[name], dtype=_F8)
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U32.pack(dim) for dim in array.shape)
        chunks.append(array.tobytes())

    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    try:
        partial.write_bytes(b"".join(chunks))
        partial.replace(path)
    except OSError as e:
        raise CheckpointError(f"could not write checkpoint {path}: {e}") from e
    logger.info(f"Saved {len(params)} parameter arrays to {path}")
    return path


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.blob):
            raise CheckpointError(f"truncated checkpoint {self.path}")
        chunk = self.blob[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]


def load_checkpoint(
    path: Path, expected_shapes: Optional[Mapping[str, tuple]] = None
) -> Dict[str, np.ndarray]:
    """
    Read a checkpoint written by ``save_checkpoint``.

    When ``expected_shapes`` is given, names and shapes must match it exactly.
    Raises CheckpointError on a missing, corrupt or mismatching file.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"could not read checkpoint {path}: {e}") from e

    reader = _Reader(blob, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    params: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"corrupt parameter name in {path}") from e
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(count * _F8.itemsize), dtype=_F8)
        params[name] = values.reshape(shape).astype(np.float64)

    if reader.offset != len(blob):
        raise CheckpointError(f"trailing bytes after the last array in {path}")

    if expected_shapes is not None:
        missing = sorted(set(expected_shapes) - set(params))
        extra = sorted(set(params) - set(expected_shapes))
        if missing or extra:
            raise CheckpointError(
                f"checkpoint does not match the model: missing {missing}, unexpected {extra}"
            )
        for name, shape in expected_shapes.items():
            if params[name].shape != tuple(shape):
                raise CheckpointError(
                    f"checkpoint shape mismatch for {name}: {params[name].shape} vs {tuple(shape)}"
                )
    return params
