"""
Checkpoint files.

Layout: the 8-byte magic ``MPXCKPT1``, a little-endian uint64 header length,
a JSON header (tensor table plus free-form metadata), then the raw
little-endian bytes of every tensor in table order. Offsets in the table are
relative to the start of the data section.
"""

import os
import struct
from pathlib import Path
from typing import Any, Dict, List, Mapping, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, Field, ValidationError

from metapix.core.errors import CheckpointError, NonFiniteError

MAGIC = b"MPXCKPT1"
_LENGTH = struct.Struct("<Q")


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    dtype: str
    offset: int
    nbytes: int


class CheckpointHeader(BaseModel):
    tensors: List[TensorEntry] = Field(default_factory=list)
    meta: Dict[str, Any] = Field(default_factory=dict)


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    return np.require(array, dtype=array.dtype.newbyteorder("<"), requirements="C")


def write_checkpoint(path: Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> Path:
    """
    Write atomically: the file appears complete or not at all.

    Raises:
        NonFiniteError: a floating tensor holds NaN or infinity; nothing is written.
        CheckpointError: the file cannot be written.
    """
    path = Path(path)
    header = CheckpointHeader(meta=dict(meta))
    chunks = []
    offset = 0
    for name, array in tensors.items():
        data = _little_endian(array)
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"Refusing to checkpoint non-finite tensor {name}",
                                 details={"tensor": name, "path": str(path)})
        raw = data.tobytes()
        header.tensors.append(
            TensorEntry(name=name, shape=list(data.shape), dtype=data.dtype.str, offset=offset, nbytes=len(raw))
        )
        chunks.append(raw)
        offset += len(raw)

    encoded = header.model_dump_json().encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as handle:
            handle.write(MAGIC)
            handle.write(_LENGTH.pack(len(encoded)))
            handle.write(encoded)
            for raw in chunks:
                handle.write(raw)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"Could not write checkpoint {path}: {exc}", details={"path": str(path)}) from exc
    logger.debug(f"Checkpoint written: {path} ({len(chunks)} tensors, {offset} bytes)")
    return path


def read_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Could not read checkpoint {path}: {exc}", details={"path": str(path)}) from exc

    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)", details={"path": str(path)})
    start = len(MAGIC) + _LENGTH.size
    if len(blob) < start:
        raise CheckpointError(f"{path} is truncated", details={"path": str(path)})
    (length,) = _LENGTH.unpack(blob[len(MAGIC):start])
    try:
        header = CheckpointHeader.model_validate_json(blob[start:start + length])
    except ValidationError as exc:
        raise CheckpointError(f"{path} has a corrupt header", details={"path": str(path)}) from exc

    data = memoryview(blob)[start + length:]
    tensors: Dict[str, np.ndarray] = {}
    for entry in header.tensors:
        if entry.offset + entry.nbytes > len(data):
            raise CheckpointError(f"{path} is truncated at tensor {entry.name}", details={"path": str(path)})
        chunk = data[entry.offset:entry.offset + entry.nbytes]
        array = np.frombuffer(chunk, dtype=np.dtype(entry.dtype)).reshape(entry.shape).copy()
        tensors[entry.name] = array
    return tensors, header.meta
