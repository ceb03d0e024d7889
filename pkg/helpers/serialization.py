"""
Binary tensor containers and checkpoint directories.

A ``.smrt`` file holds one tensor:

    magic "SMRT" | u32 version | u32 rank | u32 extent x rank | u8 element size | payload

All integers and the payload are little-endian; the element size is 4 for
32-bit and 8 for 64-bit floats. A checkpoint is a directory holding a
``manifest.txt`` of ``key=value`` lines plus one container per named tensor.
"""

import logging
import struct
from collections.abc import Mapping
from pathlib import Path

import numpy as np

from helpers.constants import SMRT_MAGIC, SMRT_VERSION
from helpers.exceptions import CheckpointError

logger = logging.getLogger("lab")

MANIFEST_FILE = "manifest.txt"
_ELEMENT_TYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    element_size = array.dtype.itemsize
    if array.dtype.kind != "f" or element_size not in _ELEMENT_TYPES:
        raise CheckpointError(f"cannot store dtype {array.dtype}; only 32- and 64-bit floats are supported")
    header = SMRT_MAGIC + struct.pack("<II", SMRT_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<B", element_size)
    return header + np.ascontiguousarray(array, dtype=_ELEMENT_TYPES[element_size]).tobytes()


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 12 or blob[:4] != SMRT_MAGIC:
        raise CheckpointError(f"{source}: not a SMRT container (bad magic)")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != SMRT_VERSION:
        raise CheckpointError(f"{source}: unsupported SMRT version {version}")
    offset = 12
    if len(blob) < offset + 4 * rank + 1:
        raise CheckpointError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    (element_size,) = struct.unpack_from("<B", blob, offset)
    offset += 1
    if element_size not in _ELEMENT_TYPES:
        raise CheckpointError(f"{source}: unsupported element size {element_size}")
    expected = int(np.prod(shape, dtype=np.int64)) * element_size
    payload = blob[offset:]
    if len(payload) != expected:
        raise CheckpointError(f"{source}: payload has {len(payload)} bytes, header promises {expected}")
    array = np.frombuffer(payload, dtype=_ELEMENT_TYPES[element_size]).reshape(shape)
    return array.astype(array.dtype.newbyteorder("="))


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path: str | Path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read tensor file {path}: {e.strerror}")
    return decode_tensor(blob, source=str(path))


def save_checkpoint(directory: str | Path, tensors: Mapping[str, np.ndarray], manifest: Mapping[str, str]) -> Path:
    """Write every tensor plus a manifest listing them; returns the directory."""
    target = Path(directory)
    target.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={value}" for key, value in manifest.items()]
    lines.append("tensors=" + ",".join(tensors))
    for name, array in tensors.items():
        write_tensor(target / f"{name}.smrt", array)
    (target / MANIFEST_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.debug({"event": "checkpoint_saved", "path": str(target), "tensors": len(tensors)})
    return target


def load_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    source = Path(directory)
    manifest_path = source / MANIFEST_FILE
    if not manifest_path.is_file():
        raise CheckpointError(f"{source}: no {MANIFEST_FILE}, not a checkpoint directory")
    manifest: dict[str, str] = {}
    for number, line in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{manifest_path}:{number}: expected key=value")
        manifest[key.strip()] = value.strip()
    names = [name for name in manifest.pop("tensors", "").split(",") if name]
    tensors = {name: read_tensor(source / f"{name}.smrt") for name in names}
    return tensors, manifest
