"""MPNZ binary container shared by checkpoints, record sets and datasets.

Layout (all integers little-endian)::

    b"MPNZ" | u32 version | u64 json length | json metadata (utf-8)
    then per tensor: u32 name length | name (utf-8) | u32 ndim | ndim x u32 dims | payload

Payloads are f32 unless the metadata ``dtypes`` map declares otherwise for a
tensor name (``u8``, ``u16``, ``u32``, ``i64``, ``f64``).
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

from .config import CONTAINER_MAGIC, CONTAINER_VERSION
from .errors import FormatError
from .utils import sha256_bytes

DTYPE_CODES: Dict[str, str] = {
    "f32": "<f4",
    "f64": "<f8",
    "u8": "u1",
    "u16": "<u2",
    "u32": "<u4",
    "i64": "<i8",
}
_CODE_BY_KIND = {np.dtype(v).newbyteorder("<").str: k for k, v in DTYPE_CODES.items()}


def _dtype_code(array: np.ndarray) -> str:
    key = array.dtype.newbyteorder("<").str if array.dtype.byteorder not in ("|",) else array.dtype.str
    code = _CODE_BY_KIND.get(key)
    if code is None:
        raise FormatError(f"Unsupported tensor dtype {array.dtype}")
    return code


def encode_container(metadata: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialise metadata and named tensors into container bytes.

    Non-f32 tensors get their dtype recorded under ``metadata["dtypes"]``.
    """

    meta = dict(metadata)
    dtypes: Dict[str, str] = {}
    for name, array in tensors.items():
        code = _dtype_code(np.asarray(array))
        if code != "f32":
            dtypes[name] = code
    if dtypes:
        meta["dtypes"] = dtypes
    else:
        meta.pop("dtypes", None)

    header = json.dumps(meta, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    chunks = [CONTAINER_MAGIC, struct.pack("<I", CONTAINER_VERSION), struct.pack("<Q", len(header)), header]
    for name, array in tensors.items():
        array = np.asarray(array)
        encoded_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack("<I", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype=DTYPE_CODES[dtypes.get(name, "f32")]).tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"Truncated container while reading {what}", offset=self.offset)
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_container(data: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Parse container bytes back into ``(metadata, tensors)``.

    Raises:
        FormatError: bad magic, unknown version, truncation or trailing bytes.
    """

    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != CONTAINER_MAGIC:
        raise FormatError(f"Bad magic {magic!r}, expected {CONTAINER_MAGIC!r}", offset=0)
    (version,) = reader.unpack("<I", "version")
    if version != CONTAINER_VERSION:
        raise FormatError(f"Unsupported container version {version}", offset=4)
    (length,) = reader.unpack("<Q", "metadata length")
    start = reader.offset
    try:
        metadata = json.loads(reader.take(length, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"Corrupt metadata: {exc}", offset=start) from exc
    dtypes = metadata.get("dtypes", {})

    tensors: Dict[str, np.ndarray] = {}
    while reader.offset < len(data):
        (name_len,) = reader.unpack("<I", "tensor name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        (ndim,) = reader.unpack("<I", f"ndim of {name}")
        shape = reader.unpack(f"<{ndim}I", f"dims of {name}") if ndim else ()
        code = dtypes.get(name, "f32")
        if code not in DTYPE_CODES:
            raise FormatError(f"Unknown dtype {code!r} for tensor {name}", offset=reader.offset)
        dtype = np.dtype(DTYPE_CODES[code])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = reader.take(count * dtype.itemsize, f"payload of {name}")
        # native byte order for downstream arithmetic
        array = np.frombuffer(payload, dtype=dtype).reshape(shape)
        tensors[name] = array.astype(dtype.newbyteorder("="), copy=True)
    return metadata, tensors


def write_container(
    path: Union[str, Path],
    metadata: Mapping[str, Any],
    tensors: Mapping[str, np.ndarray],
) -> str:
    """Write a container file and return the sha256 of its bytes."""

    blob = encode_container(metadata, tensors)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return sha256_bytes(blob)


def read_container(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"Cannot read container {path}: {exc}") from exc
    return decode_container(data)
