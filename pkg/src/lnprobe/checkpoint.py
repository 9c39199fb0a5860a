"""Safetensors-compatible checkpoint reading and writing.

File layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON
header mapping tensor name -> {"dtype", "shape", "data_offsets"}, then a
flat byte buffer. Offsets are relative to the end of the header. Written
files pack tensors contiguously in name order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

_DTYPE_TO_NUMPY = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
}
_DTYPE_WIDTH = {"F32": 4, "F16": 2}

# Guards against absurd header lengths in corrupt files.
_MAX_HEADER_BYTES = 100_000_000


@dataclass(frozen=True)
class TensorRecord:
    """One named tensor: shape, on-disk dtype, and raw little-endian bytes."""

    name: str
    shape: tuple[int, ...]
    dtype: str  # "F32" or "F16"
    data: bytes

    def __post_init__(self):
        if self.dtype not in _DTYPE_WIDTH:
            raise CheckpointFormatError(f"unsupported dtype {self.dtype!r}")
        if any(d < 0 for d in self.shape):
            raise CheckpointFormatError(f"negative dimension in shape {self.shape}")
        expected = int(np.prod(self.shape, dtype=np.int64)) * _DTYPE_WIDTH[self.dtype]
        if expected != len(self.data):
            raise CheckpointFormatError(
                f"tensor {self.name!r}: shape {self.shape} with dtype {self.dtype} "
                f"needs {expected} bytes, got {len(self.data)}"
            )

    @property
    def num_elements(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    def as_array(self) -> np.ndarray:
        """Decode to a float32 array (float16 is promoted)."""
        arr = np.frombuffer(self.data, dtype=_DTYPE_TO_NUMPY[self.dtype])
        return arr.astype(np.float32, copy=True).reshape(self.shape)

    @classmethod
    def from_array(cls, name: str, array: np.ndarray, dtype: str | None = None) -> "TensorRecord":
        if dtype is None:
            dtype = "F16" if getattr(array, "dtype", None) == np.float16 else "F32"
        np_dtype = _DTYPE_TO_NUMPY[dtype]
        data = np.ascontiguousarray(array, dtype=np_dtype).tobytes()
        return cls(name=name, shape=tuple(array.shape), dtype=dtype, data=data)


@dataclass
class Checkpoint:
    """Immutable-by-convention collection of named tensors plus metadata."""

    tensors: dict[str, TensorRecord] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __getitem__(self, name: str) -> TensorRecord:
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def with_tensor(self, record: TensorRecord) -> "Checkpoint":
        """Copy-on-write replacement of a single tensor."""
        tensors = dict(self.tensors)
        tensors[record.name] = record
        return Checkpoint(tensors=tensors, metadata=dict(self.metadata))

    def digest(self) -> str:
        """Content hash over names, shapes, dtypes, and payload bytes."""
        h = hashlib.sha256()
        for name in self.names():
            rec = self.tensors[name]
            h.update(name.encode())
            h.update(repr(rec.shape).encode())
            h.update(rec.dtype.encode())
            h.update(rec.data)
        return h.hexdigest()


def read_checkpoint(path: str | Path) -> Checkpoint:
    """Parse a safetensors file into a Checkpoint.

    Raises CheckpointFormatError for malformed headers, overlapping or
    gapped data offsets, and truncated payloads.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointFormatError(f"{path}: file shorter than the 8-byte header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if header_len > _MAX_HEADER_BYTES or 8 + header_len > len(raw):
        raise CheckpointFormatError(f"{path}: declared header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointFormatError(f"{path}: header must be a JSON object")

    payload = raw[8 + header_len :]
    metadata = {}
    spans = []
    tensors: dict[str, TensorRecord] = {}
    for name, entry in header.items():
        if name == "__metadata__":
            if not isinstance(entry, dict):
                raise CheckpointFormatError(f"{path}: __metadata__ must be an object")
            metadata = {str(k): str(v) for k, v in entry.items()}
            continue
        try:
            dtype = entry["dtype"]
            shape = tuple(int(d) for d in entry["shape"])
            begin, end = (int(x) for x in entry["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: malformed entry for tensor {name!r}") from exc
        if dtype not in _DTYPE_WIDTH:
            raise CheckpointFormatError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
        if begin < 0 or end < begin:
            raise CheckpointFormatError(f"{path}: tensor {name!r} has invalid offsets [{begin}, {end})")
        if end > len(payload):
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} payload [{begin}, {end}) exceeds available {len(payload)} bytes"
            )
        spans.append((begin, end, name))
        tensors[name] = TensorRecord(name=name, shape=shape, dtype=dtype, data=payload[begin:end])

    spans.sort()
    cursor = 0
    for begin, end, name in spans:
        if begin < cursor:
            raise CheckpointFormatError(f"{path}: tensor {name!r} overlaps the previous tensor")
        if begin > cursor:
            raise CheckpointFormatError(f"{path}: gap before tensor {name!r} at offset {begin}")
        cursor = end
    if cursor != len(payload):
        raise CheckpointFormatError(
            f"{path}: payload has {len(payload) - cursor} trailing bytes not claimed by any tensor"
        )
    return Checkpoint(tensors=tensors, metadata=metadata)


def write_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Serialize a Checkpoint; the result round-trips bit-exactly."""
    header: dict = {}
    if checkpoint.metadata:
        header["__metadata__"] = dict(sorted(checkpoint.metadata.items()))
    offset = 0
    chunks = []
    for name in checkpoint.names():
        rec = checkpoint.tensors[name]
        end = offset + len(rec.data)
        header[name] = {
            "dtype": rec.dtype,
            "shape": list(rec.shape),
            "data_offsets": [offset, end],
        }
        chunks.append(rec.data)
        offset = end
    header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for chunk in chunks:
            fh.write(chunk)
