"""Safetensors-layout checkpoint container with bit-exact round-trips.

Layout: 8-byte little-endian header length N, N bytes of UTF-8 JSON, then the
concatenated little-endian payloads. Offsets in the header are relative to the
end of the header. Keys are written in sorted order so output is deterministic.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

__all__ = [
    "DTYPES",
    "CheckpointError",
    "MalformedHeaderError",
    "TruncatedPayloadError",
    "UnknownDtypeError",
    "DuplicateTensorError",
    "TensorEntry",
    "TensorMap",
    "AlignmentReport",
    "encode",
    "decode",
    "load_checkpoint",
    "save_checkpoint",
    "align",
    "atomic_write",
]

# dtype code -> (byte width, little-endian unsigned view used for bit-level selects)
DTYPES = {
    "F64": (8, "<u8"),
    "F32": (4, "<u4"),
    "F16": (2, "<u2"),
    "BF16": (2, "<u2"),
}

_HEADER_ALIGN = 8


class CheckpointError(Exception):
    """Base class for container format errors."""


class MalformedHeaderError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class UnknownDtypeError(CheckpointError):
    pass


class DuplicateTensorError(CheckpointError):
    pass


def _bf16_to_f32(bits: np.ndarray) -> np.ndarray:
    return (bits.astype(np.uint32) << np.uint32(16)).view(np.float32)


def _f32_to_bf16(values: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    # round to nearest, ties to even; NaNs keep a quiet bit so they stay NaN
    rounding = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    out = ((bits + rounding) >> np.uint32(16)).astype(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        out[nan] = ((bits[nan] >> np.uint32(16)) | np.uint32(0x40)).astype(np.uint16)
    return out


def decode(raw: bytes, dtype: str) -> np.ndarray:
    """Promote a little-endian payload to a flat float64 array (exact for every dtype)."""
    if dtype not in DTYPES:
        raise UnknownDtypeError(f"unknown dtype {dtype!r}")
    if dtype == "BF16":
        stored = _bf16_to_f32(np.frombuffer(raw, dtype="<u2"))
    else:
        stored = np.frombuffer(raw, dtype={"F64": "<f8", "F32": "<f4", "F16": "<f2"}[dtype])
    # signalling NaN payloads are legal; widening them should not warn
    with np.errstate(invalid="ignore"):
        return stored.astype(np.float64)


def encode(values: np.ndarray, dtype: str) -> bytes:
    """Encode float values into ``dtype`` storage (rounds to nearest when narrowing)."""
    values = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
    if dtype == "F64":
        return values.astype("<f8").tobytes()
    if dtype == "F32":
        return values.astype("<f4").tobytes()
    if dtype == "F16":
        return values.astype("<f2").tobytes()
    if dtype == "BF16":
        return _f32_to_bf16(values.astype(np.float32)).astype("<u2").tobytes()
    raise UnknownDtypeError(f"unknown dtype {dtype!r}")


@dataclass(frozen=True)
class TensorEntry:
    """One stored tensor: shape, storage dtype and the untouched payload bytes."""

    shape: tuple[int, ...]
    dtype: str
    raw: bytes = field(repr=False)

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        if self.dtype not in DTYPES:
            raise UnknownDtypeError(f"unknown dtype {self.dtype!r}")
        if len(shape) < 1 or any(d <= 0 for d in shape):
            raise ValueError(f"invalid shape {shape}: rank >= 1 and positive dims required")
        expected = self.size * DTYPES[self.dtype][0]
        if len(self.raw) != expected:
            raise ValueError(f"payload is {len(self.raw)} bytes, expected {expected}")

    @classmethod
    def from_array(cls, values, dtype: str = "F32") -> "TensorEntry":
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        return cls(arr.shape, dtype, encode(arr, dtype))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def values(self) -> np.ndarray:
        """Float64 working copy, materialized on each access."""
        return decode(self.raw, self.dtype).reshape(self.shape)

    def bits(self) -> np.ndarray:
        """Flat unsigned-integer view of the stored bit patterns."""
        return np.frombuffer(self.raw, dtype=DTYPES[self.dtype][1])


class TensorMap(Mapping[str, TensorEntry]):
    """Ordered, read-only mapping of tensor name to :class:`TensorEntry`."""

    def __init__(self, entries: Mapping[str, TensorEntry] | None = None,
                 metadata: Mapping[str, str] | None = None):
        entries = dict(entries or {})
        for name, entry in entries.items():
            if not isinstance(name, str) or not name:
                raise ValueError("tensor names must be non-empty strings")
            if name == "__metadata__":
                raise ValueError("'__metadata__' is reserved")
            if not isinstance(entry, TensorEntry):
                raise TypeError(f"{name}: expected TensorEntry, got {type(entry).__name__}")
        self._entries = entries
        self.metadata = dict(metadata or {})

    def __getitem__(self, name: str) -> TensorEntry:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self):
        return f"TensorMap({len(self)} tensors)"

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: str = "F32",
                    metadata=None) -> "TensorMap":
        return cls({k: TensorEntry.from_array(v, dtype) for k, v in arrays.items()}, metadata)

    def num_params(self) -> int:
        return sum(e.size for e in self._entries.values())


class _Pairs(list):
    """Key/value pairs of one JSON object, kept in file order."""


def _parse_header(blob: bytes) -> list[tuple[str, object]]:
    def no_duplicates(pairs):
        seen = set()
        for key, _ in pairs:
            if key in seen:
                raise DuplicateTensorError(f"duplicate tensor name {key!r}")
            seen.add(key)
        return _Pairs(pairs)

    try:
        pairs = json.loads(blob.decode("utf-8"), object_pairs_hook=no_duplicates)
    except DuplicateTensorError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(pairs, _Pairs):
        raise MalformedHeaderError("header must be a JSON object")
    return pairs


def load_checkpoint(path) -> TensorMap:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise MalformedHeaderError(f"{path}: file shorter than the 8-byte length prefix")
    (header_len,) = struct.unpack("<Q", data[:8])
    if header_len == 0 or 8 + header_len > len(data):
        raise MalformedHeaderError(f"{path}: header length {header_len} exceeds file size")
    pairs = _parse_header(data[8:8 + header_len])
    payload = memoryview(data)[8 + header_len:]

    entries = {}
    metadata = {}
    for name, info in pairs:
        if name == "__metadata__":
            if not isinstance(info, _Pairs) or not all(isinstance(v, str) for _, v in info):
                raise MalformedHeaderError("__metadata__ must map strings to strings")
            metadata = dict(info)
            continue
        info = dict(info) if isinstance(info, _Pairs) else None
        if info is None or not {"dtype", "shape", "data_offsets"} <= info.keys():
            raise MalformedHeaderError(f"tensor {name!r}: missing dtype/shape/data_offsets")
        dtype, shape, offsets = info["dtype"], info["shape"], info["data_offsets"]
        if dtype not in DTYPES:
            raise UnknownDtypeError(f"tensor {name!r}: unknown dtype {dtype!r}")
        if (not isinstance(shape, list) or not shape
                or not all(isinstance(d, int) and d > 0 for d in shape)):
            raise MalformedHeaderError(f"tensor {name!r}: invalid shape {shape!r}")
        if (not isinstance(offsets, list) or len(offsets) != 2
                or not all(isinstance(o, int) and o >= 0 for o in offsets)
                or offsets[0] > offsets[1]):
            raise MalformedHeaderError(f"tensor {name!r}: invalid data_offsets {offsets!r}")
        begin, end = offsets
        if end - begin != int(np.prod(shape)) * DTYPES[dtype][0]:
            raise MalformedHeaderError(f"tensor {name!r}: offsets disagree with shape and dtype")
        if end > len(payload):
            raise TruncatedPayloadError(
                f"tensor {name!r}: needs bytes up to {end}, payload has {len(payload)}")
        entries[name] = TensorEntry(tuple(shape), dtype, bytes(payload[begin:end]))
    return TensorMap(entries, metadata)


def _serialize(tmap: TensorMap) -> bytes:
    header = {}
    offset = 0
    names = sorted(tmap)
    for name in names:
        entry = tmap[name]
        header[name] = {
            "data_offsets": [offset, offset + len(entry.raw)],
            "dtype": entry.dtype,
            "shape": list(entry.shape),
        }
        offset += len(entry.raw)
    if tmap.metadata:
        if not all(isinstance(k, str) and isinstance(v, str) for k, v in tmap.metadata.items()):
            raise TypeError("checkpoint metadata must map str to str")
        header["__metadata__"] = dict(sorted(tmap.metadata.items()))
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    blob = blob.encode("utf-8")
    blob += b" " * (-len(blob) % _HEADER_ALIGN)
    return b"".join([struct.pack("<Q", len(blob)), blob] + [tmap[n].raw for n in names])


def atomic_write(path, data: bytes | str) -> None:
    """Write to a temporary sibling and rename over ``path`` on success."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode("utf-8") if isinstance(data, str) else data)
        # mkstemp creates 0600; give the result the usual umask-derived mode
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(tmap: TensorMap, path) -> None:
    atomic_write(path, _serialize(tmap))


@dataclass
class AlignmentReport:
    matched: list[str]
    base_only: list[str]
    secondary_only: list[str]
    shape_mismatch: list[tuple[str, tuple[int, ...], tuple[int, ...]]]


def align(base: Mapping[str, TensorEntry], secondary: Mapping[str, TensorEntry]) -> AlignmentReport:
    """Partition the union of tensor names. Equal shapes match even if dtypes differ."""
    matched, mismatch = [], []
    for name in sorted(base.keys() & secondary.keys()):
        if base[name].shape == secondary[name].shape:
            matched.append(name)
        else:
            mismatch.append((name, base[name].shape, secondary[name].shape))
    return AlignmentReport(
        matched=matched,
        base_only=sorted(base.keys() - secondary.keys()),
        secondary_only=sorted(secondary.keys() - base.keys()),
        shape_mismatch=mismatch,
    )
