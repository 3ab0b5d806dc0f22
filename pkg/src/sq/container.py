"""Self-describing binary container for named tensors.

Layout::

    bytes 0..7    magic  b"SQTN\\x00\\x01\\x00\\x00"
    bytes 8..15   little-endian u64: byte length of the JSON index
    index         UTF-8 JSON, canonical form (sorted keys, no whitespace)
    padding       zeros up to the next 64-byte boundary (data region start)
    payloads      raw little-endian tensor bytes, each 64-byte aligned

The index maps tensor names to ``{"dtype", "shape", "offset", "length"}``
where ``dtype`` is one of ``f32 | f64 | u8 | i32`` and ``offset`` is relative
to the data region start (itself 64-byte aligned, so payload alignment is
absolute too). Everything round-trips bit-exactly and a given set of tensors
always serializes to the identical byte stream.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ContainerFormatError

MAGIC = b"SQTN\x00\x01\x00\x00"
ALIGN = 64

_TAG_TO_DTYPE = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("|u1"),
    "i32": np.dtype("<i4"),
}
_KIND_TO_TAG = {"f4": "f32", "f8": "f64", "u1": "u8", "i4": "i32"}


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _to_storable(name: str, arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == np.int64:
        if arr.size and (arr.min() < np.iinfo(np.int32).min or arr.max() > np.iinfo(np.int32).max):
            raise ContainerFormatError(f"{name}: int64 values do not fit in i32")
        arr = arr.astype(np.int32)
    key = f"{arr.dtype.kind}{arr.dtype.itemsize}"
    if key not in _KIND_TO_TAG:
        raise ContainerFormatError(
            f"{name}: unsupported dtype {arr.dtype}; use f32, f64, u8 or i32"
        )
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    if not arr.flags.c_contiguous:  # 0-d arrays are always contiguous
        arr = np.ascontiguousarray(arr)
    return arr


def write_tensors(path, tensors: dict) -> None:
    """Serialize ``{name: array}`` to ``path``; names are sorted for a
    canonical, reproducible byte stream."""
    stored = {}
    for name in sorted(tensors):
        if not isinstance(name, str) or not name:
            raise ContainerFormatError(f"tensor names must be nonempty strings, got {name!r}")
        stored[name] = _to_storable(name, tensors[name])

    index = {}
    offset = 0
    for name, arr in stored.items():
        nbytes = arr.nbytes
        index[name] = {
            "dtype": _KIND_TO_TAG[f"{arr.dtype.kind}{arr.dtype.itemsize}"],
            "shape": list(arr.shape),
            "offset": offset,
            "length": nbytes,
        }
        offset = _align(offset + nbytes)

    index_bytes = json.dumps(index, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header_len = len(MAGIC) + 8 + len(index_bytes)
    data_start = _align(header_len)

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(index_bytes).to_bytes(8, "little"))
        fh.write(index_bytes)
        fh.write(b"\x00" * (data_start - header_len))
        pos = 0
        for name, arr in stored.items():
            entry = index[name]
            fh.write(b"\x00" * (entry["offset"] - pos))
            fh.write(arr.tobytes())
            pos = entry["offset"] + entry["length"]


def read_tensors(path) -> dict:
    """Load every tensor from a container, bit-exact."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise ContainerFormatError(f"{path}: not a tensor container (bad magic)")
    index_len = int.from_bytes(blob[len(MAGIC) : len(MAGIC) + 8], "little")
    header_len = len(MAGIC) + 8 + index_len
    if header_len > len(blob):
        raise ContainerFormatError(f"{path}: truncated index")
    try:
        index = json.loads(blob[len(MAGIC) + 8 : header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: corrupt index ({exc})") from exc
    data_start = _align(header_len)

    out = {}
    for name, entry in index.items():
        try:
            dtype = _TAG_TO_DTYPE[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
            length = int(entry["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerFormatError(f"{path}: malformed entry for {name!r}") from exc
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if length != expected:
            raise ContainerFormatError(
                f"{path}: {name!r} declares {length} bytes for shape {shape}"
            )
        lo = data_start + offset
        if lo % ALIGN != 0:
            raise ContainerFormatError(f"{path}: {name!r} payload is not 64-byte aligned")
        if lo + length > len(blob):
            raise ContainerFormatError(f"{path}: {name!r} payload is out of bounds")
        out[name] = np.frombuffer(blob[lo : lo + length], dtype=dtype).reshape(shape).copy()
    return out
