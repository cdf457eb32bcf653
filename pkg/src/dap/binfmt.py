"""Portable binary containers.

Raw grid (``.grid``) layout, all little-endian::

    offset  size  field
    0       4     magic b"DAPG"
    4       1     dtype code (1 = uint8, 2 = float32, 3 = float64)
    5       1     ndim (1..3)
    6       6     dims as three uint16, unused trailing dims are 0
    12      4     reserved, zero
    16      ...   C-order payload

Checkpoint (``.ckpt``) layout::

    0       4     magic b"DAPC"
    4       4     uint32 format version
    8       8     uint64 byte length of the JSON header
    16      ...   UTF-8 JSON header {"config": ..., "tensors": [...]}
    ...           concatenated C-order tensor payloads

Each tensor entry in the header is ``{"name", "dtype", "shape", "offset",
"nbytes"}`` where ``offset`` is relative to the end of the JSON header.
"""

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

GRID_MAGIC = b"DAPG"
CKPT_MAGIC = b"DAPC"
CKPT_VERSION = 1
_GRID_HEADER = struct.Struct("<4sBB3H4x")
_CKPT_PREAMBLE = struct.Struct("<4sIQ")

_CODES = {np.dtype(np.uint8): 1, np.dtype(np.float32): 2, np.dtype(np.float64): 3}
_DTYPES = {v: k for k, v in _CODES.items()}
_NAMES = {"uint8": np.dtype("<u1"), "float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_grid(array):
    arr = np.asarray(array)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype not in _CODES:
        raise FormatError(f"unsupported grid dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 3:
        raise FormatError(f"grid must have 1..3 dims, got {arr.ndim}")
    if any(d > 0xFFFF for d in arr.shape):
        raise FormatError(f"grid dims {arr.shape} exceed uint16")
    dims = list(arr.shape) + [0] * (3 - arr.ndim)
    header = _GRID_HEADER.pack(GRID_MAGIC, _CODES[arr.dtype], arr.ndim, *dims)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return header + payload


def decode_grid(data):
    if len(data) < _GRID_HEADER.size:
        raise FormatError("truncated grid header")
    magic, code, ndim, *dims = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise FormatError(f"bad grid magic {magic!r}")
    if code not in _DTYPES or not 1 <= ndim <= 3:
        raise FormatError(f"bad grid dtype code {code} or ndim {ndim}")
    shape = tuple(dims[:ndim])
    dtype = _DTYPES[code].newbyteorder("<")
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = data[_GRID_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"grid payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(_DTYPES[code])


def write_grid(path, array):
    atomic_write_bytes(path, encode_grid(array))


def read_grid(path):
    with open(path, "rb") as fh:
        return decode_grid(fh.read())


def encode_checkpoint(tensors, config):
    """Pack an ordered mapping of name -> numpy array plus a JSON config."""
    entries = []
    blobs = []
    offset = 0
    for name, value in tensors.items():
        arr = np.asarray(value)
        key = arr.dtype.name
        if key not in _NAMES:
            raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        blob = np.ascontiguousarray(arr, dtype=_NAMES[key]).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config, "tensors": entries}, sort_keys=True).encode("utf-8")
    return _CKPT_PREAMBLE.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + b"".join(blobs)


def decode_checkpoint(data):
    if len(data) < _CKPT_PREAMBLE.size:
        raise FormatError("truncated checkpoint")
    magic, version, hlen = _CKPT_PREAMBLE.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = _CKPT_PREAMBLE.size
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    body = data[start + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        chunk = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise FormatError(f"tensor {entry['name']!r} is truncated")
        dtype = _NAMES[entry["dtype"]]
        tensors[entry["name"]] = (
            np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        )
    return tensors, header["config"]


def write_checkpoint(path, tensors, config):
    atomic_write_bytes(path, encode_checkpoint(tensors, config))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
