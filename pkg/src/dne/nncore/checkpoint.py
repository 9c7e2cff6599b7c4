"""Versioned binary checkpoint container.

Layout: magic "DNECKPT1", u32 parameter-record count, the records, u32
optimizer-record count, the records. Every record is: u32 name length, utf-8
name, u8 dtype tag, u8 ndim, u32 dims, raw little-endian values. Metadata
travels as a JSON payload in a uint8 record named "__meta__" inside the
parameter block. All integers little-endian; writing is deterministic
(records sorted by name), so identical states give identical bytes.
"""

import json
import struct

import numpy as np

MAGIC = b"DNECKPT1"
META_KEY = "__meta__"

_TAG_TO_DTYPE = {0: "<f4", 1: "<f8", 2: "<i8", 3: "|u1"}
_KIND_TO_TAG = {("f", 4): 0, ("f", 8): 1, ("i", 8): 2, ("u", 1): 3}


def _write_record(f, name, arr):
    arr = np.asarray(arr)
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _KIND_TO_TAG:
        raise ValueError(f"unsupported dtype {arr.dtype} for record {name!r}")
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<BB", _KIND_TO_TAG[key], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[_KIND_TO_TAG[key]]).tobytes())


def _read_record(f):
    (name_len,) = struct.unpack("<I", f.read(4))
    name = f.read(name_len).decode("utf-8")
    tag, ndim = struct.unpack("<BB", f.read(2))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    dtype = np.dtype(_TAG_TO_DTYPE[tag])
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype)
    return name, data.reshape(shape).copy()


def save_checkpoint(path, params, optimizer_state=None, meta=None):
    """Write name -> array maps; ``meta`` must be JSON-serializable."""
    param_records = {name: np.asarray(t.data if hasattr(t, "data") else t) for name, t in params.items()}
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        param_records[META_KEY] = np.frombuffer(blob, dtype=np.uint8).copy()
    opt_records = dict(optimizer_state or {})

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(param_records)))
        for name in sorted(param_records):
            _write_record(f, name, param_records[name])
        f.write(struct.pack("<I", len(opt_records)))
        for name in sorted(opt_records):
            _write_record(f, name, opt_records[name])


def load_checkpoint(path):
    """Returns (params, optimizer_state, meta)."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (n_params,) = struct.unpack("<I", f.read(4))
        params = dict(_read_record(f) for _ in range(n_params))
        (n_opt,) = struct.unpack("<I", f.read(4))
        opt = dict(_read_record(f) for _ in range(n_opt))
    meta = None
    if META_KEY in params:
        meta = json.loads(params.pop(META_KEY).tobytes().decode("utf-8"))
    return params, opt, meta
