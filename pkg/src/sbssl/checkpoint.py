"""Single-file checkpoints.

Layout (all integers little-endian)::

    8 bytes   magic b"SBSSLCKP"
    u32       format version
    u64       metadata length in bytes
    ...       UTF-8 JSON metadata
    ...       zero padding to a 64-byte boundary
    ...       raw little-endian parameter buffers

The metadata's ``tensors`` list gives name, dtype, shape, offset and nbytes of
each buffer, offsets relative to the start of the buffer region.
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SBSSLCKP"
VERSION = 1
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64}


class CheckpointError(ValueError):
    pass


def save(path, arrays, meta):
    """Write ``arrays`` (name -> ndarray) and JSON-serialisable ``meta``."""
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        descr = arr.dtype.newbyteorder("<").str
        if descr not in _DTYPES:
            raise CheckpointError(f"{name}: dtype {arr.dtype} cannot be stored")
        raw = np.ascontiguousarray(arr, dtype=descr).tobytes()
        entries.append({"name": name, "dtype": descr, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    body = json.dumps({**meta, "tensors": entries}, sort_keys=True).encode("utf8")
    head = MAGIC + struct.pack("<IQ", VERSION, len(body)) + body
    head += b"\0" * (-len(head) % 64)
    Path(path).write_bytes(head + b"".join(blobs))


def load(path):
    """Return (meta, arrays)."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, mlen = struct.unpack("<IQ", buf[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(buf[20:20 + mlen].decode("utf8"))
    start = 20 + mlen
    start += -start % 64
    arrays = {}
    for e in meta.pop("tensors"):
        lo = start + e["offset"]
        raw = buf[lo:lo + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: buffer for {e['name']} is truncated")
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return meta, arrays
