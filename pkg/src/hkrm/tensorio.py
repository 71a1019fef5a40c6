"""Named-tensor container used for checkpoints and prior graphs.

Byte layout (version 1)::

    line 1   UTF-8 JSON header terminated by b"\\n", serialized with sorted
             keys and separators (",", ":"):
               {"format": "hkrm-tensors", "version": 1,
                "meta": {...},
                "tensors": [{"name": str, "shape": [int, ...],
                             "offset": int, "nbytes": int}, ...]}
    payload  concatenated tensors, float64 little endian, row-major (C order);
             ``offset`` counts bytes from the first payload byte.

Writes go to a temporary file in the target directory followed by a rename.
"""

import json
import os
import tempfile

import numpy as np

FORMAT = "hkrm-tensors"
VERSION = 1


class ContainerError(ValueError):
    """Raised for malformed, truncated, or wrong-version container files."""


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
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


def encode(tensors, meta=None):
    """Serialize an ordered mapping of name -> array to bytes."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")
        raw = a.tobytes(order="C")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"format": FORMAT, "version": VERSION, "meta": meta or {}, "tensors": entries}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    return head + b"".join(chunks)


def decode(data):
    """Inverse of encode. Returns (tensors, meta)."""
    nl = data.find(b"\n")
    if nl < 0:
        raise ContainerError("missing header terminator (truncated file?)")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise ContainerError("not an hkrm-tensors container")
    if header.get("version") != VERSION:
        raise ContainerError(f"unsupported container version {header.get('version')!r}, expected {VERSION}")
    payload = data[nl + 1:]
    tensors = {}
    for entry in header["tensors"]:
        start = entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(payload):
            raise ContainerError(
                f"truncated payload: tensor {entry['name']!r} needs bytes {start}..{stop}, file has {len(payload)}"
            )
        shape = tuple(entry["shape"])
        expected = 8 * int(np.prod(shape, dtype=np.int64))
        if expected != entry["nbytes"]:
            raise ContainerError(f"tensor {entry['name']!r}: shape {shape} does not match {entry['nbytes']} bytes")
        arr = np.frombuffer(payload[start:stop], dtype="<f8").reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float64)
    return tensors, header["meta"]


def save(path, tensors, meta=None):
    atomic_write_bytes(path, encode(tensors, meta))


def load(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
