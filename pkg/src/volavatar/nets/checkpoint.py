"""Checkpoint container: a text header of named blobs followed by raw data.

Layout::

    VACKPT 1 <header bytes>\\n
    seed <int>\\n
    meta <json on one line>\\n
    blob <name> <dtype> <d0,d1,...> <offset> <nbytes>\\n
    ...
    end\\n
    <raw little-endian data, offsets relative to the end of the header>
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = "VACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, blobs, seed=0, meta=None):
    lines = [f"seed {int(seed)}", "meta " + json.dumps(meta or {}, sort_keys=True)]
    offset = 0
    payload = []
    for name in sorted(blobs):
        if any(c.isspace() for c in name):
            raise CheckpointError(f"blob name may not contain whitespace: {name!r}")
        arr = np.ascontiguousarray(blobs[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"blob {name} {arr.dtype.str} {shape} {offset} {arr.nbytes}")
        payload.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    body = ("\n".join(lines) + "\n").encode()
    first = f"{MAGIC} {VERSION} {len(body)}\n".encode()
    with open(path, "wb") as fh:
        fh.write(first)
        fh.write(body)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path):
    """Returns ``(blobs, seed, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.index(b"\n")
    first = data[:nl].decode().split()
    if len(first) != 3 or first[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if int(first[1]) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {first[1]}")
    hlen = int(first[2])
    header = data[nl + 1:nl + 1 + hlen].decode().splitlines()
    base = nl + 1 + hlen
    blobs, seed, meta = {}, 0, {}
    for line in header:
        parts = line.split(" ", 1)
        if parts[0] == "seed":
            seed = int(parts[1])
        elif parts[0] == "meta":
            meta = json.loads(parts[1])
        elif parts[0] == "blob":
            name, dt, shape, off, nbytes = parts[1].split(" ")
            shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            off, nbytes = int(off), int(nbytes)
            raw = data[base + off:base + off + nbytes]
            if len(raw) != nbytes:
                raise CheckpointError(f"truncated blob {name}")
            blobs[name] = np.frombuffer(raw, dtype=np.dtype(dt)).reshape(shape).copy()
        elif parts[0] == "end":
            break
        else:
            raise CheckpointError(f"unknown header line {line!r}")
    return blobs, seed, meta
