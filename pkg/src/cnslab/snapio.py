"""Binary snapshot format for strip and layer fields.

Layout (little-endian): magic "CNSF", u32 version, u32 nx, u32 ny,
f64 Lx, f64 Ly, f64 time, u8 quantity tag, then nx*ny f64 values in
x-major order.  Layer snapshots reuse the container with (ny, Ly)
holding (nz, Lz).
"""

import struct

import numpy as np

MAGIC = b"CNSF"
VERSION = 1

# quantity tags
TAGS = {
    "m": 1, "c": 2, "u1": 3, "u2": 4, "p": 5,
    "cB1": 10, "mB1": 11, "cB2": 12, "mB2": 13, "pB2": 14,
    "Gamma": 15, "Theta": 16, "xi": 17,
}
TAG_NAMES = {v: k for k, v in TAGS.items()}

_HEADER = struct.Struct("<4sIII dddB")


def write_snapshot(path, values, lx, ly, time, tag):
    """Write one field; values is (nx, ny) float64, tag a name or byte."""
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError("snapshot payload must be 2-D")
    if isinstance(tag, str):
        tag = TAGS[tag]
    nx, ny = values.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, nx, ny,
                              float(lx), float(ly), float(time), tag))
        fh.write(values.tobytes())


def read_snapshot(path):
    """Read a snapshot, returning (values, meta dict)."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, version, nx, ny, lx, ly, time, tag = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        if version != VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        payload = fh.read(nx * ny * 8)
        if len(payload) != nx * ny * 8:
            raise ValueError(f"truncated snapshot {path}")
    values = np.frombuffer(payload, dtype="<f8").reshape(nx, ny).copy()
    meta = {"nx": nx, "ny": ny, "lx": lx, "ly": ly, "time": time,
            "tag": tag, "name": TAG_NAMES.get(tag, str(tag))}
    return values, meta
