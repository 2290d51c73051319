"""Binary restart checkpoints.

Layout (all little-endian):

    bytes 0-3   magic "PFEM"
    u32         format version (currently 1)
    u64         scheme identifier length, followed by that many utf-8 bytes
    u64         step index
    f64         time t
    f64         next time step dt
    u64         velocity length, followed by that many f64
    u64         pressure length, followed by that many f64

Vectors are stored in global numbering exactly as held in memory, so a
write -> read round trip is bitwise and a restarted run reproduces the
uninterrupted trajectory bit for bit.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MAGIC = b"PFEM"
VERSION = 1


@dataclass
class Checkpoint:
    step: int
    t: float
    dt_next: float
    u: np.ndarray
    p: np.ndarray
    scheme: str
    version: int = VERSION


def write_checkpoint(path, step, t, dt_next, u, p, scheme=""):
    """u and p are global coefficient vectors (any array-like of float64)."""
    u = np.ascontiguousarray(u, dtype="<f8")
    p = np.ascontiguousarray(p, dtype="<f8")
    enc = scheme.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(enc)))
        fh.write(enc)
        fh.write(struct.pack("<Q", int(step)))
        fh.write(struct.pack("<dd", float(t), float(dt_next)))
        fh.write(struct.pack("<Q", u.size))
        fh.write(u.tobytes())
        fh.write(struct.pack("<Q", p.size))
        fh.write(p.tobytes())


def _take(buf, offset, n, what):
    if offset + n > len(buf):
        raise ConfigError(f"checkpoint truncated while reading {what}")
    return buf[offset:offset + n], offset + n


def read_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0
    magic, off = _take(buf, off, 4, "magic")
    if magic != MAGIC:
        raise ConfigError(f"not a checkpoint file (magic {magic!r})")
    raw, off = _take(buf, off, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    raw, off = _take(buf, off, 8, "scheme length")
    (nscheme,) = struct.unpack("<Q", raw)
    raw, off = _take(buf, off, nscheme, "scheme")
    scheme = raw.decode("utf-8")
    raw, off = _take(buf, off, 8, "step")
    (step,) = struct.unpack("<Q", raw)
    raw, off = _take(buf, off, 16, "time header")
    t, dt_next = struct.unpack("<dd", raw)
    raw, off = _take(buf, off, 8, "velocity length")
    (nu,) = struct.unpack("<Q", raw)
    raw, off = _take(buf, off, 8 * nu, "velocity")
    u = np.frombuffer(raw, dtype="<f8").copy()
    raw, off = _take(buf, off, 8, "pressure length")
    (npr,) = struct.unpack("<Q", raw)
    raw, off = _take(buf, off, 8 * npr, "pressure")
    p = np.frombuffer(raw, dtype="<f8").copy()
    return Checkpoint(step=int(step), t=t, dt_next=dt_next, u=u, p=p,
                      scheme=scheme, version=version)
