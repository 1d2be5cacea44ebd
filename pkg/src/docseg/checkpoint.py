"""Binary checkpoint container.

Layout (all integers little-endian):

    magic     4 bytes  b"DSKT"
    version   u32      currently 1
    digest    64 bytes ASCII hex sha256 of the architecture config
    count     u32      number of entries
    entry*    name: u16 length + UTF-8 bytes
              ndim: u8
              dims: ndim x u32
              data: product(dims) float32 values, little-endian

Entries are written sorted by name so identical contents produce identical
bytes. The digest ties a checkpoint to the exact model configuration; load
returns it for the caller to verify.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InputError

MAGIC = b"DSKT"
VERSION = 1
_DIGEST_LEN = 64


def save_checkpoint(path, entries: dict[str, np.ndarray], config_digest: str) -> None:
    if len(config_digest) != _DIGEST_LEN:
        raise InputError(f"config digest must be {_DIGEST_LEN} hex chars")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += config_digest.encode("ascii")
    blob += struct.pack("<I", len(entries))
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f4")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise InputError(f"truncated checkpoint file: {self.path}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Read all entries; returns (entries, config_digest)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise InputError(f"{path} is not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise InputError(f"unsupported checkpoint version {version} in {path}")
    digest = r.take(_DIGEST_LEN).decode("ascii")
    (count,) = r.unpack("<I")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        if name in entries:
            raise InputError(f"duplicate entry {name!r} in {path}")
        entries[name] = data.astype(np.float32)
    if r.pos != len(raw):
        raise InputError(f"trailing bytes after last entry in {path}")
    return entries, digest
