"""Binary tensor container shared by checkpoints and corpus files.

Layout (all little-endian)::

    b"GRLMTL01"                      8-byte magic
    u32 count
    count x {
        u32 name_len, name (UTF-8)
        u32 rank
        u64 extents[rank]
        f64 data[prod(extents)]      row-major
    }
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

MAGIC = b"GRLMTL01"


class CheckpointError(Exception):
    pass


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d scalars 0-d
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def read_tensors(path) -> dict[str, np.ndarray]:
    """Read a container.  Any structural problem raises before anything is returned."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    reader = _Reader(buf, 8, path)
    (count,) = reader.unpack("<I")
    out = {}
    for _ in range(count):
        (n,) = reader.unpack("<I")
        name = reader.take(n).decode("utf-8")
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64)
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        out[name] = data.reshape(shape)
    if reader.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - reader.pos} trailing bytes")
    return out


class _Reader:
    def __init__(self, buf, pos, path):
        self.buf, self.pos, self.path = buf, pos, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


PARTITIONS = ("backbone.", "spk1.", "spk2.", "probe.")


@dataclass
class ParamStore:
    """Named parameter tensors, partitioned by name prefix.

    ``backbone.*`` is the recognition network, ``spk1.*`` the enhancing
    classifier, ``spk2.*`` the adversarial discriminator and ``probe.*`` the
    per-block analysis classifiers.
    """

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    rng_seed: int = 0

    def __getitem__(self, name):
        return self.entries[name]

    def __setitem__(self, name, value):
        self.entries[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self, prefix=""):
        return [k for k in self.entries if k.startswith(prefix)]

    def subset(self, prefix) -> "ParamStore":
        return ParamStore({k: v for k, v in self.entries.items() if k.startswith(prefix)},
                          self.rng_seed)

    def drop(self, prefix) -> "ParamStore":
        return ParamStore({k: v for k, v in self.entries.items() if not k.startswith(prefix)},
                          self.rng_seed)

    def update(self, other: "ParamStore | dict"):
        items = other.entries if isinstance(other, ParamStore) else other
        for k, v in items.items():
            self[k] = v

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.entries.items()}, self.rng_seed)

    def count(self, prefix=""):
        return int(sum(v.size for k, v in self.entries.items() if k.startswith(prefix)))

    def checksum(self, prefix="") -> str:
        h = hashlib.sha256()
        for k in sorted(self.names(prefix)):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.entries[k], dtype="<f8").tobytes())
        return h.hexdigest()


def save_checkpoint(params: ParamStore, path) -> None:
    write_tensors(path, params.entries)


def load_checkpoint(path) -> ParamStore:
    return ParamStore(read_tensors(path))
