"""Binary checkpoint: named float64 blobs, config hash, RNG state, epoch.

Layout, all integers little-endian::

    magic     8 bytes  b"SEMUXCKP"
    version   u32
    hash      32 bytes (SHA-256 of the model-defining config)
    epoch     u64
    rng_len   u32, then rng_len bytes of canonical JSON (bit generator state)
    n_blobs   u32
    per blob, sorted by name:
        name_len u16, name (UTF-8)
        ndim u32, ndim x u64 dims
        prod(dims) x float64

Blobs are written in name order and the RNG state as sorted-key JSON, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SEMUXCKP"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    blobs: dict[str, np.ndarray]
    config_hash: bytes
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)


def to_bytes(ck: Checkpoint) -> bytes:
    if len(ck.config_hash) != 32:
        raise CheckpointError(f"config hash must be 32 bytes, got {len(ck.config_hash)}")
    rng = json.dumps(ck.rng_state, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), ck.config_hash, struct.pack("<Q", ck.epoch),
           struct.pack("<I", len(rng)), rng, struct.pack("<I", len(ck.blobs))]
    for name in sorted(ck.blobs):
        arr = np.asarray(ck.blobs[name])
        if np.iscomplexobj(arr):
            raise CheckpointError(f"blob {name!r} is complex; store real and imaginary parts separately")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw: bytes, source: str = "<checkpoint>") -> Checkpoint:
    r = _Reader(raw, source)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{source}: format version {version}, this build reads {VERSION}")
    config_hash = r.take(32)
    (epoch,) = r.unpack("<Q")
    (rng_len,) = r.unpack("<I")
    rng_state = json.loads(r.take(rng_len).decode("utf-8"))
    (n_blobs,) = r.unpack("<I")
    blobs = {}
    for _ in range(n_blobs):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - r.pos} trailing bytes")
    return Checkpoint(blobs=blobs, config_hash=config_hash, epoch=epoch, rng_state=rng_state)


def save(path: str | Path, ck: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ck))


def load(path: str | Path, expected_hash: bytes | None = None, force: bool = False) -> Checkpoint:
    """Read a checkpoint; a config-hash mismatch is an error unless ``force``."""
    path = Path(path)
    ck = from_bytes(path.read_bytes(), source=str(path))
    if expected_hash is not None and ck.config_hash != expected_hash and not force:
        raise CheckpointError(f"{path}: written for a different model configuration "
                              f"(hash {ck.config_hash.hex()[:12]}, config {expected_hash.hex()[:12]}); "
                              "pass --force to load anyway")
    return ck


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    name = state.get("bit_generator", "PCG64")
    bitgen = getattr(np.random, name)()
    bitgen.state = state
    return np.random.Generator(bitgen)


def realization_blobs(taps: np.ndarray, prefix: str = "channel.taps") -> dict[str, np.ndarray]:
    """Complex channel taps as a pair of real blobs."""
    return {f"{prefix}.re": np.ascontiguousarray(taps.real), f"{prefix}.im": np.ascontiguousarray(taps.imag)}


def taps_from_blobs(blobs: dict[str, np.ndarray], prefix: str = "channel.taps") -> np.ndarray:
    return blobs[f"{prefix}.re"] + 1j * blobs[f"{prefix}.im"]
