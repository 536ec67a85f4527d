"""Binary checkpoint format.

Layout (little-endian)::

    magic      4 bytes   b"KSHD"
    version    u32
    spec hash  u64
    n params   u64
    params     n * f64   (layer order)
    meta len   u64       \
    meta       utf-8     / JSON: model spec, epochs, training kind, seed

The trailing metadata block lets a checkpoint be loaded without a separate
spec file; readers that only need the parameters may ignore it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .network import ModelSpec, Network

MAGIC = b"KSHD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: np.ndarray
    epochs: int = 0
    kind: str = "Std"
    seed: int = 0
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.size != self.spec.param_count():
            raise CheckpointError(
                f"checkpoint holds {self.params.size} parameters, spec declares {self.spec.param_count()}"
            )

    @classmethod
    def from_network(cls, net: Network, **kwargs) -> "Checkpoint":
        return cls(net.spec, net.flat_parameters(), **kwargs)

    def to_network(self, dtype=np.float64) -> Network:
        net = Network(self.spec, dtype=dtype)
        net.load_flat(self.params)
        return net

    def to_bytes(self) -> bytes:
        meta = json.dumps({
            "spec": self.spec.to_dict(),
            "epochs": self.epochs,
            "kind": self.kind,
            "seed": self.seed,
            "metadata": self.metadata,
        }, sort_keys=True).encode("utf-8")
        header = _HEADER.pack(MAGIC, self.version, self.spec.spec_hash(), self.params.size)
        return header + self.params.astype("<f8").tobytes() + struct.pack("<Q", len(meta)) + meta

    @classmethod
    def from_bytes(cls, blob: bytes, spec: Optional[ModelSpec] = None) -> "Checkpoint":
        if len(blob) < _HEADER.size:
            raise CheckpointError(f"truncated header: {len(blob)} bytes")
        magic, version, spec_hash, count = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r} at offset 0")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = _HEADER.size
        end = start + 8 * count
        if len(blob) < end:
            raise CheckpointError(f"parameter block truncated at offset {len(blob)}, expected {end}")
        params = np.frombuffer(blob, dtype="<f8", count=count, offset=start).astype(np.float64)

        meta = {}
        if len(blob) >= end + 8:
            (mlen,) = struct.unpack_from("<Q", blob, end)
            meta = json.loads(blob[end + 8:end + 8 + mlen].decode("utf-8"))
        if spec is None:
            if "spec" not in meta:
                raise CheckpointError("checkpoint has no embedded spec; pass one explicitly")
            spec = ModelSpec.from_dict(meta["spec"])
        if spec.spec_hash() != spec_hash:
            raise CheckpointError(
                f"spec hash mismatch: file {spec_hash:#018x}, spec {spec.spec_hash():#018x}"
            )
        return cls(spec, params, epochs=meta.get("epochs", 0), kind=meta.get("kind", "Std"),
                   seed=meta.get("seed", 0), metadata=meta.get("metadata", {}), version=version)


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path: Union[str, Path], spec: Optional[ModelSpec] = None) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes(), spec)
