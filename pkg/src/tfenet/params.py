"""Parameter store, SGD with momentum, and checkpoint files.

Parameters are named numpy arrays with a paired gradient buffer and an
optional learning-rate multiplier (used to slow the angle branches in
the encoder).  Checkpoints are a JSON manifest plus one contiguous
little-endian float32 blob; momentum buffers are not persisted.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArgumentError, VolumeFormatError


@dataclass
class Param:
    """One learnable tensor with its gradient accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray
    lr_multiplier: float = 1.0


class ParamStore:
    """Ordered registry of parameters, keyed by unique dotted names."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, lr_multiplier: float = 1.0) -> Param:
        if name in self._params:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        v = np.asarray(value, dtype=self.dtype)
        p = Param(name=name, value=v, grad=np.zeros_like(v), lr_multiplier=lr_multiplier)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(p.value.size for p in self._params.values())

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store with values cast to ``dtype`` (fresh grads)."""
        out = ParamStore(dtype=dtype)
        for p in self._params.values():
            out.add(p.name, p.value.astype(dtype), lr_multiplier=p.lr_multiplier)
        return out

    def load_values(self, other: "ParamStore") -> None:
        """Copy values from a store with identical names and shapes."""
        if other.names() != self.names():
            raise ArgumentError("parameter name lists differ")
        for name in self.names():
            src, dst = other[name], self._params[name]
            if src.value.shape != dst.value.shape:
                raise ArgumentError(
                    f"shape mismatch for {name}: {src.value.shape} vs {dst.value.shape}")
            dst.value[...] = src.value.astype(self.dtype)


class SGD:
    """Stochastic gradient descent with classical momentum.

    v <- momentum * v + grad;  p <- p - lr * lr_multiplier * v.
    Gradients are zeroed after each step.
    """

    def __init__(self, store: ParamStore, lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ArgumentError(f"lr must be > 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ArgumentError(f"momentum must be in [0, 1), got {momentum}")
        self.store = store
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = {p.name: np.zeros_like(p.value) for p in store}

    def step(self) -> None:
        for p in self.store:
            v = self._velocity[p.name]
            v *= self.momentum
            v += p.grad
            p.value -= (self.lr * p.lr_multiplier) * v
        self.store.zero_grads()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(store: ParamStore, path: str | Path, meta: dict | None = None) -> None:
    """Write the store to ``path`` (JSON manifest) plus a sibling .blob file.

    Values are serialised as little-endian float32 in registration
    order; each manifest entry records name, shape, dtype, byte_offset
    and lr_multiplier.
    """
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for p in store:
        a = np.ascontiguousarray(p.value, dtype="<f4")
        entries.append({
            "name": p.name,
            "shape": list(a.shape),
            "dtype": "f32",
            "byte_offset": offset,
            "lr_multiplier": p.lr_multiplier,
        })
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = {"format": "tfenet-checkpoint-v1", "entries": entries,
                "meta": meta or {}}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    path.with_suffix(".blob").write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    """Read a checkpoint into a fresh float32 store; returns (store, meta)."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"malformed checkpoint manifest {path}: {e}", byte_offset=e.pos)
    if manifest.get("format") != "tfenet-checkpoint-v1":
        raise VolumeFormatError(f"{path}: unrecognised checkpoint format")
    blob = path.with_suffix(".blob").read_bytes()
    store = ParamStore(dtype=np.float32)
    for ent in manifest["entries"]:
        shape = tuple(ent["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = int(ent["byte_offset"])
        end = start + 4 * n
        if end > len(blob):
            raise VolumeFormatError(
                f"{path}: blob ends at {len(blob)}, entry {ent['name']!r} needs {end}",
                byte_offset=len(blob))
        a = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape).astype(np.float32)
        store.add(ent["name"], a, lr_multiplier=float(ent.get("lr_multiplier", 1.0)))
    return store, manifest.get("meta", {})
