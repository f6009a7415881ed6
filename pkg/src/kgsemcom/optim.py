"""Named parameter storage, the Adam optimizer, and checkpoint files.

Checkpoint format (little-endian throughout):

    magic  b"KGSC"
    u32    format version (currently 1)
    u32    entry count
    entry: u16 name length, utf-8 name, u8 ndim, u32 dims..., f64 payload

The writer is hand-rolled so identical inputs produce byte-identical
files.
"""

from __future__ import annotations

import struct
from typing import Iterator

import numpy as np

from .errors import DataError, ShapeMismatchError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"KGSC"
CHECKPOINT_VERSION = 1


class ParameterStore:
    """Uniquely named trainable tensors with matching gradient slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ShapeMismatchError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True):
        for name, t in self._params.items():
            if name not in arrays:
                if strict:
                    raise DataError(f"checkpoint missing parameter {name!r}")
                continue
            arr = arrays[name]
            if arr.shape != t.data.shape:
                raise ShapeMismatchError(
                    f"checkpoint shape {arr.shape} != expected {t.data.shape} for {name!r}")
            t.data = np.array(arr, dtype=np.float64)
            t.grad = np.zeros_like(t.data)


def save_arrays(path, arrays: dict[str, np.ndarray]):
    """Write named float64 arrays in the versioned checkpoint container."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype="<f8")
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[name] = arr.astype(np.float64)
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes after checkpoint payload")
    return out


class Adam:
    """Bias-corrected Adam over a ParameterStore."""

    def __init__(self, store: ParameterStore, lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in store.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in store.items()}

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def zero_grad(self):
        self.store.zero_grads()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.t = int(arrays["adam.t"][0])
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=np.float64)


def adam_step(store: ParameterStore, state: Adam):
    """Apply one Adam update to every parameter in the store."""
    state.step()
