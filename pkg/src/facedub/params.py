"""Named parameter stores, seeded initializers, checkpoint IO, optimizers."""
from __future__ import annotations

import struct

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"G4GCKPT1"


class ParamStore(dict):
    """Ordered mapping of parameter name -> trainable Tensor."""

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        tensor = Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)
        self[name] = tensor
        return tensor

    def trainable(self) -> list:
        return [(name, t) for name, t in self.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def freeze(self, prefix: str = "") -> None:
        for name, t in self.items():
            if name.startswith(prefix):
                t.requires_grad = False

    def grads_finite(self) -> bool:
        return all(
            t.grad is None or np.all(np.isfinite(t.grad)) for t in self.values()
        )


def conv_init(rng: np.random.Generator, out_ch: int, in_ch: int, k: int, scale: float = 1.0):
    fan_in = in_ch * k * k
    return rng.normal(0.0, scale / np.sqrt(fan_in), size=(out_ch, in_ch, k, k))


def fc_init(rng: np.random.Generator, out_dim: int, in_dim: int, scale: float = 1.0):
    return rng.normal(0.0, scale / np.sqrt(in_dim), size=(out_dim, in_dim))


def save_checkpoint(path, store: ParamStore) -> None:
    """Record layout per tensor: name length, name bytes, rank, extents, f32 data."""
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        for name in sorted(store):
            data = store[name].data
            encoded = name.encode("utf-8")
            handle.write(struct.pack("<I", len(encoded)))
            handle.write(encoded)
            handle.write(struct.pack("<I", data.ndim))
            handle.write(struct.pack(f"<{data.ndim}I", *data.shape))
            handle.write(data.astype("<f4").tobytes())


def load_checkpoint(path) -> ParamStore:
    store = ParamStore()
    with open(path, "rb") as handle:
        magic = handle.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        while True:
            head = handle.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = handle.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", handle.read(4))
            shape = struct.unpack(f"<{rank}I", handle.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(handle.read(4 * count), dtype="<f4")
            if data.size != count:
                raise ValueError(f"{path}: truncated checkpoint at {name!r}")
            store.add(name, data.astype(np.float64).reshape(shape))
    return store


class Sgd:
    """Plain stochastic gradient descent."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, named_params) -> None:
        for _, t in named_params:
            if t.grad is not None:
                t.data = t.data - self.lr * t.grad


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self, named_params) -> None:
        for name, t in named_params:
            if t.grad is None:
                continue
            m, v, k = self.state.get(name, (0.0, 0.0, 0))
            k += 1
            m = self.beta1 * m + (1 - self.beta1) * t.grad
            v = self.beta2 * v + (1 - self.beta2) * t.grad * t.grad
            self.state[name] = (m, v, k)
            m_hat = m / (1 - self.beta1**k)
            v_hat = v / (1 - self.beta2**k)
            t.data = t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r} (expected 'sgd' or 'adam')")
