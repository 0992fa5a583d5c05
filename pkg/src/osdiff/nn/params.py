"""Parameter store, optimizer, seeded RNG and the OSDM model-file format."""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

from .layers import NonFiniteError

MODEL_MAGIC = b"OSDM"
MODEL_VERSION = 1


class ParamStore:
    """Named view over the parameters of a module tree.

    Trainability is the ``requires_grad`` flag of each parameter, so frozen
    parameters never receive gradients and the optimizer never sees them.
    """

    def __init__(self, root: nn.Module):
        self.root = root

    def named(self, prefix: str = "") -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.root.named_parameters() if n.startswith(prefix)}

    def __getitem__(self, name):
        return self.named()[name]

    def __len__(self):
        return len(self.named())

    def trainable(self) -> dict[str, nn.Parameter]:
        return {n: p for n, p in self.named().items() if p.requires_grad}

    def set_trainable(self, prefix: str, flag: bool) -> None:
        hits = self.named(prefix)
        if not hits:
            raise KeyError(f"no parameters under {prefix!r}")
        for p in hits.values():
            p.requires_grad_(flag)
            if not flag:
                p.grad = None

    def freeze(self, prefix: str = "") -> None:
        self.set_trainable(prefix, False)

    def zero_grad(self) -> None:
        for p in self.root.parameters():
            p.grad = None

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named(prefix).items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def numpy_state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: p.detach().cpu().numpy() for n, p in self.named(prefix).items()}


def backward(loss: torch.Tensor, store: ParamStore | None = None) -> None:
    """Populate gradients of every trainable parameter reachable from ``loss``.

    Trainable parameters not reachable from the loss end up with a zero
    gradient rather than ``None``.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise RuntimeError("backward called on a tensor with no recorded graph")
    if not torch.isfinite(loss):
        raise NonFiniteError("loss", f"value {loss.item()}")
    loss.backward()
    if store is None:
        return
    for name, p in store.trainable().items():
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        elif not torch.isfinite(p.grad).all():
            raise NonFiniteError(f"backward into {name}")


class Adam:
    """Full-precision Adam over the trainable subset of a ParamStore."""

    def __init__(self, store: ParamStore, lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, prefix: str = ""):
        self.store = store
        self.prefix = prefix
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        self.steps = 0

    def step(self) -> None:
        params = {n: p for n, p in self.store.trainable().items() if n.startswith(self.prefix)}
        if not any(p.grad is not None for p in params.values()):
            raise RuntimeError("optimizer step before any backward pass")
        self.steps += 1
        adam_update(params, self.state, self.steps, self.lr, *self.betas, self.eps)


@torch.no_grad()
def adam_update(params: Mapping[str, nn.Parameter], state, step: int, lr: float,
                beta1: float, beta2: float, eps: float = 1e-8) -> None:
    bc1 = 1 - beta1 ** step
    bc2 = 1 - beta2 ** step
    for name, p in params.items():
        if p.grad is None or not p.requires_grad:
            continue
        m, v = state.get(name, (torch.zeros_like(p), torch.zeros_like(p)))
        m.mul_(beta1).add_(p.grad, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(p.grad, p.grad, value=1 - beta2)
        state[name] = (m, v)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              state: dict | None = None, step: int = 1) -> dict:
    """One Adam update of every trainable parameter in ``store``; returns the moment state."""
    params = store.trainable()
    if not any(p.grad is not None for p in params.values()):
        raise RuntimeError("optimizer step before any backward pass")
    state = {} if state is None else state
    adam_update(params, state, step, lr, beta1, beta2)
    return state


class Rng:
    """Seeded PCG64 stream; the same seed yields the same draws on every platform."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.gen.standard_normal(tuple(shape))).to(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.gen.uniform(low, high, tuple(shape))).to(dtype)

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size=size)

    def spawn(self, key: int) -> "Rng":
        return Rng((self.seed * 0x9E3779B97F4A7C15 + key) & 0xFFFFFFFFFFFFFFFF)


# model file -----------------------------------------------------------------

def write_model_file(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(pack_tensors(tensors))


def pack_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [MODEL_MAGIC, struct.pack("<HI", MODEL_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def read_model_file(path) -> dict[str, np.ndarray]:
    return unpack_tensors(Path(path).read_bytes())


def unpack_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MODEL_MAGIC:
        raise ValueError("not an OSDM model file")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {version}")
    pos = 10
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(data):
                raise ValueError(f"tensor {name!r} overruns the file")
            tensors[name] = np.frombuffer(data, "<f4", size, pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as exc:
        raise ValueError(f"truncated model file: {exc}") from None
    return tensors


def load_into(module: nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    params = dict(module.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            key = prefix + name
            if key not in tensors:
                raise KeyError(f"model file lacks {key!r}")
            src = torch.from_numpy(tensors[key])
            if src.shape != p.shape:
                raise ValueError(f"{key}: shape {tuple(src.shape)} != {tuple(p.shape)}")
            p.copy_(src)


def named_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + n: p.detach().cpu().float().numpy() for n, p in module.named_parameters()}


def digest(tensors: Mapping[str, np.ndarray], names: Iterable[str] | None = None) -> bytes:
    """8-byte fingerprint of the float32 bytes of the selected tensors."""
    h = hashlib.sha256()
    for name in sorted(names if names is not None else tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
    return h.digest()[:8]
