"""Module containers, parameter initialisation and the binary checkpoint format."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import ContractError, Parameter, Tensor, batch_norm

MAGIC = b"DBGI"
VERSION = 1


class Module:
    """Tree of named parameters, submodules and non-trainable buffers."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator[Module]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def name_parameters(self, prefix: str = "") -> None:
        """Stamp every Parameter with its dotted path, which is also its checkpoint key."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for mname, m in _named_modules(self):
            if isinstance(m, BatchNorm):
                state[f"{mname}running_mean"] = m.running_mean
                state[f"{mname}running_var"] = m.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching arrays in; return the keys of the model that were missing."""
        missing = []
        targets: dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        for mname, m in _named_modules(self):
            if isinstance(m, BatchNorm):
                targets[f"{mname}running_mean"] = m.running_mean
                targets[f"{mname}running_var"] = m.running_var
        for key, arr in targets.items():
            if key not in state:
                missing.append(key)
                continue
            if state[key].shape != arr.shape:
                raise ContractError(f"checkpoint tensor {key} has shape {state[key].shape}, model expects {arr.shape}")
            arr[...] = state[key]
        if strict and missing:
            raise ContractError(f"checkpoint is missing {len(missing)} tensors, e.g. {missing[0]}")
        unexpected = sorted(set(state) - set(targets))
        if strict and unexpected:
            raise ContractError(f"checkpoint has {len(unexpected)} tensors the model lacks, e.g. {unexpected[0]}")
        return missing


def _named_modules(mod: Module, prefix: str = "") -> Iterator[tuple[str, Module]]:
    yield prefix, mod
    for key, val in vars(mod).items():
        if isinstance(val, Module):
            yield from _named_modules(val, f"{prefix}{key}.")
        elif isinstance(val, (list, tuple)):
            for i, item in enumerate(val):
                if isinstance(item, Module):
                    yield from _named_modules(item, f"{prefix}{key}.{i}.")


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels), decay=False)
        self.beta = Parameter(np.zeros(channels), decay=False)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training=self.training, momentum=self.momentum, eps=self.eps)


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=shape)


def glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------- checkpoint file


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors in the flat DBGI format (float32 payload, little-endian)."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ContractError(f"{path}: not a DBGI checkpoint")
    try:
        return _parse_checkpoint(buf, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ContractError):
            raise
        raise ContractError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(buf: bytes, path) -> dict[str, np.ndarray]:
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).astype(np.float64)
        off += 4 * size
        out[name] = arr.reshape(shape)
    if off != len(buf):
        raise ContractError(f"{path}: {len(buf) - off} trailing bytes after last tensor")
    return out
