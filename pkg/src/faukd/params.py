"""Parameter containers: init helpers, traversal, and path-based access.

Model parameters live in nested dataclasses whose leaves are `Tensor`
(trainable, requires_grad=True) or plain numpy arrays (fixed buffers such
as positional tables and batch-norm running statistics). The traversal
order is the dataclass field order, which keeps checkpoint layouts and
optimizer state deterministic.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import BatchNormState, Tensor


@dataclass
class Affine:
    """y = x @ w + b applied to the last axis."""

    w: Tensor
    b: Tensor


def affine(x, p: Affine):
    return x @ p.w + p.b


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def make_affine(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Affine:
    return Affine(w=xavier_uniform(rng, fan_in, fan_out, dtype), b=zeros_param((fan_out,), dtype))


def zero_affine(fan_in: int, fan_out: int, dtype) -> Affine:
    return Affine(w=zeros_param((fan_in, fan_out), dtype), b=zeros_param((fan_out,), dtype))


def he_normal_conv(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int, dtype) -> Tensor:
    std = np.sqrt(2.0 / (kh * kw * cin))
    return Tensor(rng.normal(0.0, std, size=(kh, kw, cin, cout)).astype(dtype), requires_grad=True)


def _children(obj) -> Iterator[tuple[str, object]]:
    if isinstance(obj, BatchNormState):
        yield "scale", obj.scale
        yield "offset", obj.offset
        yield "running_mean", obj.running_mean
        yield "running_var", obj.running_var
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield f.name, getattr(obj, f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield str(i), item


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """All trainable tensors under `obj`, depth first in field order."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
        return
    if isinstance(obj, np.ndarray):
        return
    for name, child in _children(obj):
        sub = f"{prefix}.{name}" if prefix else name
        yield from named_tensors(child, sub)


def named_arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """All persistable arrays under `obj`: tensor values and buffers."""
    if isinstance(obj, Tensor):
        yield prefix, obj.data
        return
    if isinstance(obj, np.ndarray):
        yield prefix, obj
        return
    for name, child in _children(obj):
        sub = f"{prefix}.{name}" if prefix else name
        yield from named_arrays(child, sub)


def _walk(obj, segments: list[str]):
    for seg in segments:
        if isinstance(obj, (list, tuple)):
            obj = obj[int(seg)]
        else:
            obj = getattr(obj, seg)
    return obj


def get_by_path(root, path: str):
    return _walk(root, path.split("."))


def set_by_path(root, path: str, value) -> None:
    """Replace the leaf at `path`; value may be a Tensor or numpy array."""
    segments = path.split(".")
    holder = _walk(root, segments[:-1])
    leaf = segments[-1]
    if isinstance(holder, list):
        holder[int(leaf)] = value
        return
    current = getattr(holder, leaf)
    if isinstance(current, Tensor) and isinstance(value, np.ndarray):
        value = Tensor(value, requires_grad=current.requires_grad)
    setattr(holder, leaf, value)


def load_arrays(root, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    """Fill every leaf under `root` from `arrays`; missing names are errors."""
    for name, current in list(named_arrays(root, prefix)):
        if name not in arrays:
            raise KeyError(f"checkpoint is missing entry {name!r}")
        new = arrays[name]
        if tuple(new.shape) != tuple(current.shape):
            raise ValueError(f"shape mismatch for {name!r}: {new.shape} vs {current.shape}")
        rel = name[len(prefix) + 1 :] if prefix else name
        set_by_path(root, rel, new.copy())


def freeze(obj):
    """Deep copy of a parameter tree with every tensor detached (no grads)."""
    if isinstance(obj, Tensor):
        return Tensor(obj.data)
    if isinstance(obj, np.ndarray):
        return obj.copy()
    if isinstance(obj, BatchNormState):
        return BatchNormState(
            scale=Tensor(obj.scale.data),
            offset=Tensor(obj.offset.data),
            running_mean=obj.running_mean.copy(),
            running_var=obj.running_var.copy(),
            momentum=obj.momentum,
            eps=obj.eps,
        )
    if dataclasses.is_dataclass(obj):
        kwargs = {f.name: freeze(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [freeze(x) for x in obj]
    if isinstance(obj, tuple):
        return tuple(freeze(x) for x in obj)
    return obj


def clone(obj):
    """Deep copy preserving requires_grad flags (warm starts)."""
    if isinstance(obj, Tensor):
        return Tensor(obj.data.copy(), requires_grad=obj.requires_grad)
    if isinstance(obj, np.ndarray):
        return obj.copy()
    if isinstance(obj, BatchNormState):
        return obj.copy()
    if dataclasses.is_dataclass(obj):
        kwargs = {f.name: clone(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [clone(x) for x in obj]
    if isinstance(obj, tuple):
        return tuple(clone(x) for x in obj)
    return obj
