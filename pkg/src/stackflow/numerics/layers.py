"""Parameter stores and the handful of layers every network here is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Node


class ParamStore:
    """Ordered name -> parameter node mapping with prefix views."""

    def __init__(self):
        self._nodes: dict[str, Node] = {}

    def add(self, name: str, value) -> Node:
        if name in self._nodes:
            raise KeyError(f"duplicate parameter {name!r}")
        node = T.parameter(value, name=name)
        self._nodes[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._nodes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._nodes

    def __iter__(self) -> Iterator[str]:
        return iter(self._nodes)

    def __len__(self) -> int:
        return len(self._nodes)

    def items(self):
        return self._nodes.items()

    def nodes(self) -> list[Node]:
        return list(self._nodes.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self._nodes.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._nodes) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for k, node in self._nodes.items():
            a = T.as_matrix(arrays[k])
            if a.shape != node.shape:
                raise T.DimensionError(f"{k}: checkpoint shape {a.shape} != {node.shape}")
            node.value = a.copy()

    def zero_grad(self) -> None:
        for node in self._nodes.values():
            node.grad = None

    def count(self) -> int:
        return int(sum(n.value.size for n in self._nodes.values()))


def init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, gain: float = 1.0) -> None:
    bound = gain * math.sqrt(6.0 / (n_in + n_out))
    store.add(f"{name}.weight", rng.uniform(-bound, bound, size=(n_in, n_out)))
    if bias:
        store.add(f"{name}.bias", np.zeros((1, n_out)))


def linear(x: Node, store: ParamStore, name: str) -> Node:
    out = T.matmul(x, store[f"{name}.weight"])
    bname = f"{name}.bias"
    return T.add(out, store[bname]) if bname in store else out


def init_layer_norm(store: ParamStore, name: str, width: int) -> None:
    store.add(f"{name}.scale", np.ones((1, width)))
    store.add(f"{name}.shift", np.zeros((1, width)))


def layer_norm(x: Node, store: ParamStore, name: str, eps: float = 1e-5) -> Node:
    return T.layer_norm(x, store[f"{name}.scale"], store[f"{name}.shift"], eps)


def init_mlp(store: ParamStore, name: str, sizes: list[int], rng: np.random.Generator) -> None:
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        init_linear(store, f"{name}.{i}", a, b, rng)


def mlp(x: Node, store: ParamStore, name: str, depth: int) -> Node:
    """``depth`` linear layers with GELU between them (none after the last)."""
    for i in range(depth):
        x = linear(x, store, f"{name}.{i}")
        if i < depth - 1:
            x = T.gelu(x)
    return x


def sinusoidal(values: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved ``(sin, cos)`` features at geometric frequencies.

    Column ``2j`` is ``sin(v * f_j)`` and ``2j+1`` is ``cos(v * f_j)`` with
    ``f_j = max_period ** (-j / (dim/2))``.
    """
    if dim % 2:
        raise ValueError("sinusoidal dim must be even")
    v = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = max_period ** (-np.arange(half) / half)
    ang = v * freqs[None, :]
    out = np.empty((v.shape[0], dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out
