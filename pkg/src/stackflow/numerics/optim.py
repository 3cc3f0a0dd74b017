"""Adam with global L2 gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import ParamStore
from .tensor import NumericsError


class OptimizerMisuse(NumericsError):
    pass


@dataclass
class OptimizerState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    last_grad_norm: float = 0.0


def global_grad_norm(store: ParamStore) -> float:
    total = 0.0
    for _, node in store.items():
        if node.grad is not None:
            total += float(np.sum(node.grad * node.grad))
    return float(np.sqrt(total))


def adam_step(store: ParamStore, opt: OptimizerState, frozen: frozenset[str] = frozenset()) -> OptimizerState:
    """One clipped, bias-corrected Adam update; zeroes gradients afterwards.

    Parameters without a gradient (unused in this step) are left untouched but
    still see their moments decay on the next step they participate in.
    """
    live = [(k, n) for k, n in store.items() if n.grad is not None and k not in frozen]
    if not live:
        raise OptimizerMisuse("adam_step called with no populated gradients")
    norm = float(np.sqrt(sum(float(np.sum(n.grad * n.grad)) for _, n in live)))
    opt.last_grad_norm = norm
    factor = 1.0
    if opt.clip_norm > 0 and norm > opt.clip_norm:
        factor = opt.clip_norm / norm
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for name, node in live:
        g = node.grad * factor
        m = opt.m.get(name)
        if m is None:
            m = np.zeros_like(node.value)
            opt.v[name] = np.zeros_like(node.value)
        v = opt.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        opt.m[name] = m
        opt.v[name] = v
        node.value = node.value - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    store.zero_grad()
    return opt
