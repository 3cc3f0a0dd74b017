"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import ParamStore
from .tensor import Node, NumericsError


class NonDeterministicError(NumericsError):
    pass


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` using L2 norms over the probed entries."""
    diff = float(np.linalg.norm(analytic - numeric))
    denom = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / denom


def grad_check(
    loss_fn: Callable[[], Node],
    store: ParamStore,
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    names: list[str] | None = None,
) -> tuple[float, dict[str, float]]:
    """Compare backprop gradients with central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter values
    each call.  With ``max_entries`` only a seeded random subset of each
    parameter's entries is probed.  Returns the maximum relative error and the
    per-parameter breakdown.
    """
    first = float(loss_fn().value[0, 0])
    again = loss_fn()
    if float(again.value[0, 0]) != first:
        raise NonDeterministicError("loss differs between identical evaluations; set eval mode")
    store.zero_grad()
    again.backward()
    rng = np.random.default_rng(seed)
    per_param: dict[str, float] = {}
    for name in names or list(store):
        node = store[name]
        analytic_full = np.zeros_like(node.value) if node.grad is None else node.grad.copy()
        flat = node.value.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(entries.size)
        for j, e in enumerate(entries):
            orig = flat[e]
            flat[e] = orig + h
            plus = float(loss_fn().value[0, 0])
            flat[e] = orig - h
            minus = float(loss_fn().value[0, 0])
            flat[e] = orig
            numeric[j] = (plus - minus) / (2 * h)
        per_param[name] = relative_error(analytic_full.reshape(-1)[entries], numeric)
    store.zero_grad()
    worst = max(per_param.values()) if per_param else 0.0
    return worst, per_param
