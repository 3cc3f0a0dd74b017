"""Finite-difference gradient suite over every differentiable primitive and a
small end-to-end denoiser."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng as rngs
from .conditioning import BlendConfig, ControlConfig, GeneProjection
from .denoiser import Denoiser, DenoiserConfig
from .flow import FlowModel, fm_loss, interpolate
from .numerics import tensor as T
from .numerics.gradcheck import grad_check
from .numerics.layers import ParamStore, init_linear, init_mlp, linear, mlp
from .numerics.tensor import Node
from .priors import zinb_nll
from .spatial import build_knn_graph
from .synth import SynthConfig, generate_stack


@dataclass
class GradCase:
    name: str
    loss: Callable[[], Node]
    store: ParamStore
    max_entries: int | None = None


@dataclass
class GradReport:
    results: dict[str, float] = field(default_factory=dict)
    per_param: dict[str, dict[str, float]] = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.results.values()) if self.results else 0.0

    def lines(self) -> list[str]:
        out = [f"{k}: {v:.3e}" for k, v in self.results.items()]
        out.append(f"max relative error: {self.worst:.3e}")
        return out


def _probe(out: Node, rng: np.random.Generator) -> Node:
    """Scalar ``sum(out * R)`` with a fixed random ``R``."""
    return T.sum_all(T.mul(out, T.constant(rng.normal(size=out.shape))))


def primitive_cases(seed: int = 0) -> list[GradCase]:
    rng = rngs.stream(seed, "gradcheck", "primitives")
    cases = []

    def add(name, store, loss):
        cases.append(GradCase(name, loss, store))

    x = rng.normal(size=(5, 4))

    s = ParamStore()
    init_linear(s, "aff", 4, 3, rng)
    add("affine", s, lambda s=s: _probe(linear(T.constant(x), s, "aff"), np.random.default_rng(1)))

    s = ParamStore()
    init_mlp(s, "mlp", [4, 6, 3], rng)
    add("mlp", s, lambda s=s: _probe(mlp(T.constant(x), s, "mlp", 2), np.random.default_rng(2)))

    s = ParamStore()
    s.add("a", rng.normal(size=(5, 4)))
    s.add("b", rng.normal(size=(5, 4)))
    s.add("r", rng.normal(size=(1, 4)))
    s.add("pos", rng.uniform(0.5, 2.0, size=(5, 4)))

    def elementwise(s=s):
        a, b, r, pos = s["a"], s["b"], s["r"], s["pos"]
        parts = [
            T.mul(a, b),
            T.sub(a, r),
            T.add(b, r),
            T.exp(T.scale(a, 0.3)),
            T.log(pos),
            T.tanh(a),
            T.sigmoid(b),
            T.softplus(a),
            T.gelu(b),
            T.square(a),
        ]
        out = T.concat_cols(parts)
        joined = T.concat_rows([T.slice_cols(out, 3, 17), T.slice_cols(out, 20, 34)])
        tail = T.add(T.sum_rows(a), T.mean_cols(T.transpose(b)))
        return T.add(T.add(_probe(joined, np.random.default_rng(3)), T.mean_all(T.mul(out, out))), T.sum_all(T.square(tail)))

    add("elementwise", s, elementwise)

    s = ParamStore()
    s.add("table", rng.normal(size=(6, 3)))
    add("gather_transpose", s, lambda s=s: _probe(T.transpose(T.gather_rows(s["table"], np.array([0, 2, 2, 5, 1]))), np.random.default_rng(4)))

    s = ParamStore()
    s.add("logits", rng.normal(size=(4, 6)))
    add("softmax_rows", s, lambda s=s: _probe(T.softmax_rows(s["logits"]), np.random.default_rng(5)))

    s = ParamStore()
    s.add("x", rng.normal(size=(5, 6)))
    s.add("g", rng.normal(1.0, 0.2, size=(1, 6)))
    s.add("b", rng.normal(size=(1, 6)))
    add("layer_norm", s, lambda s=s: _probe(T.layer_norm(s["x"], s["g"], s["b"]), np.random.default_rng(6)))

    s = ParamStore()
    s.add("q", rng.normal(size=(3, 8)))
    s.add("k", rng.normal(size=(7, 8)))
    s.add("v", rng.normal(size=(7, 8)))
    add("multi_head_attention", s, lambda s=s: _probe(T.multi_head_attention(s["q"], s["k"], s["v"], 2), np.random.default_rng(7)))

    nbr = np.array([[0, 1, 2], [1, 0, -1], [2, 3, 1], [3, 2, 0]])
    s = ParamStore()
    s.add("q", rng.normal(size=(4, 6)))
    s.add("k", rng.normal(size=(4, 6)))
    s.add("v", rng.normal(size=(4, 6)))
    s.add("bias", rng.normal(size=(12, 2)))
    add("graph_attention", s, lambda s=s: _probe(T.graph_attention(s["q"], s["k"], s["v"], nbr, s["bias"], 2), np.random.default_rng(8)))

    rows = np.array([0.0, 1.3, 2.7, 0.5, 3.0])
    cols = np.array([0.2, 2.0, 1.1, 3.0, 0.0])
    s = ParamStore()
    s.add("map", rng.normal(size=(16, 3)))
    add("grid_sample", s, lambda s=s: _probe(T.grid_sample(s["map"], 4, 4, rows, cols), np.random.default_rng(9)))

    counts = rng.poisson(2.0, size=(6, 4))
    counts[0, :2] = 0
    s = ParamStore()
    s.add("mu", rng.normal(size=(6, 4)))
    s.add("theta", rng.normal(size=(6, 4)))
    s.add("pi", rng.normal(-1.0, 0.5, size=(6, 4)))
    add(
        "zinb_nll",
        s,
        lambda s=s: zinb_nll(counts, T.add(T.softplus(s["mu"]), T.constant(0.1)), T.add(T.softplus(s["theta"]), T.constant(0.1)), T.sigmoid(s["pi"])),
    )
    return cases


TOY_MODEL = DenoiserConfig(
    genes=6,
    emb_dim=4,
    layers=2,
    hidden=16,
    heads=2,
    edge_dim=8,
    k=4,
    dropout=0.2,
    inducing=4,
    time_dim=8,
    pos_dim=8,
    rbf_bins=4,
    ffn_mult=2,
    control=ControlConfig(grid=8, channels=4, token_dim=8),
    rank=4,
)


def denoiser_case(cfg: DenoiserConfig | None = None, seed: int = 0, max_entries: int | None = 12, t: float = 0.6) -> GradCase:
    """End-to-end loss on a 12-spot toy section with both neighbours present.

    The zero-initialised control projections are perturbed so every
    parameter on the conditioning path receives a nonzero gradient.
    """
    cfg = cfg or TOY_MODEL
    syn = generate_stack(SynthConfig(Z=3, spots=12, G=cfg.genes, D=cfg.emb_dim, R=2, seed=seed))
    stack = syn.stack.with_labels({1, 3})
    edges = np.concatenate([build_knn_graph(s, cfg.k).distances.ravel() for s in stack.sections])
    den = Denoiser.create(cfg, stack.frame(), edges, seed)
    rng = rngs.stream(seed, "gradcheck", "denoiser")
    for name in den.store:
        if name.startswith("control.proj"):
            den.store[name].value[...] = rng.normal(0.0, 0.1, size=den.store[name].shape)
    proj = GeneProjection.top_variance(np.concatenate([stack.section(1).expression, stack.section(3).expression]), cfg.rank)
    model = FlowModel(den, proj, BlendConfig(), k_adjacent=4, use_adjacent=True)
    y = syn.stack.section(2).expression
    x0 = rng.normal(size=y.shape)
    xt = interpolate(x0, y, t)
    sources = {1: stack.section(1).expression, 3: stack.section(3).expression}

    def loss():
        return fm_loss(model.forward(stack, 2, xt, t, sources), y)

    return GradCase("denoiser", loss, den.store, max_entries)


def run_suite(cases: list[GradCase], h: float = 1e-5, seed: int = 0) -> GradReport:
    rep = GradReport()
    t0 = time.perf_counter()
    for c in cases:
        worst, per = grad_check(c.loss, c.store, h=h, max_entries=c.max_entries, seed=seed)
        rep.results[c.name] = worst
        rep.per_param[c.name] = per
    rep.seconds = time.perf_counter() - t0
    return rep
