"""Time-conditioned spot denoiser: kNN graph attention, control injection and
inducing-point global attention, predicting the clean log1p endpoint."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngs
from .conditioning import ControlConfig, control_tokens, init_control, inject
from .numerics import tensor as T
from .numerics.layers import ParamStore, init_layer_norm, init_linear, init_mlp, layer_norm, linear, mlp, sinusoidal
from .numerics.tensor import Node
from .spatial import Frame, NeighborGraph, Section, build_knn_graph, positional_features


class DenoiserError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    genes: int
    emb_dim: int
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    edge_dim: int = 128
    k: int = 8
    dropout: float = 0.2
    inducing: int = 16
    time_dim: int = 32
    pos_dim: int = 16
    rbf_bins: int = 16
    ffn_mult: int = 4
    control: ControlConfig | None = None
    rank: int = 32

    def __post_init__(self):
        if self.hidden % self.heads:
            raise DenoiserError("hidden must be divisible by heads")
        if self.inducing < 0:
            raise DenoiserError("inducing count must be >= 0")

    def injection_blocks(self) -> set[int]:
        if self.control is None:
            return set()
        if self.control.blocks is None:
            return set(range(self.layers))
        return set(self.control.blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.control is not None:
            d["control"] = asdict(self.control)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        c = d.get("control")
        if c is not None:
            c = dict(c)
            if c.get("blocks") is not None:
                c["blocks"] = tuple(c["blocks"])
            d["control"] = ControlConfig(**c)
        return cls(**d)


@dataclass
class SectionContext:
    """Per-section constants reused across denoiser calls."""

    z: int
    n: int
    neighbors: np.ndarray
    rbf: np.ndarray
    static: np.ndarray
    coords: np.ndarray


def rbf_features(distances: np.ndarray, centers: np.ndarray) -> np.ndarray:
    width = float(np.mean(np.diff(centers))) if centers.size > 1 else 1.0
    width = max(width, 1e-3)
    d = distances.reshape(-1, 1)
    return np.exp(-(((d - centers[None, :]) / width) ** 2))


def rbf_centers(distances: np.ndarray, bins: int) -> np.ndarray:
    """Centres at evenly spaced quantiles of observed edge lengths (incl. 0)."""
    d = np.concatenate([[0.0], np.asarray(distances, dtype=np.float64).ravel()])
    c = np.quantile(d, np.linspace(0.0, 1.0, bins))
    # keep strictly increasing so the width stays positive
    return c + np.arange(bins) * 1e-6


def self_plus_neighbors(graph: NeighborGraph) -> tuple[np.ndarray, np.ndarray]:
    n = graph.index.shape[0]
    idx = np.concatenate([np.arange(n)[:, None], graph.index], axis=1)
    dist = np.concatenate([np.zeros((n, 1)), graph.distances], axis=1)
    return idx, dist


@dataclass
class Denoiser:
    cfg: DenoiserConfig
    frame: Frame
    store: ParamStore = field(default_factory=ParamStore)
    centers: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def create(cls, cfg: DenoiserConfig, frame: Frame, edge_lengths: np.ndarray, seed: int) -> "Denoiser":
        model = cls(cfg, frame)
        model.centers = rbf_centers(edge_lengths, cfg.rbf_bins)
        rng = rngs.stream(seed, "denoiser-init")
        s, d = model.store, cfg.hidden
        init_mlp(s, "time", [cfg.time_dim, d, cfg.time_dim], rng)
        init_linear(s, "embed", cfg.genes + cfg.time_dim + cfg.pos_dim + cfg.emb_dim, d, rng)
        for ell in range(cfg.layers):
            p = f"block{ell}"
            init_layer_norm(s, f"{p}.ln_attn", d)
            # no key bias: a shift shared by every key cancels in the softmax
            for w in ("q", "k", "v", "o"):
                init_linear(s, f"{p}.attn.{w}", d, d, rng, bias=w != "k")
            init_linear(s, f"{p}.edge.0", cfg.rbf_bins, cfg.edge_dim, rng)
            # per-head constants cancel across a row's neighbours, so no output bias
            init_linear(s, f"{p}.edge.1", cfg.edge_dim, cfg.heads, rng, bias=False)
            if cfg.inducing > 0:
                s.add(f"{p}.gsa.inducing", rng.normal(0.0, 1.0, size=(cfg.inducing, d)))
                for stage in ("read", "write"):
                    init_layer_norm(s, f"{p}.gsa.{stage}.ln_q", d)
                    init_layer_norm(s, f"{p}.gsa.{stage}.ln_kv", d)
                    for w in ("q", "k", "v", "o"):
                        init_linear(s, f"{p}.gsa.{stage}.{w}", d, d, rng, bias=w != "k")
                init_layer_norm(s, f"{p}.gsa.ln_ff", d)
                init_mlp(s, f"{p}.gsa.ff", [d, cfg.ffn_mult * d, d], rng)
            init_layer_norm(s, f"{p}.ln_ff", d)
            init_mlp(s, f"{p}.ff", [d, cfg.ffn_mult * d, d], rng)
        init_layer_norm(s, "head.ln", d)
        init_linear(s, "head.out", d, cfg.genes, rng)
        if cfg.control is not None:
            init_control(s, cfg.control, cfg.rank, d, cfg.layers, rng)
        return model

    # -- per-section constants ------------------------------------------------

    def context(self, section: Section, graph: NeighborGraph | None = None) -> SectionContext:
        if section.embeddings.shape[1] != self.cfg.emb_dim:
            raise DenoiserError("embedding width does not match the config")
        graph = graph or build_knn_graph(section, self.cfg.k)
        idx, dist = self_plus_neighbors(graph)
        pos, _ = positional_features(section.coords, self.frame, self.cfg.pos_dim)
        static = np.concatenate([pos, section.embeddings], axis=1)
        return SectionContext(section.z, len(section), idx, rbf_features(dist, self.centers), static, section.coords)

    # -- pieces ---------------------------------------------------------------

    def time_embedding(self, t: float, n: int) -> Node:
        feat = T.constant(sinusoidal(np.array([t]), self.cfg.time_dim))
        return T.gather_rows(mlp(feat, self.store, "time", 2), np.zeros(n, dtype=np.int64))

    def build_tokens(self, x_t: np.ndarray, t: float, ctx: SectionContext) -> Node:
        if not 0.0 <= t <= 1.0:
            raise DenoiserError("t must lie in [0, 1]")
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != (ctx.n, self.cfg.genes):
            raise DenoiserError(f"state shape {x_t.shape} != ({ctx.n}, {self.cfg.genes})")
        temb = self.time_embedding(t, ctx.n)
        tok = T.concat_cols([T.constant(x_t), temb, T.constant(ctx.static)])
        return linear(tok, self.store, "embed")

    def local_attention(self, x: Node, ctx: SectionContext, ell: int) -> Node:
        p = f"block{ell}"
        q = linear(x, self.store, f"{p}.attn.q")
        k = linear(x, self.store, f"{p}.attn.k")
        v = linear(x, self.store, f"{p}.attn.v")
        bias = mlp(T.constant(ctx.rbf), self.store, f"{p}.edge", 2)
        h = T.graph_attention(q, k, v, ctx.neighbors, bias, self.cfg.heads)
        return linear(h, self.store, f"{p}.attn.o")

    def _mha(self, q_in: Node, kv_in: Node, name: str) -> Node:
        q = linear(q_in, self.store, f"{name}.q")
        k = linear(kv_in, self.store, f"{name}.k")
        v = linear(kv_in, self.store, f"{name}.v")
        return linear(T.multi_head_attention(q, k, v, self.cfg.heads), self.store, f"{name}.o")

    def gsa(self, x: Node, ell: int, training: bool = False, rng: np.random.Generator | None = None) -> Node:
        """Inducing tokens read all spots, then every spot reads them back."""
        if self.cfg.inducing == 0:
            return x
        p = f"block{ell}.gsa"
        s = self.store
        ind = s[f"{p}.inducing"]
        read = self._mha(layer_norm(ind, s, f"{p}.read.ln_q"), layer_norm(x, s, f"{p}.read.ln_kv"), f"{p}.read")
        h = T.add(ind, T.dropout(read, self.cfg.dropout, rng, training))
        write = self._mha(layer_norm(x, s, f"{p}.write.ln_q"), layer_norm(h, s, f"{p}.write.ln_kv"), f"{p}.write")
        y = T.add(x, T.dropout(write, self.cfg.dropout, rng, training))
        ff = mlp(layer_norm(y, s, f"{p}.ln_ff"), s, f"{p}.ff", 2)
        return T.add(y, T.dropout(ff, self.cfg.dropout, rng, training))

    def forward(
        self,
        x_t: np.ndarray,
        t: float,
        ctx: SectionContext,
        u: Node | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> Node:
        cfg = self.cfg
        blocks = cfg.injection_blocks()
        if blocks and u is None:
            raise DenoiserError("control tokens required for the configured injection blocks")
        s = self.store
        x = self.build_tokens(x_t, t, ctx)
        for ell in range(cfg.layers):
            p = f"block{ell}"
            a = self.local_attention(layer_norm(x, s, f"{p}.ln_attn"), ctx, ell)
            x = T.add(x, T.dropout(a, cfg.dropout, rng, training))
            if ell in blocks:
                x = inject(x, u, ell, t, cfg.control, s, blocks)
            x = self.gsa(x, ell, training, rng)
            ff = mlp(layer_norm(x, s, f"{p}.ln_ff"), s, f"{p}.ff", 2)
            x = T.add(x, T.dropout(ff, cfg.dropout, rng, training))
        return linear(layer_norm(x, s, "head.ln"), s, "head.out")

    def control(self, inputs) -> Node:
        if self.cfg.control is None:
            raise DenoiserError("model has no control branch")
        return control_tokens(self.store, self.cfg.control, inputs)

    # -- persistence ----------------------------------------------------------

    def records(self) -> dict[str, np.ndarray]:
        out = {f"denoiser/{k}": v for k, v in self.store.arrays().items()}
        out["denoiser/buffers/rbf_centers"] = self.centers.reshape(1, -1)
        f = self.frame
        out["denoiser/buffers/frame"] = np.array([[f.a_min, f.b_min, f.a_max, f.b_max]])
        return out

    def load_records(self, records: dict[str, np.ndarray]) -> None:
        self.store.load({k[len("denoiser/") :]: v for k, v in records.items() if k.startswith("denoiser/") and "/buffers/" not in k})
        self.centers = records["denoiser/buffers/rbf_centers"].ravel().copy()
        self.frame = Frame(*map(float, records["denoiser/buffers/frame"].ravel()))


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def gsa_flops(n: int, m: int, d: int, ffn_mult: int = 4) -> int:
    """Multiply-accumulate count of one inducing-point block forward."""
    if m == 0:
        return 0
    read = m * d * d + 2 * n * d * d + 2 * m * n * d + m * d * d
    write = n * d * d + 2 * m * d * d + 2 * n * m * d + n * d * d
    ff = 2 * n * d * ffn_mult * d
    return read + write + ff


def dense_attention_flops(n: int, d: int, ffn_mult: int = 4) -> int:
    """The same block with full spot-to-spot self-attention instead."""
    return 4 * n * d * d + 2 * n * n * d + 2 * n * d * ffn_mult * d


def dense_attention_forward(x: np.ndarray, store: ParamStore, name: str, heads: int, chunk: int = 512) -> np.ndarray:
    """Forward-only reference block with full spot-to-spot attention.

    Reuses the ``{name}.read`` projections, the read-stage norms and the
    ``{name}.ff`` MLP of an inducing-point block so both paths share widths;
    query rows are processed in chunks to bound the score-matrix footprint.
    """

    def ln(a, key):
        mu = a.mean(axis=1, keepdims=True)
        var = a.var(axis=1, keepdims=True)
        return (a - mu) / np.sqrt(var + 1e-5) * store[f"{key}.scale"].value + store[f"{key}.shift"].value

    def lin(a, key):
        out = a @ store[f"{key}.weight"].value
        b = f"{key}.bias"
        return out + store[b].value if b in store else out

    n, d = x.shape
    dh = d // heads
    xn = ln(x, f"{name}.read.ln_kv")
    q = lin(ln(x, f"{name}.read.ln_q"), f"{name}.read.q").reshape(n, heads, dh).transpose(1, 0, 2)
    k = lin(xn, f"{name}.read.k").reshape(n, heads, dh).transpose(1, 0, 2)
    v = lin(xn, f"{name}.read.v").reshape(n, heads, dh).transpose(1, 0, 2)
    att = np.empty((heads, n, dh))
    for s in range(0, n, chunk):
        sc = np.matmul(q[:, s : s + chunk], k.transpose(0, 2, 1)) / np.sqrt(dh)
        sc -= sc.max(axis=2, keepdims=True)
        np.exp(sc, out=sc)
        sc /= sc.sum(axis=2, keepdims=True)
        att[:, s : s + chunk] = np.matmul(sc, v)
    y = x + lin(att.transpose(1, 0, 2).reshape(n, d), f"{name}.read.o")
    h = lin(ln(y, f"{name}.ln_ff"), f"{name}.ff.0")
    h = 0.5 * h * (1.0 + np.tanh(0.7978845608028654 * (h + 0.044715 * h * h * h)))
    return y + lin(h, f"{name}.ff.1")
