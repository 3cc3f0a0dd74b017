"""Cross-section retrieval weights, adjacent tokens and control injection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Mapping

import numpy as np

from .numerics import tensor as T
from .numerics.layers import ParamStore, init_linear, init_mlp, linear, mlp, sinusoidal
from .numerics.tensor import Node
from .spatial import AdjacentCandidates, Frame, SlideStack

log = logging.getLogger(__name__)

Mode = Literal["train", "infer"]


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class BlendConfig:
    tau: float = 1.0
    beta: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ConditioningError("tau must be positive")
        if not 0.0 <= self.beta <= 1.0:
            raise ConditioningError("beta must lie in [0, 1]")


@dataclass(frozen=True)
class ControlConfig:
    grid: int = 64
    channels: int = 32
    token_dim: int = 64
    scale: float = 1.0
    t_warm: float = 0.2
    blocks: tuple[int, ...] | None = None

    def __post_init__(self):
        if min(self.grid, self.channels, self.token_dim) < 1:
            raise ConditioningError("grid, channels and token_dim must be >= 1")
        if self.t_warm <= 0:
            raise ConditioningError("t_warm must be positive")

    @classmethod
    def sharp(cls, **kw) -> "ControlConfig":
        return cls(t_warm=0.05, **kw)


@dataclass
class GeneProjection:
    """Indicator rows selecting ``rank`` top-variance genes."""

    genes: np.ndarray
    n_genes: int
    rule: str = "top-variance"

    @classmethod
    def top_variance(cls, expression: np.ndarray, rank: int) -> "GeneProjection":
        var = np.var(expression, axis=0)
        order = np.lexsort((np.arange(var.size), -var))
        return cls(np.sort(order[: min(rank, var.size)]), var.size)

    @property
    def rank(self) -> int:
        return len(self.genes)

    @property
    def matrix(self) -> np.ndarray:
        p = np.zeros((self.rank, self.n_genes))
        p[np.arange(self.rank), self.genes] = 1.0
        return p

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., self.genes]


def cosine_scores(query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Cosine similarity of ``query`` (..., D) against ``candidates`` (..., K, D).

    Zero vectors score 0.
    """
    q = np.asarray(query, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    num = np.einsum("...d,...kd->...k", q, c)
    den = np.linalg.norm(q, axis=-1)[..., None] * np.linalg.norm(c, axis=-1)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    return np.clip(out, -1.0, 1.0)


def spatial_scores(distances: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """``exp(-d^2 / (2 s^2))`` with ``s`` the median valid distance per row."""
    d = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    v = np.ones_like(d, dtype=bool) if valid is None else np.atleast_2d(valid)
    masked = np.where(v, d, np.nan)
    with np.errstate(all="ignore"):
        sig = np.nanmedian(masked, axis=1, keepdims=True) if v.any() else np.ones((d.shape[0], 1))
    sig = np.where(np.isfinite(sig) & (sig > 0), sig, 1.0)
    return np.exp(-(d * d) / (2.0 * sig * sig))


def blend_weights(cos: np.ndarray, xy: np.ndarray, cfg: BlendConfig, valid: np.ndarray | None = None) -> np.ndarray:
    """Row-wise ``softmax(((1-beta) cos + beta xy) / tau)`` over valid slots."""
    cos = np.atleast_2d(np.asarray(cos, dtype=np.float64))
    xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
    if cos.shape != xy.shape:
        raise ConditioningError("score arrays differ in shape")
    if cos.shape[1] == 0:
        return np.zeros_like(cos)
    v = np.ones_like(cos, dtype=bool) if valid is None else np.atleast_2d(valid)
    s = ((1.0 - cfg.beta) * cos + cfg.beta * xy) / cfg.tau
    s = np.where(v, s, -np.inf)
    m = s.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(v, np.exp(s - m), 0.0)
    tot = e.sum(axis=1, keepdims=True)
    return np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)


def candidate_weights(stack: SlideStack, z: int, cand: AdjacentCandidates, cfg: BlendConfig) -> np.ndarray:
    query = stack.section(z).embeddings
    emb = np.zeros(cand.section.shape + (stack.D,))
    for zz in np.unique(cand.section[cand.valid]):
        sel = cand.valid & (cand.section == zz)
        emb[sel] = stack.section(int(zz)).embeddings[cand.row[sel]]
    cos = cosine_scores(query, emb)
    xy = spatial_scores(cand.distances, cand.valid)
    return blend_weights(cos, xy, cfg, cand.valid)


def adjacent_token(
    cand: AdjacentCandidates,
    weights: np.ndarray,
    proj: GeneProjection,
    sources: Mapping[int, np.ndarray],
    mode: Mode = "train",
    labeled: set[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted sum of projected neighbour vectors, ``(N, rank)`` plus mask.

    ``sources[z]`` is the per-spot matrix read for candidates on section ``z``:
    stored expression in ``train`` mode, current flow states in ``infer``
    mode.  In ``train`` mode every candidate section must be in ``labeled``.
    """
    n = cand.section.shape[0]
    token = np.zeros((n, proj.rank))
    for zz in np.unique(cand.section[cand.valid]):
        zz = int(zz)
        if mode == "train" and labeled is not None and zz not in labeled:
            raise ConditioningError(f"train-mode token reads unlabeled section z={zz}")
        if zz not in sources:
            raise ConditioningError(f"no source matrix for section z={zz}")
        sel = cand.valid & (cand.section == zz)
        src = proj.apply(sources[zz])
        contrib = np.zeros(cand.section.shape + (proj.rank,))
        contrib[sel] = src[cand.row[sel]]
        token += np.einsum("nk,nkr->nr", np.where(sel, weights, 0.0), contrib)
    token[~cand.available] = 0.0
    return token, cand.available.copy()


# ---------------------------------------------------------------------------
# gene map and control tokens
# ---------------------------------------------------------------------------


def map_positions(coords: np.ndarray, frame: Frame, grid: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Continuous cell coordinates (row from ``a``, col from ``b``)."""
    u, clamped = frame.normalize(coords)
    return u[:, 0] * (grid - 1), u[:, 1] * (grid - 1), clamped


def build_gene_map(rows: np.ndarray, cols: np.ndarray, values: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear splat of per-spot vectors, normalised by splat density.

    Returns the ``(height*width, C)`` map and the ``(height*width,)`` density.
    """
    idx, w = T.bilinear_weights(height, width, rows, cols)
    vals = np.asarray(values, dtype=np.float64)
    acc = np.zeros((height * width, vals.shape[1]))
    dens = np.zeros(height * width)
    np.add.at(acc, idx.ravel(), (w[:, :, None] * vals[:, None, :]).reshape(-1, vals.shape[1]))
    np.add.at(dens, idx.ravel(), w.ravel())
    out = np.divide(acc, dens[:, None], out=np.zeros_like(acc), where=dens[:, None] > 0)
    return out, dens


def grid_sample_bilinear(grid_map: Node, height: int, width: int, rows: np.ndarray, cols: np.ndarray) -> Node:
    return T.grid_sample(grid_map, height, width, rows, cols)


def im2col3x3(grid_map: np.ndarray, height: int, width: int) -> np.ndarray:
    """Zero-padded 3x3 neighbourhoods: ``(H*W, C)`` -> ``(H*W, 9*C)``."""
    c = grid_map.shape[1]
    img = np.zeros((height + 2, width + 2, c))
    img[1:-1, 1:-1] = grid_map.reshape(height, width, c)
    patches = [img[dr : dr + height, dc : dc + width] for dr in range(3) for dc in range(3)]
    return np.concatenate(patches, axis=2).reshape(height * width, 9 * c)


def smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def gate(t: float, cfg: ControlConfig) -> float:
    """Warm-up gate ``scale * smoothstep(t / t_warm)``."""
    return float(cfg.scale * smoothstep(t / cfg.t_warm))


@dataclass
class ControlInputs:
    """Everything the control branch needs for one section and one ``t``."""

    token: np.ndarray
    mask: np.ndarray
    gene_map: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    t: float


TIME_FEATURES = 16


def init_control(store: ParamStore, cfg: ControlConfig, rank: int, hidden: int, layers: int, rng: np.random.Generator) -> None:
    init_linear(store, "control.conv", 9 * rank, cfg.channels, rng)
    init_mlp(store, "control.h", [rank + 1 + cfg.channels + TIME_FEATURES, cfg.token_dim, cfg.token_dim], rng)
    for ell in range(layers):
        store.add(f"control.proj{ell}.weight", np.zeros((cfg.token_dim, hidden)))
        store.add(f"control.proj{ell}.bias", np.zeros((1, hidden)))


def control_tokens(store: ParamStore, cfg: ControlConfig, inp: ControlInputs) -> Node:
    """``u = h(token ++ mask ++ sampled conv(map) ++ time features)``."""
    if not 0.0 <= inp.t <= 1.0:
        raise ConditioningError("t must lie in [0, 1]")
    n = inp.token.shape[0]
    patches = T.constant(im2col3x3(inp.gene_map, cfg.grid, cfg.grid))
    feat_map = linear(patches, store, "control.conv")
    sampled = grid_sample_bilinear(feat_map, cfg.grid, cfg.grid, inp.rows, inp.cols)
    tfeat = np.repeat(sinusoidal(np.array([inp.t]), TIME_FEATURES), n, axis=0)
    x = T.concat_cols([T.constant(inp.token), T.constant(inp.mask.reshape(-1, 1).astype(float)), sampled, T.constant(tfeat)])
    return mlp(x, store, "control.h", 2)


def inject(act: Node, u: Node, ell: int, t: float, cfg: ControlConfig, store: ParamStore, blocks: set[int] | None = None) -> Node:
    """``act + gate(t) * Proj_ell(u)``; identity for blocks outside the set."""
    if blocks is not None and ell not in blocks:
        log.debug("block %d not in injection set; skipping", ell)
        return act
    alpha = gate(t, cfg)
    if alpha == 0.0:
        return act
    return T.add(act, T.scale(linear(u, store, f"control.proj{ell}"), alpha))
