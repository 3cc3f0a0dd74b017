"""Zero-inflated negative binomial machinery and the flow start distributions."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.special import digamma, gammaln

from . import rng as rngs
from .numerics import tensor as T
from .numerics.layers import ParamStore, init_mlp, mlp
from .numerics.optim import OptimizerState, adam_step
from .numerics.tensor import Node, NumericsError
from .spatial import Frame, SlideStack, adjacent_candidates, positional_features

log = logging.getLogger(__name__)

PriorKind = Literal["learned-zinb", "fixed-zinb", "spatial-empirical"]
PRIOR_KINDS = ("learned-zinb", "fixed-zinb", "spatial-empirical")

_PI_EPS = 1e-12


class PriorError(ValueError):
    pass


@dataclass
class ZinbParams:
    mu: np.ndarray
    theta: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        self.mu, self.theta, self.pi = (np.asarray(a, dtype=np.float64) for a in (self.mu, self.theta, self.pi))
        if not (self.mu.shape == self.theta.shape == self.pi.shape):
            raise PriorError("mu, theta, pi shapes disagree")
        if np.any(self.mu <= 0) or np.any(self.theta <= 0):
            raise PriorError("mu and theta must be positive")
        if np.any(self.pi < 0) or np.any(self.pi > 1):
            raise PriorError("pi must lie in [0, 1]")

    def mean(self) -> np.ndarray:
        return (1.0 - self.pi) * self.mu

    def variance(self) -> np.ndarray:
        m, th, p = self.mu, self.theta, self.pi
        return (1.0 - p) * m * (1.0 + m / th + p * m)


@dataclass(frozen=True)
class FixedZinbConfig:
    """Constant ZINB start: NB(total_count, success logits) with zero-inflation logits.

    The NB mean is ``total_count * exp(logits)`` and ``pi = sigmoid(zi_logits)``.
    """

    total_count: float = 1.0
    logits: float = 0.1
    zi_logits: float = 0.0

    def params(self, shape: tuple[int, int]) -> ZinbParams:
        mu = self.total_count * np.exp(self.logits)
        pi = 1.0 / (1.0 + np.exp(-self.zi_logits))
        return ZinbParams(np.full(shape, mu), np.full(shape, self.total_count), np.full(shape, pi))


def _nb_log(y, mu, theta):
    log_t_tm = np.log(theta) - np.log(theta + mu)
    return (
        gammaln(y + theta) - gammaln(theta) - gammaln(y + 1.0)
        + theta * log_t_tm + y * (np.log(mu) - np.log(theta + mu))
    )


def zinb_log_pmf(y, mu, theta, pi):
    """``log(pi * 1{y=0} + (1 - pi) * NB(y | mu, theta))``, elementwise.

    ``pi = 0`` gives the plain negative binomial; ``pi = 1`` with ``y > 0``
    gives ``-inf``.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if np.any(mu <= 0) or np.any(theta <= 0):
        raise PriorError("mu and theta must be positive")
    if np.any(pi < 0) or np.any(pi > 1):
        raise PriorError("pi must lie in [0, 1]")
    nb = _nb_log(y, mu, theta)
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
        log_1mpi = np.log1p(-pi)
    zero = np.logaddexp(log_pi, log_1mpi + nb)
    out = np.where(y == 0, zero, log_1mpi + nb)
    return out[()] if out.ndim == 0 else out


def validate_counts(counts) -> np.ndarray:
    c = np.asarray(counts)
    if np.any(c < 0):
        raise PriorError("counts must be nonnegative")
    if not np.all(np.equal(np.mod(c, 1), 0)):
        raise PriorError("counts must be integers")
    return c.astype(np.float64)


def zinb_nll(counts, mu: Node, theta: Node, pi: Node) -> Node:
    """Total negative log-likelihood ``-sum log p(y | mu, theta, pi)`` as a tape node."""
    y = validate_counts(counts)
    if y.shape != mu.shape or mu.shape != theta.shape or theta.shape != pi.shape:
        raise T.DimensionError("zinb_nll: shape mismatch")
    m, th = mu.value, theta.value
    p = np.clip(pi.value, _PI_EPS, 1.0 - _PI_EPS)
    if np.any(m <= 0) or np.any(th <= 0):
        raise NumericsError("zinb_nll: mu and theta must be positive")
    log_t_tm = np.log(th) - np.log(th + m)
    nb = _nb_log(y, m, th)
    nb0 = np.exp(th * log_t_tm)
    is0 = y == 0
    p0 = p + (1.0 - p) * nb0
    ll = np.where(is0, np.log(p0), np.log1p(-p) + nb)
    value = -float(ll.sum())

    def backward(g):
        s = -g[0, 0]
        ratio = (th + y) / (th + m)
        d_mu_nb = y / m - ratio
        d_th_nb = digamma(y + th) - digamma(th) + log_t_tm + 1.0 - ratio
        w0 = (1.0 - p) * nb0 / p0
        d_mu = np.where(is0, w0 * (-th / (th + m)), d_mu_nb)
        d_th = np.where(is0, w0 * (log_t_tm + m / (th + m)), d_th_nb)
        d_pi = np.where(is0, (1.0 - nb0) / p0, -1.0 / (1.0 - p))
        return s * d_mu, s * d_th, s * d_pi

    return T._make(np.array([[value]]), (mu, theta, pi), backward, "zinb_nll")


def zinb_sample_counts(params: ZinbParams, rng: np.random.Generator) -> np.ndarray:
    """Gamma-Poisson draws with structural zeros."""
    shape = params.mu.shape
    lam = rng.gamma(params.theta, params.mu / params.theta, size=shape)
    counts = rng.poisson(lam)
    zero = rng.random(shape) < params.pi
    return np.where(zero, 0, counts).astype(np.int64)


def zinb_sample(params: ZinbParams, rng: np.random.Generator) -> np.ndarray:
    """A start matrix in the log1p domain."""
    return np.log1p(zinb_sample_counts(params, rng).astype(np.float64))


# ---------------------------------------------------------------------------
# learned prior
# ---------------------------------------------------------------------------


@dataclass
class PriorNet:
    """Two-layer perceptron (embedding ++ position) -> per-spot ZINB triples."""

    n_genes: int
    emb_dim: int
    pos_dim: int = 16
    hidden: int = 64
    frame: Frame | None = None
    store: ParamStore = field(default_factory=ParamStore)
    frozen: bool = False

    @classmethod
    def create(cls, n_genes: int, emb_dim: int, frame: Frame, seed: int, pos_dim: int = 16, hidden: int = 64) -> "PriorNet":
        net = cls(n_genes, emb_dim, pos_dim, hidden, frame)
        init_mlp(net.store, "mlp", [emb_dim + pos_dim, hidden, 3 * n_genes], rngs.stream(seed, "prior-init"))
        # start near the pooled mean with moderate dispersion and little inflation
        b = net.store["mlp.1.bias"].value
        b[0, 2 * n_genes :] = -2.0
        return net

    def features(self, coords: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
        pos, _ = positional_features(coords, self.frame, self.pos_dim)
        return np.concatenate([embeddings, pos], axis=1)

    def forward(self, coords: np.ndarray, embeddings: np.ndarray) -> tuple[Node, Node, Node]:
        raw = mlp(T.constant(self.features(coords, embeddings)), self.store, "mlp", 2)
        g = self.n_genes
        mu = T.add(T.softplus(T.slice_cols(raw, 0, g)), T.constant(1e-8))
        theta = T.add(T.softplus(T.slice_cols(raw, g, 2 * g)), T.constant(1e-4))
        pi = T.sigmoid(T.slice_cols(raw, 2 * g, 3 * g))
        return mu, theta, pi

    def params(self, coords: np.ndarray, embeddings: np.ndarray) -> ZinbParams:
        mu, theta, pi = self.forward(coords, embeddings)
        return ZinbParams(mu.value, theta.value, np.clip(pi.value, 0.0, 1.0))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, node in self.store.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(node.value).tobytes())
        h.update(b"frozen" if self.frozen else b"live")
        return h.hexdigest()

    def records(self) -> dict[str, np.ndarray]:
        out = {f"prior/{k}": v for k, v in self.store.arrays().items()}
        out["prior/frozen"] = np.array([[1.0 if self.frozen else 0.0]])
        out["prior/shape"] = np.array([[self.n_genes, self.emb_dim, self.pos_dim, self.hidden]], dtype=np.float64)
        f = self.frame
        out["prior/frame"] = np.array([[f.a_min, f.b_min, f.a_max, f.b_max]])
        return out

    @classmethod
    def from_records(cls, records: dict[str, np.ndarray]) -> "PriorNet":
        g, d, p, h = (int(v) for v in records["prior/shape"].ravel())
        fr = records["prior/frame"].ravel()
        net = cls.create(g, d, Frame(*map(float, fr)), seed=0, pos_dim=p, hidden=h)
        net.store.load({k[len("prior/") :]: v for k, v in records.items() if k.startswith("prior/mlp")})
        net.frozen = bool(records["prior/frozen"][0, 0])
        return net


@dataclass
class PretrainLog:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def _pool(stack: SlideStack, zs: list[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    secs = [stack.section(z) for z in zs]
    return (
        np.concatenate([s.coords for s in secs]),
        np.concatenate([s.embeddings for s in secs]),
        np.concatenate([s.counts for s in secs]),
    )


def _mean_nll(net: PriorNet, coords: np.ndarray, embs: np.ndarray, counts: np.ndarray) -> float:
    mu, th, pi = net.forward(coords, embs)
    return float(zinb_nll(counts, mu, th, pi).value[0, 0]) / counts.size


def _training_counts(stack: SlideStack, z: int) -> np.ndarray:
    s = stack.section(z)
    if s.counts is not None:
        return s.counts
    return np.rint(np.expm1(s.expression)).astype(np.int64)


def pretrain_prior(
    stack: SlideStack,
    net: PriorNet,
    train_z: list[int],
    val_z: list[int],
    epochs: int = 200,
    patience: int = 20,
    lr: float = 5e-3,
    batch_spots: int = 256,
    seed: int = 0,
    holdout: float = 0.1,
) -> PretrainLog:
    """Fit the ZINB prior by minibatch Adam on NLL, keep the best validation
    weights, then freeze the network.

    With no labeled validation section (single-label splits) a seeded
    ``holdout`` fraction of training spots plays that role.
    """
    if net.frozen:
        raise PriorError("prior is frozen")
    train_z = [z for z in train_z if stack.section(z).labeled]
    val_z = [z for z in val_z if stack.section(z).labeled]
    if not train_z:
        raise PriorError("pretraining needs at least one labeled training section")
    for z in train_z + val_z:
        sec = stack.section(z)
        if sec.counts is None:
            sec.counts = _training_counts(stack, z)
    coords, embs, counts = _pool(stack, train_z)
    if val_z:
        v_coords, v_embs, v_counts = _pool(stack, val_z)
    else:
        if not 0.0 < holdout < 1.0:
            raise PriorError("holdout fraction must lie in (0, 1)")
        perm = rngs.stream(seed, "prior-holdout").permutation(counts.shape[0])
        n_val = max(1, int(round(holdout * counts.shape[0])))
        if n_val >= counts.shape[0]:
            raise PriorError("too few spots to hold out a validation set")
        vi, ti = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        v_coords, v_embs, v_counts = coords[vi], embs[vi], counts[vi]
        coords, embs, counts = coords[ti], embs[ti], counts[ti]
    n = counts.shape[0]
    opt = OptimizerState(lr=lr)
    gen = rngs.stream(seed, "prior-batches")
    result = PretrainLog()
    va = _mean_nll(net, v_coords, v_embs, v_counts)
    result.epochs.append({"epoch": 0, "train_nll": _mean_nll(net, coords, embs, counts), "val_nll": va})
    best = (va, 0, {k: v.copy() for k, v in net.store.arrays().items()})
    for epoch in range(1, epochs + 1):
        perm = gen.permutation(n)
        for start in range(0, n, batch_spots):
            idx = perm[start : start + batch_spots]
            mu, th, pi = net.forward(coords[idx], embs[idx])
            loss = T.scale(zinb_nll(counts[idx], mu, th, pi), 1.0 / counts[idx].size)
            loss.backward()
            adam_step(net.store, opt)
        va = _mean_nll(net, v_coords, v_embs, v_counts)
        result.epochs.append({"epoch": epoch, "train_nll": _mean_nll(net, coords, embs, counts), "val_nll": va})
        if va < best[0]:
            best = (va, epoch, {k: v.copy() for k, v in net.store.arrays().items()})
        elif epoch - best[1] >= patience:
            log.info("prior early stop at epoch %d (best %d)", epoch, best[1])
            break
    net.store.load(best[2])
    result.best_epoch = best[1]
    net.frozen = True
    return result


# ---------------------------------------------------------------------------
# start distributions
# ---------------------------------------------------------------------------


def spatial_empirical_sample(
    stack: SlideStack,
    z: int,
    rng: np.random.Generator,
    k: int = 128,
    sigma: float = 0.05,
    rows: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw each spot's start from one of its ``k`` nearest labeled spots on z+-1.

    Returns ``(starts, available)``; rows with ``available == False`` are
    zeros and must be filled by the caller's fallback.
    """
    sec = stack.section(z)
    q = sec.coords if rows is None else sec.coords[rows]
    cand = adjacent_candidates(stack, z, k, "labeled", query_coords=q)
    out = np.zeros((q.shape[0], stack.G))
    for i in range(q.shape[0]):
        if not cand.available[i]:
            continue
        pool = np.flatnonzero(cand.valid[i])
        j = pool[rng.integers(len(pool))]
        src = stack.section(int(cand.section[i, j])).expression[cand.row[i, j]]
        out[i] = src
    if sigma > 0:
        out = np.where(cand.available[:, None], np.maximum(out + rng.normal(0.0, sigma, out.shape), 0.0), out)
    return out, cand.available


@dataclass
class StartSampler:
    """Draws ``x0`` for a section from the configured start distribution."""

    kind: PriorKind = "fixed-zinb"
    prior: PriorNet | None = None
    fixed: FixedZinbConfig = field(default_factory=FixedZinbConfig)
    empirical_k: int = 128
    empirical_sigma: float = 0.05

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise PriorError(f"unknown prior {self.kind!r}")
        if self.kind == "learned-zinb":
            if self.prior is None:
                raise PriorError("learned-zinb start needs a prior network")
            if not self.prior.frozen:
                raise PriorError("learned prior must be frozen before flow training")

    def zinb_params(self, stack: SlideStack, z: int) -> ZinbParams:
        sec = stack.section(z)
        if self.kind == "learned-zinb":
            return self.prior.params(sec.coords, sec.embeddings)
        return self.fixed.params((len(sec), stack.G))

    def sample(self, stack: SlideStack, z: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "spatial-empirical":
            x0, ok = spatial_empirical_sample(stack, z, rng, self.empirical_k, self.empirical_sigma)
            if not ok.all():
                fb = zinb_sample(self.fixed.params((int((~ok).sum()), stack.G)), rng)
                x0[~ok] = fb
            return x0
        return zinb_sample(self.zinb_params(stack, z), rng)

    def expected(self, stack: SlideStack, z: int) -> np.ndarray:
        """Plug-in log1p of the start mean; used when no state is available."""
        if self.kind == "spatial-empirical":
            x0, ok = spatial_empirical_sample(stack, z, rngs.stream(0, "expected"), self.empirical_k, 0.0)
            if not ok.all():
                x0[~ok] = np.log1p(self.fixed.params((1, stack.G)).mean())
            return x0
        return np.log1p(self.zinb_params(stack, z).mean())
