"""Synthetic aligned stacks with region structure and known expression programs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from .priors import ZinbParams, zinb_sample_counts
from .spatial import Section, SlideStack


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    Z: int = 8
    spots: int = 200
    G: int = 50
    D: int = 32
    R: int = 4
    smoothness: float = 0.9
    snr: float = 4.0
    marker_fraction: float = 0.2
    marker_fold: float = 8.0
    base_log_mean: float = 2.0
    base_log_sd: float = 0.6
    region_log_sd: float = 1.0
    theta_range: tuple[float, float] = (8.0, 20.0)
    pi_range: tuple[float, float] = (0.01, 0.05)
    jitter: float = 0.1
    blob_scale: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if self.R < 2:
            raise SynthError("need at least two regions")
        if self.spots < self.R:
            raise SynthError("need at least as many spots per section as regions")
        if not 0.0 <= self.smoothness <= 1.0:
            raise SynthError("smoothness must lie in [0, 1]")
        if self.Z < 1 or self.G < 1 or self.D < 1:
            raise SynthError("Z, G and D must be positive")


@dataclass
class RegionPrograms:
    """Per-region ZINB parameters, ``(R, G)`` each, and marker sets."""

    mu: np.ndarray
    theta: np.ndarray
    pi: np.ndarray
    markers: list[np.ndarray] = field(default_factory=list)

    def params_for(self, labels: np.ndarray) -> ZinbParams:
        return ZinbParams(self.mu[labels], self.theta[labels], self.pi[labels])

    def mean_counts(self) -> np.ndarray:
        return (1.0 - self.pi) * self.mu


@dataclass
class SynthStack:
    stack: SlideStack
    labels: dict[int, np.ndarray]
    programs: RegionPrograms
    config: SynthConfig


def _programs(cfg: SynthConfig, rng: np.random.Generator) -> RegionPrograms:
    base = np.exp(rng.normal(cfg.base_log_mean, cfg.base_log_sd, size=cfg.G))
    mod = np.exp(rng.normal(0.0, cfg.region_log_sd, size=(cfg.R, cfg.G)))
    mu = base[None, :] * mod
    n_mark = max(1, int(round(cfg.marker_fraction * cfg.G)))
    perm = rng.permutation(cfg.G)
    markers = []
    for r in range(cfg.R):
        sel = np.take(perm, np.arange(r * n_mark, (r + 1) * n_mark), mode="wrap")
        markers.append(np.sort(sel))
        mu[r, sel] *= cfg.marker_fold
    theta = np.broadcast_to(rng.uniform(*cfg.theta_range, size=cfg.G), (cfg.R, cfg.G)).copy()
    pi = rng.uniform(*cfg.pi_range, size=(cfg.R, cfg.G))
    return RegionPrograms(mu, theta, pi, markers)


def _grid_coords(n: int, jitter: float, rng: np.random.Generator) -> np.ndarray:
    side = int(math.ceil(math.sqrt(n)))
    ii = np.arange(n)
    base = np.stack([ii // side, ii % side], axis=1).astype(np.float64)
    return base + rng.normal(0.0, jitter, size=base.shape)


def _region_centres(cfg: SynthConfig, side: float, rng: np.random.Generator) -> np.ndarray:
    """``(Z, R, 2)`` blob centres; each section moves ``1 - smoothness`` of the
    way toward fresh random positions."""
    cur = rng.uniform(0.0, side, size=(cfg.R, 2))
    out = np.empty((cfg.Z, cfg.R, 2))
    for z in range(cfg.Z):
        if z > 0:
            fresh = rng.uniform(0.0, side, size=(cfg.R, 2))
            cur = cur + (1.0 - cfg.smoothness) * (fresh - cur)
        out[z] = cur
    return out


def assign_regions(coords: np.ndarray, centres: np.ndarray, scale: float, log_weights: np.ndarray) -> np.ndarray:
    """Most likely isotropic Gaussian component for each spot."""
    d2 = ((coords[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
    return np.argmax(log_weights[None, :] - d2 / (2.0 * scale * scale), axis=1)


def embed_regions(labels: np.ndarray, cfg: SynthConfig, basis: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``(sqrt(snr) * onehot + N(0, I_R)) @ basis``, basis ``(R, D)`` orthonormal rows."""
    onehot = np.eye(cfg.R)[labels]
    latent = math.sqrt(cfg.snr) * onehot + rng.normal(size=onehot.shape)
    return latent @ basis


def generate_stack(cfg: SynthConfig) -> SynthStack:
    rng_prog = rngs.stream(cfg.seed, "programs")
    programs = _programs(cfg, rng_prog)
    side = float(math.ceil(math.sqrt(cfg.spots)))
    centres = _region_centres(cfg, side, rngs.stream(cfg.seed, "centres"))
    log_w = np.zeros(cfg.R)
    q, _ = np.linalg.qr(rngs.stream(cfg.seed, "basis").normal(size=(max(cfg.D, cfg.R), cfg.R)))
    basis = q[: cfg.D].T if cfg.D >= cfg.R else rngs.stream(cfg.seed, "basis2").normal(size=(cfg.R, cfg.D))
    sections, labels = [], {}
    for z in range(1, cfg.Z + 1):
        rng = rngs.stream(cfg.seed, "section", z)
        coords = _grid_coords(cfg.spots, cfg.jitter, rng)
        lab = assign_regions(coords, centres[z - 1], cfg.blob_scale * side, log_w)
        counts = zinb_sample_counts(programs.params_for(lab), rng)
        emb = embed_regions(lab, cfg, basis, rng)
        ids = (z - 1) * cfg.spots + np.arange(cfg.spots)
        sections.append(Section(z, ids, coords, emb, np.log1p(counts.astype(np.float64)), counts, lab))
        labels[z] = lab
    genes = [f"gene{g:03d}" for g in range(cfg.G)]
    return SynthStack(SlideStack(sections, genes, "grid"), labels, programs, cfg)


def region_oracle(stack: SlideStack, labels: dict[int, np.ndarray], train_z: list[int], target_z: list[int], R: int) -> dict[int, np.ndarray]:
    """Predict every target spot by the mean training expression of its true region."""
    expr = np.concatenate([stack.section(z).expression for z in train_z])
    lab = np.concatenate([labels[z] for z in train_z])
    means = np.zeros((R, expr.shape[1]))
    for r in range(R):
        if np.any(lab == r):
            means[r] = expr[lab == r].mean(axis=0)
        else:
            means[r] = expr.mean(axis=0)
    return {z: means[labels[z]] for z in target_z}


def nearest_centroid_accuracy(stack: SlideStack, labels: dict[int, np.ndarray], R: int) -> float:
    emb = np.concatenate([s.embeddings for s in stack.sections])
    lab = np.concatenate([labels[s.z] for s in stack.sections])
    cents = np.stack([emb[lab == r].mean(axis=0) if np.any(lab == r) else np.full(emb.shape[1], np.inf) for r in range(R)])
    d = ((emb[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(d, axis=1) == lab))
