"""Flow-matching training and the inference stepper."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from . import rng as rngs
from .conditioning import (
    BlendConfig,
    ControlInputs,
    GeneProjection,
    adjacent_token,
    build_gene_map,
    candidate_weights,
    map_positions,
)
from .denoiser import Denoiser, SectionContext
from .numerics import tensor as T
from .numerics.optim import OptimizerState, adam_step
from .numerics.tensor import Node
from .priors import StartSampler
from .spatial import AdjacentCandidates, SlideStack, adjacent_candidates

log = logging.getLogger(__name__)


class FlowError(ValueError):
    pass


@dataclass
class FlowState:
    x0: np.ndarray
    xt: np.ndarray
    t: float
    x1: np.ndarray | None = None


@dataclass(frozen=True)
class TimeGrid:
    knots: tuple[float, ...]

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=np.float64)
        if k.size < 2 or k[0] != 0.0 or k[-1] != 1.0:
            raise FlowError("time grid must run from 0 to 1")
        if np.any(np.diff(k) <= 0):
            raise FlowError("time grid must be strictly increasing")

    @classmethod
    def uniform(cls, steps: int) -> "TimeGrid":
        if steps < 1:
            raise FlowError("need at least one step")
        return cls(tuple(float(s) / steps for s in range(steps + 1)))

    @property
    def steps(self) -> np.ndarray:
        return np.diff(np.asarray(self.knots))

    def __len__(self) -> int:
        return len(self.knots) - 1


def interpolate(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise FlowError(f"shape mismatch {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise FlowError("t must lie in [0, 1]")
    if t == 0.0:
        return x0.copy()
    if t == 1.0:
        return x1.copy()
    return (1.0 - t) * x0 + t * x1


def fm_loss(y_hat: Node, y: np.ndarray) -> Node:
    """Mean squared endpoint error over spots and genes."""
    diff = T.sub(y_hat, T.constant(y))
    return T.mean_all(T.square(diff))


# ---------------------------------------------------------------------------
# model wrapper: denoiser plus the conditioning it consumes
# ---------------------------------------------------------------------------


class Predictor(Protocol):
    def predict(self, stack: SlideStack, z: int, x_t: np.ndarray, t: float, states: Mapping[int, np.ndarray]) -> np.ndarray: ...


@dataclass
class FlowModel:
    """The denoiser together with its adjacent-section conditioning.

    ``use_adjacent`` switches the cross-section token on; with it off the
    control branch (if any) still sees the section's own gene map.  During
    training an unlabeled neighbour is replaced by the nearest labeled
    section on the same side within ``train_reach`` sections, so the token
    is learned from stored expression as it is read at inference.
    """

    denoiser: Denoiser
    projection: GeneProjection
    blend: BlendConfig = field(default_factory=BlendConfig)
    k_adjacent: int = 8
    use_adjacent: bool = True
    train_reach: int = 1
    _cache: dict = field(default_factory=dict, repr=False)

    def _cached(self, key: tuple, stack: SlideStack, build):
        # entries pin the stack they were built from so a recycled id() never matches
        hit = self._cache.get((id(stack),) + key)
        if hit is not None and hit[0] is stack:
            return hit[1]
        value = build()
        self._cache[(id(stack),) + key] = (stack, value)
        return value

    def context(self, stack: SlideStack, z: int) -> SectionContext:
        return self._cached(("ctx", z), stack, lambda: self.denoiser.context(stack.section(z)))

    def adjacent_sections(self, stack: SlideStack, z: int, training: bool = False) -> list[int]:
        """Sections whose spots feed the token of section ``z``."""
        if not self.use_adjacent or self.denoiser.cfg.control is None:
            return []
        out = []
        for side in (-1, 1):
            if not stack.has(z + side):
                continue
            pick = z + side
            if training and not stack.section(pick).labeled:
                for j in range(2, self.train_reach + 1):
                    zz = z + side * j
                    if stack.has(zz) and stack.section(zz).labeled:
                        pick = zz
                        break
            out.append(pick)
        return out

    def candidates(self, stack: SlideStack, z: int, training: bool = False) -> tuple[AdjacentCandidates, np.ndarray]:
        secs = tuple(self.adjacent_sections(stack, z, training))

        def build():
            cand = adjacent_candidates(stack, z, self.k_adjacent, "any", sections=secs)
            return cand, candidate_weights(stack, z, cand, self.blend)

        return self._cached(("cand", z, secs), stack, build)

    def control_inputs(
        self, stack: SlideStack, z: int, x_t: np.ndarray, t: float, states: Mapping[int, np.ndarray], training: bool = False
    ) -> ControlInputs | None:
        cc = self.denoiser.cfg.control
        if cc is None:
            return None
        sec = stack.section(z)
        n = len(sec)
        if self.use_adjacent:
            cand, w = self.candidates(stack, z, training)
            token, mask = adjacent_token(cand, w, self.projection, states, mode="infer")
        else:
            token, mask = np.zeros((n, self.projection.rank)), np.zeros(n, bool)
        rows, cols, _ = map_positions(sec.coords, self.denoiser.frame, cc.grid)
        gmap, _ = build_gene_map(rows, cols, self.projection.apply(x_t), cc.grid, cc.grid)
        return ControlInputs(token, mask, gmap, rows, cols, t)

    def forward(self, stack, z, x_t, t, states, training=False, rng=None, train_sources=None) -> Node:
        """``train_sources`` selects train-time neighbour sections; it defaults to ``training``."""
        ctx = self.context(stack, z)
        inputs = self.control_inputs(stack, z, x_t, t, states, training if train_sources is None else train_sources)
        u = None if inputs is None else self.denoiser.control(inputs)
        return self.denoiser.forward(x_t, t, ctx, u, training, rng)

    def predict(self, stack, z, x_t, t, states) -> np.ndarray:
        return self.forward(stack, z, x_t, t, states).value


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 2
    lr: float = 5e-4
    clip: float = 1.0
    patience: int = 10
    val_times: tuple[float, ...] = (0.2, 0.5, 0.8)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    stopped_early: bool = False
    best_epoch: int = 0

    def lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _train_sources(model: FlowModel, stack: SlideStack, sampler: StartSampler, z: int, t: float, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Adjacent-section sources for one training section.

    Labeled neighbours contribute their stored expression; unlabeled ones
    contribute an interpolant state whose unknown endpoint is the start
    distribution's plug-in mean.
    """
    out = {}
    for zz in model.adjacent_sections(stack, z, training=True):
        sec = stack.section(zz)
        if sec.labeled:
            out[zz] = sec.expression
        else:
            x0 = sampler.sample(stack, zz, rng)
            out[zz] = interpolate(x0, sampler.expected(stack, zz), t)
    return out


def _validation_loss(model: FlowModel, stack: SlideStack, sampler: StartSampler, val_z: list[int], cfg: TrainConfig, seed: int) -> float | None:
    if not val_z:
        return None
    total, count = 0.0, 0
    for z in val_z:
        y = stack.section(z).expression
        for j, t in enumerate(cfg.val_times):
            rng = rngs.stream(seed, "val", z, j)
            x0 = sampler.sample(stack, z, rng)
            xt = interpolate(x0, y, t)
            src = _train_sources(model, stack, sampler, z, t, rng)
            total += float(fm_loss(model.forward(stack, z, xt, t, src, train_sources=True), y).value[0, 0])
            count += 1
    return total / count


def train_fm(
    model: FlowModel,
    stack: SlideStack,
    train_z: list[int],
    val_z: list[int],
    sampler: StartSampler,
    cfg: TrainConfig,
    seed: int,
    frozen_prior_check: bool = True,
) -> TrainLog:
    """Endpoint-regression flow matching over slide-level batches."""
    if sampler.kind == "learned-zinb" and frozen_prior_check and not sampler.prior.frozen:
        raise FlowError("learned prior must be frozen before flow training")
    for z in train_z + val_z:
        if not stack.section(z).labeled:
            raise FlowError(f"training section z={z} carries no expression")
    store = model.denoiser.store
    opt = OptimizerState(lr=cfg.lr, clip_norm=cfg.clip)
    order_rng = rngs.stream(seed, "order")
    out = TrainLog()
    best = (np.inf, 0, None)
    since_best = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = [train_z[i] for i in order_rng.permutation(len(train_z))]
        losses = []
        for b in range(0, len(perm), cfg.batch):
            batch = perm[b : b + cfg.batch]
            step_rng = rngs.stream(seed, "step", step)
            t = float(step_rng.random())
            parts = []
            for z in batch:
                y = stack.section(z).expression
                x0 = sampler.sample(stack, z, step_rng)
                xt = interpolate(x0, y, t)
                src = _train_sources(model, stack, sampler, z, t, step_rng)
                y_hat = model.forward(stack, z, xt, t, src, training=True, rng=step_rng)
                parts.append(fm_loss(y_hat, y))
            loss = parts[0]
            for p in parts[1:]:
                loss = T.add(loss, p)
            loss = T.scale(loss, 1.0 / len(parts))
            losses.append(float(loss.value[0, 0]))
            loss.backward()
            adam_step(store, opt)
            step += 1
        val = _validation_loss(model, stack, sampler, val_z, cfg, seed)
        rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val, "wall": round(time.perf_counter() - t0, 3)}
        out.records.append(rec)
        log.info("epoch %d train %.4f val %s", epoch, rec["train_loss"], val)
        if val is not None:
            if val < best[0]:
                best = (val, epoch, {k: v.copy() for k, v in store.arrays().items()})
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    out.stopped_early = True
                    store.load(best[2])
                    break
    out.best_epoch = best[1]
    return out


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def infer_stack(
    model: Predictor,
    stack: SlideStack,
    targets: list[int],
    sampler: StartSampler,
    grid: TimeGrid,
    seed: int,
    threads: int = 1,
    starts: Mapping[int, np.ndarray] | None = None,
) -> dict[int, np.ndarray]:
    """March every target section from its start sample to ``t = 1``.

    Each round reads neighbours' states from the previous round (labeled
    neighbours contribute stored expression) and all targets update together.
    """
    if not isinstance(grid, TimeGrid):
        grid = TimeGrid(tuple(grid))
    targets = sorted(targets)
    states = {}
    for z in targets:
        if starts is not None and z in starts:
            states[z] = np.asarray(starts[z], dtype=np.float64).copy()
        else:
            states[z] = sampler.sample(stack, z, rngs.stream(seed, "start", z))
    knots = grid.knots
    steps = grid.steps
    for s in range(len(grid)):
        t = float(knots[s])
        eta = float(steps[s])
        sources = {sec.z: sec.expression for sec in stack.sections if sec.labeled}
        sources.update(states)

        def run(z):
            return model.predict(stack, z, states[z], t, sources)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                preds = dict(zip(targets, pool.map(run, targets)))
        else:
            preds = {z: run(z) for z in targets}
        states = {z: (1.0 - eta) * states[z] + eta * preds[z] for z in targets}
    return states
