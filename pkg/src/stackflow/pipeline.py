"""End-to-end flows shared by the command line and the benchmark tests."""

from __future__ import annotations

import json
import logging
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .conditioning import GeneProjection
from .config import RunConfig
from .denoiser import Denoiser, DenoiserConfig, dense_attention_flops, dense_attention_forward, gsa_flops
from .evaluation import MetricsReport, Split, compute_metrics, hvg_panel, make_split
from .flow import FlowModel, TimeGrid, TrainLog, infer_stack, train_fm
from .numerics import checkpoint
from .numerics import tensor as T
from .priors import PretrainLog, PriorNet, StartSampler, pretrain_prior
from .spatial import SlideStack, build_knn_graph, read_matrix, write_matrix
from .synth import SynthStack, generate_stack, region_oracle

log = logging.getLogger(__name__)


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def git_describe() -> str:
    try:
        res = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return f"unknown-{__version__}"
    out = res.stdout.strip()
    return out if res.returncode == 0 and out else f"unknown-{__version__}"


def append_manifest(out_dir: str | Path, command: str, cfg: RunConfig, seed: int, wall: float, extra: dict | None = None) -> dict:
    """Append one JSON line describing a run to ``out_dir/manifest.jsonl``."""
    entry = {
        "command": command,
        "config_hash": cfg.hash(),
        "config": cfg.values,
        "seed": seed,
        "git": git_describe(),
        "wall_seconds": round(wall, 3),
    }
    if extra:
        entry.update(extra)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.jsonl", "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return entry


# ---------------------------------------------------------------------------
# checkpoint metadata
# ---------------------------------------------------------------------------


def _text_record(text: str) -> np.ndarray:
    return np.frombuffer(text.encode(), dtype=np.uint8).astype(np.float64).reshape(1, -1)


def _record_text(a: np.ndarray) -> str:
    return a.ravel().astype(np.uint8).tobytes().decode()


def config_records(cfg: RunConfig) -> dict[str, np.ndarray]:
    return {"meta/config": _text_record(cfg.canonical())}


def config_from_records(records: dict[str, np.ndarray]) -> RunConfig:
    if "meta/config" not in records:
        raise PipelineError("checkpoint carries no run configuration")
    return RunConfig(json.loads(_record_text(records["meta/config"])))


# ---------------------------------------------------------------------------
# phases
# ---------------------------------------------------------------------------


def training_view(stack: SlideStack, split: Split) -> SlideStack:
    """Copy of the stack in which only train/validation sections keep expression."""
    for z in split.roles:
        if not stack.has(z):
            raise PipelineError(f"split names section z={z} absent from the stack")
    return stack.with_labels(split.labeled)


def run_pretrain(cfg: RunConfig, view: SlideStack, split: Split, seed: int) -> tuple[PriorNet, PretrainLog]:
    v = cfg.values
    net = PriorNet.create(view.G, view.D, view.frame(), seed, pos_dim=v["model.pos_dim"], hidden=v["prior.hidden"])
    plog = pretrain_prior(
        view,
        net,
        split.train,
        split.validation,
        epochs=v["prior.epochs"],
        patience=v["prior.patience"],
        lr=v["prior.lr"],
        batch_spots=v["prior.batch_spots"],
        seed=seed,
        holdout=v["prior.holdout"],
    )
    return net, plog


def build_sampler(cfg: RunConfig, prior: PriorNet | None) -> StartSampler:
    v = cfg.values
    kind = v["prior.kind"]
    if kind == "learned-zinb" and prior is None:
        raise PipelineError("learned-zinb start needs a pretrained prior")
    return StartSampler(
        kind,
        prior if kind == "learned-zinb" else None,
        cfg.fixed_zinb(),
        empirical_k=v["prior.empirical_k"],
        empirical_sigma=v["prior.empirical_sigma"],
    )


def build_model(cfg: RunConfig, view: SlideStack, split: Split, seed: int) -> FlowModel:
    dcfg = cfg.denoiser(view.G, view.D)
    edges = np.concatenate([build_knn_graph(view.section(z), dcfg.k).distances.ravel() for z in split.train])
    den = Denoiser.create(dcfg, view.frame(), edges, seed)
    expr = np.concatenate([view.section(z).expression for z in split.train])
    proj = GeneProjection.top_variance(expr, dcfg.rank)
    return FlowModel(den, proj, cfg.blend(), k_adjacent=cfg["adjacent.k"], use_adjacent=cfg["adjacent.enabled"], train_reach=cfg["adjacent.train_reach"])


@dataclass
class Trained:
    cfg: RunConfig
    model: FlowModel
    sampler: StartSampler
    prior: PriorNet | None = None
    train_log: TrainLog = field(default_factory=TrainLog)
    pretrain_log: PretrainLog | None = None
    prior_fingerprints: list[str] = field(default_factory=list)

    def records(self) -> dict[str, np.ndarray]:
        out = dict(self.model.denoiser.records())
        if self.prior is not None:
            out.update(self.prior.records())
        out.update(config_records(self.cfg))
        out["meta/projection"] = self.model.projection.genes.reshape(1, -1).astype(np.float64)
        out["meta/shape"] = np.array([[self.model.projection.n_genes, self.model.denoiser.cfg.emb_dim]], dtype=np.float64)
        return out


def run_train(cfg: RunConfig, stack: SlideStack, split: Split, seed: int, prior: PriorNet | None = None) -> Trained:
    """Prior pretraining (when a learned prior is configured and none is given), then flow training."""
    view = training_view(stack, split)
    if not split.train:
        raise PipelineError("split has no training section")
    plog = None
    if cfg["prior.kind"] == "learned-zinb" and prior is None:
        prior, plog = run_pretrain(cfg, view, split, seed)
    if cfg["prior.kind"] != "learned-zinb":
        prior = None
    sampler = build_sampler(cfg, prior)
    model = build_model(cfg, view, split, seed)
    prints = [prior.fingerprint()] if prior is not None else []
    tlog = train_fm(model, view, split.train, split.validation, sampler, cfg.train(), seed)
    if prior is not None:
        prints.append(prior.fingerprint())
    return Trained(cfg, model, sampler, prior, tlog, plog, prints)


def load_trained(records: dict[str, np.ndarray]) -> Trained:
    cfg = config_from_records(records)
    g, d = (int(x) for x in records["meta/shape"].ravel())
    dcfg: DenoiserConfig = cfg.denoiser(g, d)
    den = Denoiser.create(dcfg, None, np.zeros(1), seed=0)
    den.load_records(records)
    genes = records["meta/projection"].ravel().astype(np.int64)
    proj = GeneProjection(genes, g)
    model = FlowModel(den, proj, cfg.blend(), k_adjacent=cfg["adjacent.k"], use_adjacent=cfg["adjacent.enabled"], train_reach=cfg["adjacent.train_reach"])
    prior = PriorNet.from_records(records) if "prior/shape" in records else None
    if prior is not None and not prior.frozen:
        raise PipelineError("checkpoint holds an unfrozen prior")
    return Trained(cfg, model, build_sampler(cfg, prior), prior)


def run_infer(trained: Trained, stack: SlideStack, split: Split, seed: int, threads: int = 1) -> dict[int, np.ndarray]:
    view = training_view(stack, split)
    if view.G != trained.model.projection.n_genes or view.D != trained.model.denoiser.cfg.emb_dim:
        raise PipelineError("stack dimensions do not match the checkpoint")
    grid = TimeGrid.uniform(trained.cfg["infer.steps"])
    return infer_stack(trained.model, view, split.test, trained.sampler, grid, seed, threads=threads)


def save_predictions(out_dir: str | Path, preds: dict[int, np.ndarray]) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for z in sorted(preds):
        p = out / f"pred_z{z}.bin"
        write_matrix(p, preds[z])
        paths.append(p)
    return paths


def load_predictions(pred_dir: str | Path) -> dict[int, np.ndarray]:
    out = {}
    for p in sorted(Path(pred_dir).glob("pred_z*.bin")):
        out[int(p.stem[len("pred_z") :])] = read_matrix(p)
    if not out:
        raise PipelineError(f"no pred_z*.bin files under {pred_dir}")
    return out


def run_eval(preds: dict[int, np.ndarray], stack: SlideStack, split: Split | None = None, hvg: int = 0) -> MetricsReport:
    """Pool predicted sections and score them against stored expression."""
    zs = sorted(preds)
    for z in zs:
        sec = stack.section(z)
        if sec.expression is None:
            raise PipelineError(f"no ground truth for section z={z}")
        if preds[z].shape != sec.expression.shape:
            raise PipelineError(f"z={z}: prediction shape {preds[z].shape} != truth {sec.expression.shape}")
    pred = np.concatenate([preds[z] for z in zs])
    truth = np.concatenate([stack.section(z).expression for z in zs])
    if hvg > 0:
        if split is None or not split.labeled:
            raise PipelineError("an HVG panel needs labeled sections to select from")
        genes = hvg_panel(stack, sorted(split.labeled), hvg)
        pred, truth = pred[:, genes], truth[:, genes]
    return compute_metrics(pred, truth)


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkResult:
    metrics: MetricsReport
    oracle: MetricsReport
    seconds: dict[str, float]
    trained: Trained
    preds: dict[int, np.ndarray]
    infer_fingerprint: str = ""


def generate(cfg: RunConfig, seed: int) -> SynthStack:
    return generate_stack(cfg.synth(seed))


def oracle_metrics(syn: SynthStack, split: Split) -> MetricsReport:
    """Ceiling reference: predict each held-out spot by its true region's mean."""
    orc = region_oracle(syn.stack, syn.labels, sorted(split.labeled), split.test, syn.config.R)
    return run_eval(orc, syn.stack)


def run_benchmark(cfg: RunConfig, seed: int, threads: int = 1) -> BenchmarkResult:
    syn = generate(cfg, seed)
    split = make_split(syn.stack.Z, cfg["split.kind"], seed)
    oracle = oracle_metrics(syn, split)
    t0 = time.perf_counter()
    trained = run_train(cfg, syn.stack, split, seed)
    t1 = time.perf_counter()
    preds = run_infer(trained, syn.stack, split, seed, threads)
    t2 = time.perf_counter()
    fp = trained.prior.fingerprint() if trained.prior is not None else ""
    metrics = run_eval(preds, syn.stack, split, cfg["eval.hvg"])
    return BenchmarkResult(metrics, oracle, {"train": t1 - t0, "infer": t2 - t1}, trained, preds, fp)


# ---------------------------------------------------------------------------
# inducing-point scaling measurement
# ---------------------------------------------------------------------------


@dataclass
class GsaBench:
    n: tuple[int, int]
    m: int
    d: int
    flop_ratio: float
    time_gsa: tuple[float, float]
    time_dense_large: float
    flops_dense_large: int

    @property
    def time_ratio(self) -> float:
        return self.time_gsa[1] / self.time_gsa[0]

    @property
    def dense_over_gsa(self) -> float:
        return self.time_dense_large / self.time_gsa[1]

    def to_dict(self) -> dict:
        return {
            "n": list(self.n),
            "m": self.m,
            "d": self.d,
            "flop_ratio": self.flop_ratio,
            "time_gsa": list(self.time_gsa),
            "time_ratio": self.time_ratio,
            "time_dense_large": self.time_dense_large,
            "dense_over_gsa": self.dense_over_gsa,
            "flops_dense_large": self.flops_dense_large,
        }


def _best_time(fn, repeats: int) -> float:
    fn()
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_gsa(n: int = 2000, m: int = 16, d: int = 128, heads: int = 4, ffn_mult: int = 4, repeats: int = 5, seed: int = 0) -> GsaBench:
    """Forward wall time of one inducing-point block at ``n`` and ``2n`` spots,
    against a dense self-attention block at ``2n``."""
    from . import rng as rngs

    dcfg = DenoiserConfig(genes=1, emb_dim=1, layers=1, hidden=d, heads=heads, inducing=m, ffn_mult=ffn_mult)
    den = Denoiser.create(dcfg, None, np.ones(1), seed)
    gen = rngs.stream(seed, "bench")
    xs = {k: gen.normal(size=(k, d)) for k in (n, 2 * n)}
    times = tuple(_best_time(lambda k=k: den.gsa(T.constant(xs[k]), 0), repeats) for k in (n, 2 * n))
    dense = _best_time(lambda: dense_attention_forward(xs[2 * n], den.store, "block0.gsa", heads), max(1, repeats // 2))
    return GsaBench(
        (n, 2 * n),
        m,
        d,
        gsa_flops(2 * n, m, d, ffn_mult) / gsa_flops(n, m, d, ffn_mult),
        times,
        dense,
        dense_attention_flops(2 * n, d, ffn_mult),
    )
