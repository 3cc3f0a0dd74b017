"""Metrics, split protocols, HVG panels and neighbour consistency."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from . import rng as rngs
from .spatial import NeighborGraph, SlideStack


class EvaluationError(ValueError):
    pass


@dataclass
class MetricsReport:
    mse: float
    mae: float
    pcc_spot: float
    pcc_spot_std: float
    pcc_gene: float
    pcc_gene_std: float
    excluded_spots: int = 0
    excluded_genes: int = 0
    n_spots: int = 0
    n_genes: int = 0

    def to_text(self) -> str:
        return "".join(f"{k}: {v!r}\n" for k, v in asdict(self).items())

    def to_dict(self) -> dict:
        return asdict(self)


def _rowwise_pcc(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Pearson correlation and a mask of rows where it is defined."""
    ac = a - a.mean(axis=1, keepdims=True)
    bc = b - b.mean(axis=1, keepdims=True)
    sa = np.sqrt((ac * ac).sum(axis=1))
    sb = np.sqrt((bc * bc).sum(axis=1))
    ok = (sa > 0) & (sb > 0)
    r = np.zeros(a.shape[0])
    r[ok] = (ac[ok] * bc[ok]).sum(axis=1) / (sa[ok] * sb[ok])
    return np.clip(r, -1.0, 1.0), ok


def compute_metrics(pred: np.ndarray, truth: np.ndarray) -> MetricsReport:
    """MSE/MAE plus spot-wise and gene-wise PCC (constant rows/cols excluded)."""
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 2:
        raise EvaluationError(f"shape mismatch {p.shape} vs {y.shape}")
    n, g = p.shape
    if n < 2 or g < 2:
        raise EvaluationError("need at least 2 spots and 2 genes")
    err = p - y
    r_spot, ok_spot = _rowwise_pcc(p, y)
    r_gene, ok_gene = _rowwise_pcc(p.T, y.T)
    if not ok_spot.any():
        raise EvaluationError("spot-wise correlation undefined: every row is constant")
    if not ok_gene.any():
        raise EvaluationError("gene-wise correlation undefined: every column is constant")
    return MetricsReport(
        mse=float(np.mean(err * err)),
        mae=float(np.mean(np.abs(err))),
        pcc_spot=float(r_spot[ok_spot].mean()),
        pcc_spot_std=float(r_spot[ok_spot].std()),
        pcc_gene=float(r_gene[ok_gene].mean()),
        pcc_gene_std=float(r_gene[ok_gene].std()),
        excluded_spots=int((~ok_spot).sum()),
        excluded_genes=int((~ok_gene).sum()),
        n_spots=n,
        n_genes=g,
    )


SplitKind = Literal["even-slice", "single-label"]
Role = Literal["train", "validation", "test"]


@dataclass
class Split:
    kind: str
    roles: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if "test" not in self.roles.values():
            raise EvaluationError("split has no test section")

    def sections(self, role: str) -> list[int]:
        return sorted(z for z, r in self.roles.items() if r == role)

    @property
    def train(self) -> list[int]:
        return self.sections("train")

    @property
    def validation(self) -> list[int]:
        return self.sections("validation")

    @property
    def test(self) -> list[int]:
        return self.sections("test")

    @property
    def labeled(self) -> set[int]:
        return set(self.train) | set(self.validation)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "roles": {str(k): v for k, v in sorted(self.roles.items())}}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Split":
        d = json.loads(text)
        return cls(d["kind"], {int(k): v for k, v in d["roles"].items()})


def make_split(Z: int, kind: str, seed: int = 0) -> Split:
    if kind in ("even", "even-slice"):
        if Z < 3:
            raise EvaluationError("even-slice split needs Z >= 3")
        odd = [z for z in range(1, Z + 1) if z % 2]
        roles = {z: "test" for z in range(2, Z + 1, 2)}
        roles.update({z: "train" for z in odd[:-1]})
        roles[odd[-1]] = "validation"
        return Split("even-slice", roles)
    if kind in ("single", "single-label"):
        if Z < 2:
            raise EvaluationError("single-label split needs Z >= 2")
        pick = int(rngs.stream(seed, "split").integers(1, Z + 1))
        return Split("single-label", {z: ("train" if z == pick else "test") for z in range(1, Z + 1)})
    raise EvaluationError(f"unknown split kind {kind!r}")


def hvg_select(expression: np.ndarray, top_k: int) -> np.ndarray:
    """Indices of the ``top_k`` highest-variance genes (ties: lower index), ascending."""
    x = np.asarray(expression, dtype=np.float64)
    if top_k > x.shape[1]:
        raise EvaluationError("top_k exceeds gene count")
    var = x.var(axis=0)
    order = np.lexsort((np.arange(var.size), -var))
    return np.sort(order[:top_k])


def hvg_panel(stack: SlideStack, train_z: list[int], top_k: int) -> np.ndarray:
    return hvg_select(np.concatenate([stack.section(z).expression for z in train_z]), top_k)


def neighbor_consistency(edges, labels: dict[int, int] | np.ndarray) -> float:
    """Fraction of undirected edges whose endpoints share a cluster label."""
    if isinstance(edges, NeighborGraph):
        edges = edges.edges()
    uniq = {(a, b) if a <= b else (b, a) for a, b in edges if a != b}
    if not uniq:
        raise EvaluationError("neighbor consistency needs at least one edge")
    same = sum(1 for a, b in uniq if labels[a] == labels[b])
    return same / len(uniq)
