"""Serial-section corpus, within-section kNN graphs and cross-section lookups."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

log = logging.getLogger(__name__)

Source = Literal["labeled", "any"]


class StackError(ValueError):
    pass


@dataclass(frozen=True)
class Spot:
    id: int
    coords: tuple[float, float]
    section: int
    embedding: np.ndarray
    expression: np.ndarray | None = None


@dataclass
class Section:
    """Spots of one section stored column-wise.

    ``expression`` holds log1p values and ``counts`` the raw integer counts;
    both are ``None`` for an unlabeled section.
    """

    z: int
    ids: np.ndarray
    coords: np.ndarray
    embeddings: np.ndarray
    expression: np.ndarray | None = None
    counts: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        n = len(self.ids)
        if self.coords.shape[0] != n or self.embeddings.shape[0] != n:
            raise StackError(f"section z={self.z}: inconsistent spot counts")
        if self.expression is not None:
            self.expression = np.asarray(self.expression, dtype=np.float64)
            if self.expression.shape[0] != n:
                raise StackError(f"section z={self.z}: expression rows != spots")
            if np.any(self.expression < 0):
                raise StackError(f"section z={self.z}: negative expression")
        if self.counts is not None:
            self.counts = np.asarray(self.counts, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def labeled(self) -> bool:
        return self.expression is not None

    def spot(self, row: int) -> Spot:
        expr = None if self.expression is None else self.expression[row]
        return Spot(int(self.ids[row]), (float(self.coords[row, 0]), float(self.coords[row, 1])), self.z, self.embeddings[row], expr)

    def unlabeled(self) -> "Section":
        return replace(self, expression=None, counts=None)


@dataclass
class SlideStack:
    sections: list[Section]
    gene_names: list[str]
    units: str = "grid"

    def __post_init__(self):
        zs = [s.z for s in self.sections]
        if zs != list(range(1, len(zs) + 1)):
            raise StackError(f"section indices must be 1..Z in order, got {zs}")
        dims = {s.embeddings.shape[1] for s in self.sections}
        if len(dims) > 1:
            raise StackError("embedding dimension differs across sections")
        for s in self.sections:
            if s.expression is not None and s.expression.shape[1] != len(self.gene_names):
                raise StackError(f"section z={s.z}: expression width != gene count")
        all_ids = np.concatenate([s.ids for s in self.sections]) if self.sections else np.array([])
        if len(np.unique(all_ids)) != len(all_ids):
            raise StackError("spot ids must be unique across the stack")

    @property
    def Z(self) -> int:
        return len(self.sections)

    @property
    def G(self) -> int:
        return len(self.gene_names)

    @property
    def D(self) -> int:
        return self.sections[0].embeddings.shape[1]

    def section(self, z: int) -> Section:
        if not 1 <= z <= self.Z:
            raise StackError(f"no section z={z}")
        return self.sections[z - 1]

    def has(self, z: int) -> bool:
        return 1 <= z <= self.Z

    def frame(self) -> "Frame":
        pts = np.concatenate([s.coords for s in self.sections])
        return Frame(float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max()))

    def with_labels(self, labeled: set[int]) -> "SlideStack":
        """Copy in which only sections in ``labeled`` keep expression."""
        secs = [s if s.z in labeled else s.unlabeled() for s in self.sections]
        return SlideStack(secs, list(self.gene_names), self.units)


@dataclass(frozen=True)
class Frame:
    a_min: float
    b_min: float
    a_max: float
    b_max: float

    def normalize(self, coords: np.ndarray) -> tuple[np.ndarray, int]:
        """Map coordinates to ``[0,1]^2``; returns values and the clamp count."""
        lo = np.array([self.a_min, self.b_min])
        span = np.array([self.a_max - self.a_min, self.b_max - self.b_min])
        span = np.where(span > 0, span, 1.0)
        u = (np.asarray(coords, dtype=np.float64) - lo) / span
        outside = int(np.sum(np.any((u < 0) | (u > 1), axis=1)))
        return np.clip(u, 0.0, 1.0), outside

    def shifted(self, da: float, db: float) -> "Frame":
        return Frame(self.a_min + da, self.b_min + db, self.a_max + da, self.b_max + db)


@dataclass
class NeighborGraph:
    """Per-spot neighbour rows (local indices), ids and planar distances.

    Rows hold ``min(k, n-1)`` neighbours sorted by (distance, id).
    """

    index: np.ndarray
    ids: np.ndarray
    distances: np.ndarray
    spot_ids: np.ndarray

    @property
    def k(self) -> int:
        return self.index.shape[1]

    def edges(self) -> set[tuple[int, int]]:
        """Undirected edge set over spot ids."""
        out = set()
        for i, row in zip(self.spot_ids, self.ids):
            for j in row:
                a, b = int(i), int(j)
                out.add((a, b) if a < b else (b, a))
        return out


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _sorted_nearest(dist: np.ndarray, cand_ids: np.ndarray, k: int) -> np.ndarray:
    """Column order per row by (distance, id), first ``k`` columns."""
    n, m = dist.shape
    order = np.empty((n, min(k, m)), dtype=np.int64)
    for i in range(n):
        o = np.lexsort((cand_ids, dist[i]))
        order[i] = o[:k]
    return order


def build_knn_graph(section: Section, k: int = 8) -> NeighborGraph:
    n = len(section)
    if n == 0:
        raise StackError("cannot build a kNN graph over an empty section")
    if k < 1:
        raise ValueError("k must be >= 1")
    kk = min(k, n - 1)
    dist = _pairwise(section.coords, section.coords)
    np.fill_diagonal(dist, np.inf)
    if kk == 0:
        empty = np.zeros((n, 0), dtype=np.int64)
        return NeighborGraph(empty, empty.copy(), np.zeros((n, 0)), section.ids.copy())
    order = _sorted_nearest(dist, section.ids, kk)
    d = np.take_along_axis(dist, order, axis=1)
    return NeighborGraph(order, section.ids[order], d, section.ids.copy())


@dataclass
class AdjacentCandidates:
    """Cross-section candidates for every spot of one query section.

    ``section`` and ``row`` locate each candidate; padded slots have
    ``valid == False``.  ``available[i]`` is false iff spot ``i`` has none.
    """

    section: np.ndarray
    row: np.ndarray
    ids: np.ndarray
    distances: np.ndarray
    valid: np.ndarray
    available: np.ndarray

    def for_spot(self, i: int) -> list[tuple[int, int]]:
        return [(int(z), int(r)) for z, r, v in zip(self.section[i], self.row[i], self.valid[i]) if v]


def adjacent_candidates(
    stack: SlideStack,
    z: int,
    k: int = 8,
    source: Source = "any",
    query_coords: np.ndarray | None = None,
    sections: Sequence[int] | None = None,
) -> AdjacentCandidates:
    """The ``k`` planar-nearest spots on sections ``z-1`` and ``z+1``.

    With ``source="labeled"`` only spots of labeled sections qualify.
    ``query_coords`` defaults to all spots of section ``z``; ``sections``
    replaces the default pair of source sections.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = stack.section(z).coords if query_coords is None else np.asarray(query_coords, dtype=np.float64).reshape(-1, 2)
    n = q.shape[0]
    pool_z, pool_row, pool_ids, pool_xy = [], [], [], []
    for zz in (z - 1, z + 1) if sections is None else sections:
        if zz == z or not stack.has(zz):
            continue
        sec = stack.section(zz)
        if source == "labeled" and not sec.labeled:
            continue
        pool_z.append(np.full(len(sec), zz))
        pool_row.append(np.arange(len(sec)))
        pool_ids.append(sec.ids)
        pool_xy.append(sec.coords)
    kk = k
    shape = (n, kk)
    if not pool_z:
        return AdjacentCandidates(
            np.zeros(shape, np.int64), np.zeros(shape, np.int64), np.full(shape, -1, np.int64),
            np.zeros(shape), np.zeros(shape, bool), np.zeros(n, bool),
        )
    pz = np.concatenate(pool_z)
    pr = np.concatenate(pool_row)
    pid = np.concatenate(pool_ids)
    dist = _pairwise(q, np.concatenate(pool_xy))
    order = _sorted_nearest(dist, pid, kk)
    m = order.shape[1]
    sec_out = np.zeros(shape, np.int64)
    row_out = np.zeros(shape, np.int64)
    id_out = np.full(shape, -1, np.int64)
    d_out = np.zeros(shape)
    valid = np.zeros(shape, bool)
    sec_out[:, :m] = pz[order]
    row_out[:, :m] = pr[order]
    id_out[:, :m] = pid[order]
    d_out[:, :m] = np.take_along_axis(dist, order, axis=1)
    valid[:, :m] = True
    return AdjacentCandidates(sec_out, row_out, id_out, d_out, valid, valid.any(axis=1))


def positional_features(coords: np.ndarray, frame: Frame, dim: int = 16) -> tuple[np.ndarray, int]:
    """Sinusoidal features of frame-normalised ``(a, b)``.

    ``dim`` must be a multiple of 4; for each of ``dim/4`` octave frequencies
    ``2**j * pi`` the columns are ``sin(a'), cos(a'), sin(b'), cos(b')``.
    Returns the features and the number of clamped (out-of-frame) spots.
    """
    if dim % 4:
        raise ValueError("positional feature dim must be a multiple of 4")
    u, clamped = frame.normalize(coords)
    if clamped:
        log.warning("%d spots outside the frame were clamped", clamped)
    freqs = (2.0 ** np.arange(dim // 4)) * np.pi
    out = np.empty((u.shape[0], dim))
    for j, f in enumerate(freqs):
        out[:, 4 * j] = np.sin(f * u[:, 0])
        out[:, 4 * j + 1] = np.cos(f * u[:, 0])
        out[:, 4 * j + 2] = np.sin(f * u[:, 1])
        out[:, 4 * j + 3] = np.cos(f * u[:, 1])
    return out, clamped


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


def write_matrix(path: Path, a: np.ndarray, dtype: str = "<f8") -> None:
    a = np.ascontiguousarray(np.asarray(a).astype(dtype))
    rows, cols = a.shape
    Path(path).write_bytes(struct.pack("<II", rows, cols) + a.tobytes())


def read_matrix(path: Path, dtype: str = "<f8") -> np.ndarray:
    blob = Path(path).read_bytes()
    rows, cols = struct.unpack_from("<II", blob, 0)
    a = np.frombuffer(blob, dtype=dtype, count=rows * cols, offset=8).reshape(rows, cols)
    return a.astype(np.float64 if dtype.endswith("f8") else np.int64)


def save_stack(stack: SlideStack, root: str | Path, extra: dict | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    meta = {
        "Z": stack.Z,
        "G": stack.G,
        "D": stack.D,
        "gene_names": stack.gene_names,
        "spots_per_section": [len(s) for s in stack.sections],
        "units": stack.units,
    }
    if extra:
        meta.update(extra)
    (root / "stack.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for s in stack.sections:
        with open(root / f"spots_z{s.z}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "a", "b"])
            for i, (a, b) in zip(s.ids, s.coords):
                w.writerow([int(i), repr(float(a)), repr(float(b))])
        write_matrix(root / f"emb_z{s.z}.bin", s.embeddings)
        if s.expression is not None:
            write_matrix(root / f"expr_z{s.z}.bin", s.expression)
        if s.counts is not None:
            write_matrix(root / f"counts_z{s.z}.bin", s.counts, dtype="<i8")
        if s.labels is not None:
            with open(root / f"labels_z{s.z}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["id", "region"])
                for i, r in zip(s.ids, s.labels):
                    w.writerow([int(i), int(r)])


def load_stack(root: str | Path) -> SlideStack:
    root = Path(root)
    meta = json.loads((root / "stack.json").read_text())
    sections = []
    for z in range(1, meta["Z"] + 1):
        with open(root / f"spots_z{z}.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        ids = np.array([int(r["id"]) for r in rows], dtype=np.int64)
        coords = np.array([[float(r["a"]), float(r["b"])] for r in rows]).reshape(-1, 2)
        emb = read_matrix(root / f"emb_z{z}.bin")
        expr_p = root / f"expr_z{z}.bin"
        counts_p = root / f"counts_z{z}.bin"
        labels_p = root / f"labels_z{z}.csv"
        expr = read_matrix(expr_p) if expr_p.exists() else None
        counts = read_matrix(counts_p, dtype="<i8") if counts_p.exists() and expr is not None else None
        labels = None
        if labels_p.exists():
            with open(labels_p, newline="") as fh:
                lab = {int(r["id"]): int(r["region"]) for r in csv.DictReader(fh)}
            labels = np.array([lab[int(i)] for i in ids], dtype=np.int64)
        sections.append(Section(z, ids, coords, emb, expr, counts, labels))
        if len(ids) != meta["spots_per_section"][z - 1]:
            raise StackError(f"z={z}: spot count disagrees with stack.json")
    stack = SlideStack(sections, list(meta["gene_names"]), meta.get("units", "grid"))
    if stack.G != meta["G"] or stack.D != meta["D"]:
        raise StackError("stack.json dimensions disagree with data files")
    return stack


@dataclass
class SectionGraphs:
    """kNN graphs cached per section (the stack is immutable after load)."""

    k: int
    graphs: dict[int, NeighborGraph] = field(default_factory=dict)

    def get(self, section: Section) -> NeighborGraph:
        g = self.graphs.get(section.z)
        if g is None:
            g = build_knn_graph(section, self.k)
            self.graphs[section.z] = g
        return g
