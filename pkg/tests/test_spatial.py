import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import knn_loop
from stackflow.spatial import (
    Frame,
    Section,
    SlideStack,
    StackError,
    adjacent_candidates,
    build_knn_graph,
    load_stack,
    positional_features,
    read_matrix,
    save_stack,
    write_matrix,
)
from stackflow.synth import SynthConfig, generate_stack


def _section(z, coords, ids=None, expr=True, G=3, D=2):
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    n = len(coords)
    ids = np.arange(n) + 100 * z if ids is None else ids
    e = np.abs(np.random.default_rng(z).normal(size=(n, G))) if expr else None
    return Section(z, ids, coords, np.ones((n, D)), e)


def test_knn_collinear_example():
    g = build_knn_graph(_section(1, [[0, 0], [1, 0], [3, 0]], ids=np.array([0, 1, 2])), 1)
    assert g.ids[1, 0] == 0 and g.distances[1, 0] == 1.0


def test_knn_complete_graph_when_k_large():
    g = build_knn_graph(_section(1, [[0, 0], [1, 0], [0, 2], [5, 5]]), 10)
    assert g.k == 3
    for i, row in enumerate(g.index):
        assert set(row) == set(range(4)) - {i}


def test_knn_tie_breaks_by_lower_id():
    g = build_knn_graph(_section(1, [[0, 0], [1, 0], [-1, 0]], ids=np.array([5, 9, 7])), 1)
    assert g.ids[0, 0] == 7


def test_knn_empty_section():
    with pytest.raises(StackError):
        build_knn_graph(Section(1, np.zeros(0, int), np.zeros((0, 2)), np.zeros((0, 2))), 3)


@given(st.integers(2, 25), st.integers(1, 6), st.integers(0, 10_000))
def test_knn_matches_brute_force_and_is_order_free(n, k, seed):
    rng = np.random.default_rng(seed)
    coords = rng.integers(0, 5, size=(n, 2)).astype(float)  # integer grid: plenty of ties
    ids = rng.permutation(1000)[:n]
    g = build_knn_graph(Section(1, ids, coords, np.zeros((n, 1))), k)
    assert g.ids.tolist() == knn_loop(coords, ids, k)
    perm = rng.permutation(n)
    g2 = build_knn_graph(Section(1, ids[perm], coords[perm], np.zeros((n, 1))), k)
    by_id = {int(i): row.tolist() for i, row in zip(g.spot_ids, g.ids)}
    assert all(by_id[int(i)] == row.tolist() for i, row in zip(g2.spot_ids, g2.ids))


def _stack(Z=3, n=5, labeled=None):
    rng = np.random.default_rng(0)
    secs = []
    for z in range(1, Z + 1):
        s = _section(z, rng.uniform(0, 4, size=(n, 2)))
        if labeled is not None and z not in labeled:
            s = s.unlabeled()
        secs.append(s)
    return SlideStack(secs, ["g0", "g1", "g2"])


def test_candidates_boundary_uses_single_neighbour():
    cand = adjacent_candidates(_stack(), 1, 4)
    assert set(cand.section[cand.valid].tolist()) == {2}


def test_candidates_two_nearest_by_brute_force():
    st_ = _stack(Z=3, n=5)
    cand = adjacent_candidates(st_, 2, 2)
    q = st_.section(2).coords
    for i in range(5):
        pool = []
        for zz in (1, 3):
            s = st_.section(zz)
            for r in range(5):
                pool.append((math.dist(q[i], s.coords[r]), int(s.ids[r]), zz, r))
        pool.sort()
        assert [(z, r) for _, _, z, r in pool[:2]] == cand.for_spot(i)


def test_candidates_single_section_stack_is_empty():
    cand = adjacent_candidates(_stack(Z=1), 1, 3)
    assert not cand.available.any() and not cand.valid.any()


def test_candidates_labeled_source_skips_unlabeled():
    st_ = _stack(Z=3, labeled={1})
    cand = adjacent_candidates(st_, 2, 8, "labeled")
    assert set(cand.section[cand.valid].tolist()) == {1}
    none = adjacent_candidates(_stack(Z=3, labeled={2}), 2, 8, "labeled")
    assert not none.available.any()


def test_candidates_fewer_than_k_keep_all_with_mask():
    st_ = _stack(Z=2, n=3)
    cand = adjacent_candidates(st_, 1, 8)
    assert cand.valid.sum(axis=1).tolist() == [3, 3, 3]
    assert cand.available.all()


@given(st.integers(1, 5), st.integers(1, 12))
def test_candidates_always_from_adjacent_sections(Z, k):
    st_ = _stack(Z=Z)
    for z in range(1, Z + 1):
        cand = adjacent_candidates(st_, z, k)
        assert np.all(np.abs(cand.section[cand.valid] - z) == 1)


def test_positional_features_examples():
    fr = Frame(0.0, 0.0, 10.0, 10.0)
    f, clamped = positional_features(np.array([[0.0, 0.0], [3.0, 4.0], [3.0, 4.0]]), fr, 16)
    assert clamped == 0
    assert np.allclose(f[0, 0::2], 0.0) and np.allclose(f[0, 1::2], 1.0)
    assert np.array_equal(f[1], f[2])
    g, _ = positional_features(np.array([[0.0, 0.0], [3.0, 4.0], [3.0, 4.0]]) + [7.5, -2.0], fr.shifted(7.5, -2.0), 16)
    assert np.allclose(f, g, atol=1e-12)


def test_positional_features_clamp_flag():
    _, clamped = positional_features(np.array([[11.0, 0.0], [1.0, 1.0]]), Frame(0, 0, 10, 10), 8)
    assert clamped == 1


def test_stack_invariants():
    with pytest.raises(StackError):
        SlideStack([_section(2, [[0, 0]])], ["a", "b", "c"])
    with pytest.raises(StackError):
        SlideStack([_section(1, [[0, 0]], ids=np.array([1])), _section(2, [[0, 0]], ids=np.array([1]))], ["a", "b", "c"])
    with pytest.raises(StackError):
        Section(1, [0], [[0, 0]], [[1.0]], [[-1.0]])


def test_matrix_file_header(tmp_path):
    a = np.arange(6.0).reshape(2, 3)
    write_matrix(tmp_path / "m.bin", a)
    blob = (tmp_path / "m.bin").read_bytes()
    assert blob[:8] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(blob) == 8 + 6 * 8
    assert np.array_equal(read_matrix(tmp_path / "m.bin"), a)


def test_stack_round_trip(tmp_path):
    syn = generate_stack(SynthConfig(Z=3, spots=10, G=4, D=3, R=2, seed=1))
    st_ = syn.stack.with_labels({1, 3})
    save_stack(st_, tmp_path)
    back = load_stack(tmp_path)
    assert back.Z == 3 and back.G == 4 and back.D == 3
    assert not back.section(2).labeled and not (tmp_path / "expr_z2.bin").exists()
    for a, b in zip(st_.sections, back.sections):
        assert np.array_equal(a.ids, b.ids) and np.array_equal(a.coords, b.coords)
        assert np.array_equal(a.embeddings, b.embeddings)
        if a.labeled:
            assert np.array_equal(a.expression, b.expression)
            assert np.array_equal(a.counts, b.counts)
        assert np.array_equal(a.labels, b.labels)
