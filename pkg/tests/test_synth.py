import numpy as np
import pytest

from stackflow.spatial import load_stack, save_stack
from stackflow.synth import SynthConfig, SynthError, generate_stack, nearest_centroid_accuracy, region_oracle


@pytest.fixture(scope="module")
def default_stack():
    return generate_stack(SynthConfig(seed=0))


def test_spot_counts_and_shapes(default_stack):
    st = default_stack.stack
    assert st.Z == 8 and st.G == 50 and st.D == 32
    assert all(len(s) == 200 for s in st.sections)
    assert all(np.array_equal(s.expression, np.log1p(s.counts)) for s in st.sections)


def test_same_seed_bitwise_identical(default_stack):
    again = generate_stack(SynthConfig(seed=0)).stack
    for a, b in zip(default_stack.stack.sections, again.sections):
        assert np.array_equal(a.counts, b.counts) and np.array_equal(a.coords, b.coords)
        assert np.array_equal(a.embeddings, b.embeddings)
    other = generate_stack(SynthConfig(seed=1)).stack
    assert not np.array_equal(other.section(1).counts, again.section(1).counts)


def test_adjacent_label_agreement(default_stack):
    st, labels = default_stack.stack, default_stack.labels
    hits = total = 0
    for z in range(1, st.Z):
        a, b = st.section(z).coords, st.section(z + 1).coords
        for i in range(len(a)):
            j = int(np.argmin(((b - a[i]) ** 2).sum(axis=1)))
            hits += labels[z][i] == labels[z + 1][j]
            total += 1
    assert hits / total > 0.9


def test_region_means_match_programs():
    s = generate_stack(SynthConfig(Z=1, spots=4000, G=50, D=4, R=2, seed=0))
    lab, counts = s.labels[1], s.stack.section(1).counts
    want = s.programs.mean_counts()
    for r in range(2):
        assert (lab == r).sum() >= 500
        got = counts[lab == r].mean(axis=0)
        assert np.max(np.abs(got / want[r] - 1.0)) < 0.05


def test_embedding_accuracy_rises_with_snr():
    acc = [nearest_centroid_accuracy(g.stack, g.labels, 4) for g in (generate_stack(SynthConfig(Z=2, snr=v, seed=3)) for v in (0.0, 1.0, 4.0))]
    assert acc[0] < acc[1] < acc[2]


def test_markers_are_elevated(default_stack):
    p = default_stack.programs
    assert all(len(m) == 10 for m in p.markers)
    assert np.all(p.pi < 1) and np.all(p.theta > 0)


def test_invalid_configs():
    for kw in ({"R": 1}, {"spots": 3, "R": 4}, {"smoothness": 1.5}):
        with pytest.raises(SynthError):
            SynthConfig(**kw)


def test_region_oracle_uses_region_means(default_stack):
    st, labels = default_stack.stack, default_stack.labels
    pred = region_oracle(st, labels, [1, 3], [2], 4)
    expr = np.concatenate([st.section(z).expression for z in (1, 3)])
    lab = np.concatenate([labels[1], labels[3]])
    r = labels[2][0]
    assert np.allclose(pred[2][0], expr[lab == r].mean(axis=0))


def test_disk_layout_has_counts_and_labels(tmp_path):
    s = generate_stack(SynthConfig(Z=2, spots=9, G=3, D=2, R=2, seed=0))
    save_stack(s.stack, tmp_path)
    assert (tmp_path / "counts_z1.bin").exists() and (tmp_path / "labels_z2.csv").exists()
    back = load_stack(tmp_path)
    assert np.array_equal(back.section(2).labels, s.labels[2])
