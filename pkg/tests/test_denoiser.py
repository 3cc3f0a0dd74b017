import numpy as np
import pytest

from stackflow.conditioning import ControlConfig
from stackflow.denoiser import (
    Denoiser,
    DenoiserConfig,
    DenoiserError,
    dense_attention_flops,
    dense_attention_forward,
    gsa_flops,
    rbf_centers,
)
from stackflow.numerics import tensor as T
from stackflow.numerics.layers import layer_norm, linear, mlp, sinusoidal
from stackflow.spatial import Frame, Section, build_knn_graph
from stackflow.synth import SynthConfig, generate_stack

CFG = DenoiserConfig(genes=5, emb_dim=3, layers=2, hidden=16, heads=2, edge_dim=8, k=3, inducing=4, time_dim=8, pos_dim=8, rbf_bins=4, ffn_mult=2)


@pytest.fixture(scope="module")
def stack():
    return generate_stack(SynthConfig(Z=2, spots=12, G=5, D=3, R=2, seed=7)).stack


def _model(stack, cfg=CFG, seed=0):
    edges = build_knn_graph(stack.section(1), cfg.k).distances.ravel()
    return Denoiser.create(cfg, stack.frame(), edges, seed)


def test_config_checks():
    with pytest.raises(DenoiserError):
        DenoiserConfig(genes=2, emb_dim=2, hidden=10, heads=4)
    with pytest.raises(DenoiserError):
        DenoiserConfig(genes=2, emb_dim=2, inducing=-1)
    c = DenoiserConfig(genes=2, emb_dim=2, control=ControlConfig(blocks=(1,)))
    assert DenoiserConfig.from_dict(c.to_dict()) == c


def test_forward_shape_and_determinism(stack):
    m = _model(stack)
    sec = stack.section(1)
    ctx = m.context(sec)
    x = sec.expression
    a = m.forward(x, 0.3, ctx).value
    b = m.forward(x, 0.3, ctx).value
    assert a.shape == (12, 5) and np.array_equal(a, b)
    assert not np.array_equal(a, m.forward(x, 0.7, ctx).value)


def test_tokens_shape_and_time_pattern(stack):
    m = _model(stack)
    sec = stack.section(1)
    ctx = m.context(sec)
    tok = m.build_tokens(sec.expression, 0.0, ctx)
    assert tok.shape == (12, 16)
    f = sinusoidal(np.array([0.0]), 8)
    assert np.array_equal(f[0, 0::2], np.zeros(4)) and np.array_equal(f[0, 1::2], np.ones(4))
    with pytest.raises(DenoiserError):
        m.build_tokens(sec.expression[:, :4], 0.0, ctx)
    with pytest.raises(DenoiserError):
        m.build_tokens(sec.expression, 1.2, ctx)


def test_identical_spots_give_identical_tokens():
    cfg = CFG
    coords = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 1.0], [2.0, 0.0]])
    emb = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    expr = np.array([[1.0] * 5, [2.0] * 5, [2.0] * 5, [0.5] * 5])
    sec = Section(1, np.arange(4), coords, emb, expr)
    m = Denoiser.create(cfg, Frame(0, 0, 2, 1), np.array([1.0, 1.4]), 0)
    tok = m.build_tokens(expr, 0.5, m.context(sec)).value
    assert np.array_equal(tok[1], tok[2])


def test_missing_control_is_an_error(stack):
    cfg = DenoiserConfig(**{**CFG.__dict__, "control": ControlConfig(grid=4, channels=2, token_dim=4), "rank": 3})
    m = _model(stack, cfg)
    with pytest.raises(DenoiserError):
        m.forward(stack.section(1).expression, 0.5, m.context(stack.section(1)))


def test_gsa_permutation_equivariant(stack):
    m = _model(stack)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 16))
    perm = rng.permutation(12)
    a = m.gsa(T.constant(x), 0).value
    b = m.gsa(T.constant(x[perm]), 0).value
    assert np.allclose(a[perm], b, atol=1e-12)


def test_gsa_disabled_is_identity(stack):
    cfg = DenoiserConfig(**{**CFG.__dict__, "inducing": 0})
    m = _model(stack, cfg)
    x = T.constant(np.random.default_rng(0).normal(size=(12, 16)))
    assert m.gsa(x, 0) is x
    assert not any("gsa" in k for k in m.store)


def test_local_attention_self_only_when_isolated():
    m = Denoiser.create(CFG, Frame(0, 0, 1, 1), np.array([0.5]), 0)
    sec = Section(1, [0], [[0.5, 0.5]], [[1.0, 0, 0]], [[1.0] * 5])
    ctx = m.context(sec)
    assert ctx.neighbors.tolist() == [[0]]
    x = T.constant(np.random.default_rng(0).normal(size=(1, 16)))
    v = linear(x, m.store, "block0.attn.v")
    want = linear(v, m.store, "block0.attn.o").value
    assert np.allclose(m.local_attention(x, ctx, 0).value, want, atol=1e-12)


def test_rbf_centres_increase():
    c = rbf_centers(np.array([1.0, 1.0, 1.0]), 4)
    assert np.all(np.diff(c) > 0) and c[0] == 0.0


def test_flop_count_linear_in_spots():
    for n in (500, 2000, 4000):
        r = gsa_flops(2 * n, 16, 128) / gsa_flops(n, 16, 128)
        assert 1.9 <= r <= 2.1
    assert dense_attention_flops(8000, 128) / dense_attention_flops(4000, 128) > 2.5
    assert gsa_flops(100, 0, 128) == 0


def test_flop_count_matches_hand_tally():
    n, m, d, f = 10, 3, 4, 2
    read = m * d * d + n * d * d + n * d * d + m * n * d + m * n * d + m * d * d
    write = n * d * d + m * d * d + m * d * d + n * m * d + n * m * d + n * d * d
    ff = n * d * (f * d) + n * (f * d) * d
    assert gsa_flops(n, m, d, f) == read + write + ff


def test_dense_reference_matches_tape_ops(stack):
    m = _model(stack)
    x = np.random.default_rng(3).normal(size=(20, 16))
    s, p = m.store, "block0.gsa"
    xn = T.constant(x)
    kv = layer_norm(xn, s, f"{p}.read.ln_kv")
    q = linear(layer_norm(xn, s, f"{p}.read.ln_q"), s, f"{p}.read.q")
    att = T.multi_head_attention(q, linear(kv, s, f"{p}.read.k"), linear(kv, s, f"{p}.read.v"), 2)
    y = T.add(xn, linear(att, s, f"{p}.read.o"))
    ref = T.add(y, mlp(layer_norm(y, s, f"{p}.ln_ff"), s, f"{p}.ff", 2)).value
    out = dense_attention_forward(x, s, p, heads=2, chunk=7)
    assert np.allclose(out, ref, atol=1e-10)


def test_records_round_trip(stack):
    m = _model(stack)
    other = _model(stack, seed=5)
    other.load_records(m.records())
    sec = stack.section(1)
    assert np.array_equal(other.forward(sec.expression, 0.4, other.context(sec)).value, m.forward(sec.expression, 0.4, m.context(sec)).value)
