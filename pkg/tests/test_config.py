import json

import pytest

from stackflow.config import ABLATIONS, DEFAULTS, ConfigError, RunConfig


def test_defaults_are_valid_and_hash_is_stable():
    a = RunConfig()
    b = RunConfig(dict(reversed(list(DEFAULTS.items()))))
    assert a.hash() == b.hash() and len(a.hash()) == 64
    assert a.with_overrides({"train.lr": 1e-3}).hash() != a.hash()


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        RunConfig({"model.widht": 3})
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({"nope": 1})


def test_string_overrides_are_coerced():
    cfg = RunConfig().with_overrides(RunConfig.parse_set(["model.layers=2", "control.enabled=false", "train.lr=0.01", "prior.kind=fixed-zinb"]))
    assert cfg["model.layers"] == 2 and cfg["control.enabled"] is False and cfg["train.lr"] == 0.01
    for bad in (["model.layers=2.5"], ["control.enabled=maybe"], ["prior.kind=gaussian"], ["model.hidden=130"]):
        with pytest.raises(ConfigError):
            RunConfig().with_overrides(RunConfig.parse_set(bad))
    with pytest.raises(ConfigError):
        RunConfig.parse_set(["novalue"])


def test_ablation_presets():
    van = RunConfig().with_ablation("vanilla")
    assert van.control() is None and van["model.inducing"] == 0 and van["prior.kind"] == "fixed-zinb"
    full = RunConfig().with_ablation("full")
    assert full.control() is not None and full["adjacent.enabled"]
    assert set(ABLATIONS) == {"vanilla", "prior", "prior+control", "full"}
    with pytest.raises(ConfigError):
        RunConfig().with_ablation("bogus")


def test_blocks_parsing():
    assert RunConfig().blocks() is None
    assert RunConfig({"control.blocks": "2,0"}).blocks() == (0, 2)
    with pytest.raises(ConfigError):
        RunConfig({"control.blocks": "9"})


def test_load_and_dump(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"train.epochs": 3}))
    cfg = RunConfig.load(p)
    assert cfg["train.epochs"] == 3
    assert RunConfig.from_mapping(json.loads(cfg.dump())).hash() == cfg.hash()
    p.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_typed_views():
    cfg = RunConfig()
    d = cfg.denoiser(genes=10, emb_dim=4)
    assert d.rank == 10 and d.hidden == 128 and d.k == 8 and d.layers == 4
    assert cfg.train().lr == 5e-4 and cfg.train().batch == 2
    f = cfg.fixed_zinb()
    assert (f.total_count, f.logits, f.zi_logits) == (1.0, 0.1, 0.0)
    assert cfg.synth(7).seed == 7
