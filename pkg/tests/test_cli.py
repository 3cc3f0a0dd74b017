import json

import pytest

from stackflow.cli import run_command
from stackflow.spatial import load_stack, write_matrix

TINY = [
    "--set", "synth.Z=3", "--set", "synth.spots=16", "--set", "synth.G=6", "--set", "synth.D=4", "--set", "synth.R=2",
    "--set", "model.layers=1", "--set", "model.hidden=8", "--set", "model.heads=2", "--set", "model.edge_dim=4",
    "--set", "model.k=4", "--set", "model.inducing=2", "--set", "model.time_dim=4", "--set", "model.pos_dim=4",
    "--set", "model.rbf_bins=4", "--set", "model.ffn_mult=1", "--set", "control.grid=4", "--set", "control.channels=2",
    "--set", "control.token_dim=4", "--set", "adjacent.k=2", "--set", "proj.rank=3", "--set", "train.epochs=2",
    "--set", "prior.epochs=2", "--set", "prior.hidden=4", "--set", "infer.steps=2",
]


@pytest.fixture(scope="module")
def stack_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("stack")
    assert run_command(["gen", "--seed", "0", "--out", str(d), *TINY]) == 0
    return d


def test_gen_writes_manifest(stack_dir):
    rows = [json.loads(line) for line in (stack_dir / "manifest.jsonl").read_text().splitlines()]
    assert rows[-1]["command"] == "gen" and rows[-1]["seed"] == 0
    assert {"config_hash", "git", "wall_seconds"} <= set(rows[-1])
    assert load_stack(stack_dir).Z == 3


def test_validation_errors_exit_2(stack_dir, tmp_path):
    assert run_command(["gen", "--out", str(tmp_path)]) == 2
    assert run_command(["gen", "--seed", "0", "--out", str(tmp_path), "--set", "bogus.key=1"]) == 2
    assert run_command(["eval", "--seed", "0", "--stack", str(tmp_path / "none"), "--out", str(tmp_path), "--pred", str(tmp_path)]) == 2
    assert run_command(["frobnicate"]) == 2


def test_train_is_byte_reproducible_and_infer_runs(stack_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run_command(["train", "--seed", "1", "--stack", str(stack_dir), "--out", str(d), *TINY]) == 0
    assert (a / "model.htfm").read_bytes() == (b / "model.htfm").read_bytes()
    p1, p2 = tmp_path / "p1", tmp_path / "p2"
    assert run_command(["infer", "--seed", "1", "--stack", str(stack_dir), "--checkpoint", str(a / "model.htfm"), "--out", str(p1), *TINY]) == 0
    assert run_command(["infer", "--seed", "1", "--threads", "2", "--stack", str(stack_dir), "--checkpoint", str(b / "model.htfm"), "--out", str(p2), *TINY]) == 0
    assert (p1 / "pred_z2.bin").read_bytes() == (p2 / "pred_z2.bin").read_bytes()
    assert run_command(["eval", "--seed", "1", "--stack", str(stack_dir), "--pred", str(p1), "--out", str(tmp_path / "e"), *TINY]) == 0
    assert "pcc_gene" in (tmp_path / "e" / "metrics.txt").read_text()


def test_eval_on_truth_reports_perfect_pcc(stack_dir, tmp_path, capsys):
    st = load_stack(stack_dir)
    write_matrix(tmp_path / "pred_z2.bin", st.section(2).expression)
    assert run_command(["eval", "--seed", "0", "--stack", str(stack_dir), "--pred", str(tmp_path), "--out", str(tmp_path / "e"), *TINY]) == 0
    text = (tmp_path / "e" / "metrics.txt").read_text()
    vals = dict(line.split(": ") for line in text.splitlines())
    assert float(vals["pcc_spot"]) == pytest.approx(1.0) and float(vals["pcc_gene"]) == pytest.approx(1.0)
    assert float(vals["mse"]) == 0.0


def test_pretrain_then_train_with_prior(stack_dir, tmp_path):
    assert run_command(["pretrain-prior", "--seed", "0", "--stack", str(stack_dir), "--out", str(tmp_path / "p"), *TINY]) == 0
    assert run_command(["train", "--seed", "0", "--stack", str(stack_dir), "--checkpoint", str(tmp_path / "p" / "prior.htfm"), "--out", str(tmp_path / "t"), *TINY]) == 0
    assert run_command(["split", "--seed", "0", "--split", "single", "--stack", str(stack_dir), "--out", str(tmp_path / "s")]) == 0
    roles = json.loads((tmp_path / "s" / "split.json").read_text())["roles"]
    assert list(roles.values()).count("train") == 1


def test_ablation_flag_runs(stack_dir, tmp_path):
    assert run_command(["train", "--seed", "0", "--ablation", "vanilla", "--stack", str(stack_dir), "--out", str(tmp_path), *TINY]) == 0


@pytest.mark.slow
def test_gradcheck_default_config(capsys):
    assert run_command(["gradcheck", "--seed", "0", "--entries", "2"]) == 0
    line = [x for x in capsys.readouterr().out.splitlines() if x.startswith("max relative error")][0]
    assert float(line.split(": ")[1]) < 1e-4
