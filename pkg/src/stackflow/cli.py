"""``stackflow`` command line: synthetic data, training phases, inference,
scoring and diagnostics."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import checks, pipeline
from .config import ABLATIONS, RunConfig
from .evaluation import make_split
from .numerics import checkpoint
from .priors import PRIOR_KINDS, PriorNet
from .spatial import load_stack, save_stack

log = logging.getLogger("stackflow")

EXIT_OK, EXIT_INTERNAL, EXIT_INVALID = 0, 1, 2


def _common(p: argparse.ArgumentParser, out: bool = True, stack: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file of flat key/value settings")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--seed", type=int, required=True, help="master seed (mandatory)")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), help="apply a preset regime")
    p.add_argument("--prior", choices=PRIOR_KINDS, help="start distribution (sets prior.kind)")
    p.add_argument("--split", choices=["even", "single"], help="hold-out protocol (sets split.kind)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    if stack:
        p.add_argument("--stack", type=Path, required=True, help="stack directory")
    if out:
        p.add_argument("--out", type=Path, required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stackflow", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("gen", help="write a synthetic stack"), stack=False)
    _common(sub.add_parser("split", help="write the section roles of a hold-out protocol"))
    p = sub.add_parser("pretrain-prior", help="fit and freeze the learned ZINB start")
    _common(p)
    p = sub.add_parser("train", help="flow-matching training (fits the prior first if needed)")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="frozen prior checkpoint to reuse")
    p = sub.add_parser("infer", help="predict held-out sections")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p = sub.add_parser("eval", help="score pred_z*.bin files against stored expression")
    _common(p)
    p.add_argument("--pred", type=Path, required=True, help="directory of pred_z*.bin files")
    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the denoiser")
    _common(p, out=False, stack=False)
    p.add_argument("--entries", type=int, default=4, help="probed entries per denoiser tensor")
    p.add_argument("--out", type=Path)
    p = sub.add_parser("bench-gsa", help="inducing-point attention scaling measurement")
    _common(p, stack=False)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--repeats", type=int, default=5)
    return ap


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.ablation:
        cfg = cfg.with_ablation(args.ablation)
    direct = {}
    if args.prior:
        direct["prior.kind"] = args.prior
    if args.split:
        direct["split.kind"] = args.split
    if direct:
        cfg = cfg.with_overrides(direct)
    if args.set:
        cfg = cfg.with_overrides(RunConfig.parse_set(args.set))
    return cfg


def _jsonl(path: Path, rows: list[dict]) -> None:
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def cmd_gen(args, cfg):
    syn = pipeline.generate(cfg, args.seed)
    save_stack(syn.stack, args.out, extra={"regions": syn.config.R, "seed": args.seed})
    print(f"wrote {syn.stack.Z} sections x {len(syn.stack.sections[0])} spots to {args.out}")
    return {}


def cmd_split(args, cfg):
    stack = load_stack(args.stack)
    split = make_split(stack.Z, cfg["split.kind"], args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "split.json").write_text(split.to_json() + "\n")
    print(split.to_json())
    return {"split": split.roles}


def cmd_pretrain(args, cfg):
    stack = load_stack(args.stack)
    split = make_split(stack.Z, cfg["split.kind"], args.seed)
    net, plog = pipeline.run_pretrain(cfg, pipeline.training_view(stack, split), split, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    records = net.records()
    records.update(pipeline.config_records(cfg))
    checkpoint.save(args.out / "prior.htfm", records)
    _jsonl(args.out / "pretrain_log.jsonl", plog.epochs)
    print(f"best epoch {plog.best_epoch} val nll {plog.epochs[plog.best_epoch]['val_nll']:.6f}")
    return {"prior_fingerprint": net.fingerprint(), "best_epoch": plog.best_epoch}


def cmd_train(args, cfg):
    stack = load_stack(args.stack)
    split = make_split(stack.Z, cfg["split.kind"], args.seed)
    prior = None
    if args.checkpoint is not None:
        prior = PriorNet.from_records(checkpoint.load(args.checkpoint))
        if not prior.frozen:
            raise pipeline.PipelineError("prior checkpoint is not frozen")
    trained = pipeline.run_train(cfg, stack, split, args.seed, prior)
    args.out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(args.out / "model.htfm", trained.records())
    (args.out / "train_log.jsonl").write_text(trained.train_log.lines())
    if trained.pretrain_log is not None:
        _jsonl(args.out / "pretrain_log.jsonl", trained.pretrain_log.epochs)
    last = trained.train_log.records[-1]
    print(f"epochs {last['epoch']} best {trained.train_log.best_epoch} val {last['val_loss']}")
    return {"best_epoch": trained.train_log.best_epoch, "prior_fingerprints": trained.prior_fingerprints}


def cmd_infer(args, cfg):
    stack = load_stack(args.stack)
    trained = pipeline.load_trained(checkpoint.load(args.checkpoint))
    # the checkpoint's configuration governs the model; the split comes from the command
    split = make_split(stack.Z, cfg["split.kind"], args.seed)
    preds = pipeline.run_infer(trained, stack, split, args.seed, args.threads)
    paths = pipeline.save_predictions(args.out, preds)
    print("\n".join(str(p) for p in paths))
    fp = trained.prior.fingerprint() if trained.prior is not None else None
    return {"checkpoint_config_hash": trained.cfg.hash(), "prior_fingerprint": fp, "sections": sorted(preds)}


def cmd_eval(args, cfg):
    stack = load_stack(args.stack)
    split = make_split(stack.Z, cfg["split.kind"], args.seed)
    report = pipeline.run_eval(pipeline.load_predictions(args.pred), stack, split, cfg["eval.hvg"])
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return {"metrics": report.to_dict()}


def cmd_gradcheck(args, cfg):
    dcfg = cfg.denoiser(checks.TOY_MODEL.genes, checks.TOY_MODEL.emb_dim)
    cases = checks.primitive_cases(args.seed) + [checks.denoiser_case(dcfg, args.seed, max_entries=args.entries)]
    rep = checks.run_suite(cases, seed=args.seed)
    for line in rep.lines():
        print(line)
    print(f"seconds: {rep.seconds:.1f}")
    if rep.worst >= 1e-4:
        raise RuntimeError(f"gradient check failed: {rep.worst:.3e} >= 1e-4")
    return {"gradcheck": rep.results}


def cmd_bench(args, cfg):
    b = pipeline.bench_gsa(n=args.n, m=cfg["model.inducing"], d=cfg["model.hidden"], heads=cfg["model.heads"], ffn_mult=cfg["model.ffn_mult"], repeats=args.repeats, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "bench_gsa.json").write_text(json.dumps(b.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(b.to_dict(), sort_keys=True))
    return {"bench": b.to_dict()}


COMMANDS = {
    "gen": cmd_gen,
    "split": cmd_split,
    "pretrain-prior": cmd_pretrain,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "bench-gsa": cmd_bench,
}


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(args)
        extra = COMMANDS[args.command](args, cfg)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - report and map to the internal-error status
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    out = getattr(args, "out", None)
    if out is not None:
        pipeline.append_manifest(out, args.command, cfg, args.seed, time.perf_counter() - t0, extra)
    return EXIT_OK


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
