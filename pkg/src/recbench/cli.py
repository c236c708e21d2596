"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bench import RunManifest, RunStore, atomic_write_text, build_report, parse_plan, run_plan, run_point
from .context import EvalContext, LossKind, SamplerKind, TrainConfig
from .data import (
    CACHE_ENV_VAR,
    KNOWN_DATASETS,
    Split,
    get_descriptor,
    holdout_split,
    is_prepared,
    load_dataset,
    parse_synthetic_name,
    prepare,
    stats,
)
from .errors import InvariantError, RecbenchError, UsageError
from .evaluation import EvalRequest, evaluate
from .models.params import load_checkpoint
from .models.train import ModelKind, scoring_params

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _check_dataset_name(name: str) -> None:
    if name not in KNOWN_DATASETS and parse_synthetic_name(name) is None:
        raise UsageError(
            f"unknown dataset {name!r}; known: {', '.join(KNOWN_DATASETS)} or synthetic:<U>x<I>:rank<r>:seed<s>"
        )


def cmd_dataset(args) -> int:
    _check_dataset_name(args.name)
    cache_root = Path(args.cache_root) if args.cache_root else None
    if args.action == "fetch":
        if parse_synthetic_name(args.name):
            print(f"{args.name}: synthetic datasets are generated on demand")
            return EXIT_OK
        desc = get_descriptor(args.name, source=args.source, cache_root=cache_root)
        if is_prepared(desc):
            print(f"{args.name}: cached at {desc.processed_path}")
            return EXIT_OK
        prepare(desc)
        print(f"{args.name}: prepared at {desc.processed_path}")
        return EXIT_OK
    split = load_dataset(args.name, source=args.source, cache_root=cache_root)
    st = stats(split, train_only=args.train_only)
    row = st.as_row()
    print("| Dataset | " + " | ".join(row) + " |")
    print("|---|" + "---|" * len(row))
    print(f"| {args.name} | " + " | ".join(row.values()) + " |")
    if args.train_only:
        print("(interactions counted over the training split only)")
    return EXIT_OK


def _context_from_args(args) -> EvalContext:
    try:
        return EvalContext(
            dataset_id=args.dataset,
            loss_kind=args.loss,
            num_negatives=args.negatives,
            embedding_dim=args.dim,
            sampler_kind=args.sampler,
            k_list=tuple(sorted(set(args.k or [20]))),
        )
    except InvariantError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    _check_dataset_name(args.dataset)
    kind = ModelKind(args.model)
    if args.layers is not None and kind is not ModelKind.LIGHTGCN:
        raise UsageError("--layers only applies to --model lightgcn")
    if args.gamma is not None and kind is not ModelKind.ULTRAGCN:
        raise UsageError("--gamma only applies to --model ultragcn")
    if kind is ModelKind.ULTRAGCN and args.loss != LossKind.BCE.value:
        raise UsageError("--model ultragcn requires --loss bce")
    ctx = _context_from_args(args)
    try:
        cfg = TrainConfig(
            learning_rate=args.lr,
            l2_coefficient=args.l2,
            batch_size=args.batch_size,
            epochs=args.epochs,
            seed=args.seed,
            lightgcn_layers=3 if args.layers is None else args.layers,
            ultragcn_gamma=1.0 if args.gamma is None else args.gamma,
        )
    except InvariantError as exc:
        raise UsageError(str(exc)) from None
    holdout = None
    if args.patience is not None or args.validation_fraction:
        holdout = {"fraction": args.validation_fraction or 0.05, "seed": args.holdout_seed}
    split = load_dataset(args.dataset, source=args.source)
    out_dir = Path(args.out_dir)
    manifest = run_point(
        split, args.dataset, ctx, kind, cfg, out_dir, holdout=holdout, patience=args.patience, eval_every=args.eval_every
    )
    path = out_dir / "manifest.json"
    atomic_write_text(path, manifest.to_json())
    for s in manifest.record.scores:
        print(f"{s.label}: {s.value:.6f}")
    print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest = RunManifest.load(args.manifest)
    if not manifest.checkpoint:
        raise UsageError("manifest has no checkpoint")
    params, kind, layers = load_checkpoint(args.checkpoint or manifest.checkpoint)
    split = load_dataset(manifest.dataset, source=args.source)
    train = split.train
    if manifest.holdout is not None:
        train = holdout_split(split.train, manifest.holdout["fraction"], manifest.holdout["seed"]).train
    scoring = scoring_params(kind, params, train, layers)
    req = EvalRequest(
        scoring,
        Split(split.train, split.test),
        manifest.ctx,
        batch_size=args.batch_size,
        mask_train=not args.no_mask,
        model_id=manifest.record.model_id,
        hyper_point=manifest.record.hyper_point,
    )
    record = evaluate(req)
    text = record.to_json() + "\n"
    if args.out:
        atomic_write_text(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    plan = parse_plan(Path(args.plan).read_text())
    reps = run_plan(plan, RunStore(args.store), source=args.source)
    for kind, m in sorted(reps.items(), key=lambda kv: kv[0].value):
        print(f"{kind.value}: {m.point_id} ({m.record.model_id} NDCG@{plan.ctx.max_k}={m.record.get('ndcg', plan.ctx.max_k):.4f})")
    return EXIT_OK


def cmd_report(args) -> int:
    table = build_report(RunStore(args.store).manifests(), args.dataset, args.metric, args.k, fingerprint=args.context)
    md = table.to_markdown()
    if args.out:
        atomic_write_text(Path(args.out), md)
    if args.json:
        atomic_write_text(Path(args.json), table.to_json())
    sys.stdout.write(md)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="recbench", description="Benchmark implicit-feedback recommenders.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="fetch or summarize a dataset", description=f"Cache root: ${CACHE_ENV_VAR}.")
    d.add_argument("action", choices=["fetch", "stats"])
    d.add_argument("name")
    d.add_argument("--source", help="base URL or directory holding train.txt and test.txt")
    d.add_argument("--cache-root")
    d.add_argument("--train-only", action="store_true", help="count interactions over train only")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train and evaluate one model")
    t.add_argument("--dataset", required=True)
    t.add_argument("--source")
    t.add_argument("--model", required=True, choices=[k.value for k in ModelKind])
    t.add_argument("--loss", default="bpr", choices=[k.value for k in LossKind])
    t.add_argument("--dim", type=int, default=64)
    t.add_argument("--negatives", type=int, default=1)
    t.add_argument("--sampler", default=SamplerKind.UNIFORM_REJECT.value, choices=[k.value for k in SamplerKind])
    t.add_argument("--k", type=int, action="append", help="metric cutoff (repeatable, default 20)")
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--l2", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=8192)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--layers", type=int, help="propagation layers (lightgcn only, default 3)")
    t.add_argument("--gamma", type=float, help="degree-weight strength (ultragcn only, default 1.0)")
    t.add_argument("--patience", type=int, help="early-stop after this many validations without improvement")
    t.add_argument("--eval-every", type=int, default=1)
    t.add_argument("--validation-fraction", type=float, help="hold out this share of training positives")
    t.add_argument("--holdout-seed", type=int, default=0)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="re-evaluate a trained run")
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--source")
    e.add_argument("--batch-size", type=int, default=1024)
    e.add_argument("--no-mask", action="store_true", help="rank training positives too")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run a plan file into a run store")
    b.add_argument("plan")
    b.add_argument("--store", required=True)
    b.add_argument("--source")
    b.set_defaults(func=cmd_bench)

    r = sub.add_parser("report", help="relative-gain table from a run store")
    r.add_argument("--store", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--metric", default="ndcg", choices=["ndcg", "recall", "precision"])
    r.add_argument("--k", type=int, default=20)
    r.add_argument("--context", help="context fingerprint (or unique prefix) to report on")
    r.add_argument("--json", help="also write the table as JSON here")
    r.add_argument("--out", help="also write the Markdown table here")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RecbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
