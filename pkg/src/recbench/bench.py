"""Run manifests, the on-disk run store, grid plans and relative-gain reports."""
from __future__ import annotations

import configparser
import hashlib
import itertools
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .context import EvalContext, TrainConfig
from .data import Split, holdout_split, load_dataset
from .errors import ContextViolationError, InvariantError, MissingBaselineError, UsageError
from .evaluation import EvalRequest, evaluate
from .metrics import RunRecord, format_percent, grmf_x
from .models.params import save_checkpoint
from .models.train import DISPLAY_NAMES, ModelKind, check_compatible, fit

_logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "recbench.run-manifest/1"
DEFAULT_HOLDOUT = 0.05
_COLUMN_ORDER = [ModelKind.MF, ModelKind.ULTRAGCN, ModelKind.LIGHTGCN]


def _digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()


def point_id(dataset: str, model_kind, ctx: EvalContext, cfg: TrainConfig, holdout) -> str:
    """Content hash identifying one grid point; names its manifest in the store."""
    return _digest(
        {
            "dataset": dataset,
            "model_kind": ModelKind(model_kind).value,
            "ctx": ctx.fingerprint(),
            "train_config": cfg.to_dict(),
            "holdout": holdout,
        }
    )


@dataclass
class RunManifest:
    record: RunRecord
    train_config: TrainConfig
    model_kind: ModelKind
    dataset: str
    seed: int
    validation: RunRecord | None = None
    holdout: dict | None = None
    toolkit_version: str = __version__
    timestamp: str = ""
    loss_trace: str | None = None
    checkpoint: str | None = None
    epochs_run: int | None = None
    best_epoch: int | None = None

    def __post_init__(self):
        self.model_kind = ModelKind(self.model_kind)
        for rec in (self.record, self.validation):
            if rec is None:
                continue
            if rec.ctx is None:
                raise InvariantError("manifest records must carry their context")
            if rec.ctx.fingerprint() != rec.ctx_fingerprint:
                raise InvariantError("manifest fingerprint does not match its context fields")
        if self.validation is not None and self.validation.ctx_fingerprint != self.record.ctx_fingerprint:
            raise InvariantError("validation and test records disagree on context")

    @property
    def ctx(self) -> EvalContext:
        return self.record.ctx

    @property
    def fingerprint(self) -> str:
        return self.record.ctx_fingerprint

    @property
    def point_id(self) -> str:
        return point_id(self.dataset, self.model_kind, self.ctx, self.train_config, self.holdout)

    def selection_score(self, metric_id: str = "ndcg") -> float:
        """Validation score at the largest cutoff, or the test score without a holdout."""
        rec = self.validation if self.validation is not None else self.record
        return rec.get(metric_id, self.ctx.max_k)

    def to_dict(self) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "dataset": self.dataset,
            "model_kind": self.model_kind.value,
            "record": self.record.to_dict(),
            "validation": None if self.validation is None else self.validation.to_dict(),
            "train_config": self.train_config.to_dict(),
            "holdout": self.holdout,
            "seed": self.seed,
            "toolkit_version": self.toolkit_version,
            "timestamp": self.timestamp,
            "loss_trace": self.loss_trace,
            "checkpoint": self.checkpoint,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        if d.get("schema") != MANIFEST_SCHEMA:
            raise InvariantError(f"unknown manifest schema {d.get('schema')!r}")
        return cls(
            record=RunRecord.from_dict(d["record"]),
            validation=None if d.get("validation") is None else RunRecord.from_dict(d["validation"]),
            train_config=TrainConfig.from_dict(d["train_config"]),
            model_kind=d["model_kind"],
            dataset=d["dataset"],
            seed=int(d["seed"]),
            holdout=d.get("holdout"),
            toolkit_version=d.get("toolkit_version", ""),
            timestamp=d.get("timestamp", ""),
            loss_trace=d.get("loss_trace"),
            checkpoint=d.get("checkpoint"),
            epochs_run=d.get("epochs_run"),
            best_epoch=d.get("best_epoch"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunStore:
    """Directory of manifests named by grid-point hash.

    Writes go through a temp file and an atomic rename, so concurrent writers
    and readers never observe partial manifests.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.manifest_dir = self.root / "manifests"
        self.artifact_dir = self.root / "artifacts"

    def manifest_path(self, pid: str) -> Path:
        return self.manifest_dir / f"{pid}.json"

    def has(self, pid: str) -> bool:
        return self.manifest_path(pid).exists()

    def put(self, manifest: RunManifest) -> Path:
        path = self.manifest_path(manifest.point_id)
        atomic_write_text(path, manifest.to_json())
        return path

    def manifests(self) -> list[RunManifest]:
        if not self.manifest_dir.exists():
            return []
        names = sorted(p for p in os.listdir(self.manifest_dir) if p.endswith(".json"))
        return [RunManifest.load(self.manifest_dir / n) for n in names]

    def write_representatives(self, reps: dict) -> None:
        atomic_write_text(self.root / "representatives.json", json.dumps(reps, indent=2, sort_keys=True) + "\n")


def representatives(manifests, metric_id: str = "ndcg") -> dict:
    """Best run per (dataset, fingerprint, model kind) by selection score.

    Ties go to the lexicographically smallest point id.
    """
    best: dict = {}
    for m in manifests:
        key = (m.dataset, m.fingerprint, m.model_kind)
        cur = best.get(key)
        if cur is None or (-m.selection_score(metric_id), m.point_id) < (-cur.selection_score(metric_id), cur.point_id):
            best[key] = m
    return best


# ------------------------------------------------------------------ training


def run_point(
    split: Split,
    dataset: str,
    ctx: EvalContext,
    model_kind,
    cfg: TrainConfig,
    out_dir,
    holdout: dict | None = None,
    patience: int | None = None,
    eval_every: int = 1,
    eval_batch_size: int = 1024,
) -> RunManifest:
    """Train one configuration, evaluate it and write checkpoint + loss trace.

    With ``holdout`` (``{"fraction": f, "seed": s}``) the model is fit on the
    remaining training positives, validated on the held-out ones, and tested
    against the full training mask.
    """
    model_kind = ModelKind(model_kind)
    check_compatible(model_kind, ctx)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / "loss_trace.csv"
    if trace_path.exists():
        trace_path.unlink()
    kmax = ctx.max_k

    fit_split = split if holdout is None else holdout_split(split.train, holdout["fraction"], holdout["seed"])

    def validate(p):
        return evaluate(EvalRequest(p, fit_split, ctx, eval_batch_size)).get("ndcg", kmax)

    result = fit(
        model_kind,
        fit_split.train,
        ctx,
        cfg,
        validate=validate if holdout is not None else None,
        eval_every=eval_every,
        patience=patience,
        trace_path=trace_path,
    )
    hyper = {"learning_rate": cfg.learning_rate, "l2_coefficient": cfg.l2_coefficient}
    if model_kind is ModelKind.LIGHTGCN:
        hyper["lightgcn_layers"] = cfg.lightgcn_layers
    if model_kind is ModelKind.ULTRAGCN:
        hyper["ultragcn_gamma"] = cfg.ultragcn_gamma
    model_id = DISPLAY_NAMES[model_kind]
    valid_rec = None
    if holdout is not None:
        valid_rec = evaluate(EvalRequest(result.scoring, fit_split, ctx, eval_batch_size, model_id=model_id, hyper_point=hyper))
    test_rec = evaluate(EvalRequest(result.scoring, split, ctx, eval_batch_size, model_id=model_id, hyper_point=hyper))
    ckpt = out_dir / "checkpoint.bin"
    save_checkpoint(ckpt, result.params, model_kind.value, cfg.lightgcn_layers if model_kind is ModelKind.LIGHTGCN else 0)
    return RunManifest(
        record=test_rec,
        validation=valid_rec,
        train_config=cfg,
        model_kind=model_kind,
        dataset=dataset,
        seed=cfg.seed,
        holdout=holdout,
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        loss_trace=str(trace_path),
        checkpoint=str(ckpt),
        epochs_run=result.epochs_run,
        best_epoch=result.best_epoch,
    )


# ---------------------------------------------------------------------- plans

_CONTEXT_KEYS = {"dataset", "loss", "negatives", "dim", "sampler", "k"}
_TUNABLE_KEYS = {
    "lr": ("learning_rate", float),
    "l2": ("l2_coefficient", float),
    "batch_size": ("batch_size", int),
    "epochs": ("epochs", int),
    "seed": ("seed", int),
    "layers": ("lightgcn_layers", int),
    "gamma": ("ultragcn_gamma", float),
}
_PLAN_KEYS = {"validation_fraction", "holdout_seed", "patience", "eval_every"}


@dataclass
class BenchPlan:
    """One dataset, one evaluation context, several models with tuning grids."""

    dataset: str
    ctx: EvalContext
    models: list = field(default_factory=list)  # [(ModelKind, [TrainConfig, ...])]
    holdout: dict = field(default_factory=lambda: {"fraction": DEFAULT_HOLDOUT, "seed": 0})
    patience: int | None = None
    eval_every: int = 1


def _split_values(raw: str) -> list[str]:
    return [v.strip() for v in raw.split(",") if v.strip()]


def parse_plan(text: str) -> BenchPlan:
    """Parse an INI plan: a ``[plan]`` section fixing the context, optional
    ``[defaults]`` tunables, and one ``[model <kind>]`` section per model whose
    comma-separated values expand into a grid."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise UsageError(f"malformed plan file: {exc}") from exc
    if not cp.has_section("plan"):
        raise UsageError("plan file needs a [plan] section")
    plan = dict(cp["plan"])
    unknown = set(plan) - _CONTEXT_KEYS - _PLAN_KEYS
    if unknown:
        raise UsageError(f"unknown [plan] keys: {sorted(unknown)}")
    for key in _CONTEXT_KEYS - {"k"}:
        if key in plan and len(_split_values(plan[key])) != 1:
            raise UsageError(f"[plan] {key} must be a single value; a plan has exactly one context")
    if "dataset" not in plan:
        raise UsageError("[plan] needs a dataset")
    try:
        ctx = EvalContext(
            dataset_id=plan["dataset"].strip(),
            loss_kind=plan.get("loss", "bpr").strip().lower(),
            num_negatives=int(plan.get("negatives", 1)),
            embedding_dim=int(plan.get("dim", 64)),
            sampler_kind=plan.get("sampler", "uniform_reject").strip().lower(),
            k_list=tuple(int(k) for k in _split_values(plan.get("k", "20"))),
        )
    except (ValueError, InvariantError) as exc:
        raise UsageError(f"invalid context in [plan]: {exc}") from exc
    holdout = {
        "fraction": float(plan.get("validation_fraction", DEFAULT_HOLDOUT)),
        "seed": int(plan.get("holdout_seed", 0)),
    }
    defaults = dict(cp["defaults"]) if cp.has_section("defaults") else {}
    models = []
    for section in cp.sections():
        if section in ("plan", "defaults"):
            continue
        head, _, kind = section.partition(" ")
        if head != "model" or not kind:
            raise UsageError(f"unexpected section [{section}]")
        try:
            kind = ModelKind(kind.strip().lower())
        except ValueError:
            raise UsageError(f"unknown model kind {kind!r}") from None
        entries = {**defaults, **dict(cp[section])}
        ctx_keys = _CONTEXT_KEYS & set(cp[section])
        if ctx_keys:
            raise UsageError(
                f"[{section}] sets context keys {sorted(ctx_keys)}; every model in a plan shares the [plan] context"
            )
        bad = set(entries) - set(_TUNABLE_KEYS)
        if bad:
            raise UsageError(f"[{section}] unknown keys: {sorted(bad)}")
        if kind is not ModelKind.LIGHTGCN and "layers" in cp[section]:
            raise UsageError(f"[{section}] layers only applies to lightgcn")
        if kind is not ModelKind.ULTRAGCN and "gamma" in cp[section]:
            raise UsageError(f"[{section}] gamma only applies to ultragcn")
        try:
            check_compatible(kind, ctx)
        except UsageError as exc:
            raise UsageError(f"[{section}]: {exc}") from None
        axes = [(_TUNABLE_KEYS[k][0], [_TUNABLE_KEYS[k][1](v) for v in _split_values(raw)]) for k, raw in sorted(entries.items())]
        grid = []
        for combo in itertools.product(*[vals for _, vals in axes]):
            try:
                grid.append(TrainConfig(**{name: v for (name, _), v in zip(axes, combo)}))
            except InvariantError as exc:
                raise UsageError(f"[{section}]: {exc}") from None
        models.append((kind, grid))
    if not models:
        raise UsageError("plan defines no [model ...] sections")
    return BenchPlan(
        dataset=ctx.dataset_id,
        ctx=ctx,
        models=models,
        holdout=holdout,
        patience=int(plan["patience"]) if "patience" in plan else None,
        eval_every=int(plan.get("eval_every", 1)),
    )


def run_plan(plan: BenchPlan, store: RunStore, split: Split | None = None, source=None) -> dict:
    """Execute every grid point not already in the store; mark representatives.

    Returns ``{model_kind: representative manifest}`` for this plan's context.
    """
    if split is None:
        split = load_dataset(plan.dataset, source=source)
    for kind, grid in plan.models:
        for cfg in grid:
            pid = point_id(plan.dataset, kind, plan.ctx, cfg, plan.holdout)
            if store.has(pid):
                _logger.info("skip %s %s (done)", kind.value, pid)
                continue
            _logger.info("run %s %s", kind.value, pid)
            manifest = run_point(
                split,
                plan.dataset,
                plan.ctx,
                kind,
                cfg,
                store.artifact_dir / pid,
                holdout=plan.holdout,
                patience=plan.patience,
                eval_every=plan.eval_every,
            )
            store.put(manifest)
    reps = representatives(store.manifests())
    index = {
        f"{ds}/{fp}/{kind.value}": m.point_id for (ds, fp, kind), m in sorted(reps.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2].value))
    }
    store.write_representatives(index)
    fp = plan.ctx.fingerprint()
    return {kind: m for (ds, f, kind), m in reps.items() if ds == plan.dataset and f == fp}


# -------------------------------------------------------------------- reports


@dataclass
class ReportTable:
    dataset: str
    ctx: EvalContext | None
    fingerprint: str
    metric_id: str
    k: int
    columns: list  # display names, MF first
    scores: list
    gains: list  # ratios

    @property
    def metric_label(self) -> str:
        return {"ndcg": "NDCG", "recall": "Recall", "precision": "Precision"}.get(self.metric_id, self.metric_id) + f"@{self.k}"

    def to_markdown(self) -> str:
        lines = []
        if self.ctx is not None:
            c = self.ctx
            lines.append(
                f"Context `{self.fingerprint}`: loss={c.loss_kind.value}, negatives={c.num_negatives}, "
                f"dim={c.embedding_dim}, sampler={c.sampler_kind.value}, K={list(c.k_list)}"
            )
            lines.append("")
        lines.append("| Datasets | Metrics | " + " | ".join(self.columns) + " |")
        lines.append("|" + "---|" * (len(self.columns) + 2))
        lines.append(f"| {self.dataset} | {self.metric_label} | " + " | ".join(f"{s:.4f}" for s in self.scores) + " |")
        lines.append("|  | GRMF-X(%) | " + " | ".join(format_percent(g) for g in self.gains) + " |")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "ctx": None if self.ctx is None else self.ctx.to_dict(),
            "ctx_fingerprint": self.fingerprint,
            "metric": self.metric_id,
            "k": self.k,
            "columns": self.columns,
            "rows": {
                self.metric_label: dict(zip(self.columns, self.scores)),
                "GRMF-X": dict(zip(self.columns, self.gains)),
                "GRMF-X(%)": dict(zip(self.columns, [format_percent(g) for g in self.gains])),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _column_key(kind: ModelKind):
    return (_COLUMN_ORDER.index(kind) if kind in _COLUMN_ORDER else len(_COLUMN_ORDER), kind.value)


def build_report(manifests, dataset: str, metric_id: str = "ndcg", k: int = 20, fingerprint: str | None = None) -> ReportTable:
    """Relative-gain table for one dataset and one context.

    Refuses to mix contexts: when the store holds several fingerprints for the
    dataset, one must be chosen (a unique prefix is enough).
    """
    runs = [m for m in manifests if m.dataset == dataset]
    if not runs:
        raise MissingBaselineError(f"no runs for dataset {dataset!r} in the store")
    fps = sorted({m.fingerprint for m in runs})
    if fingerprint is not None:
        chosen = [f for f in fps if f.startswith(fingerprint)]
        if len(chosen) != 1:
            raise ContextViolationError(f"context selector {fingerprint!r} matches {len(chosen)} of {fps}")
        fps = chosen
    if len(fps) > 1:
        described = "; ".join(
            f"{fp} ({next(m for m in runs if m.fingerprint == fp).ctx.canonical()})" for fp in fps
        )
        raise ContextViolationError(
            f"store holds {len(fps)} contexts for {dataset}; select one with --context: {described}"
        )
    fp = fps[0]
    reps = {kind: m for (ds, f, kind), m in representatives(runs, metric_id).items() if f == fp}
    ctx = next(iter(reps.values())).ctx
    if ModelKind.MF not in reps:
        raise MissingBaselineError(
            f"no MF run for {dataset} under context {fp} ({ctx.canonical()}); "
            "a tuned MF run in the same context is required as the baseline"
        )
    base = reps[ModelKind.MF].record
    kinds = sorted(reps, key=_column_key)
    return ReportTable(
        dataset=dataset,
        ctx=ctx,
        fingerprint=fp,
        metric_id=metric_id,
        k=k,
        columns=[DISPLAY_NAMES.get(kind, kind.value) for kind in kinds],
        scores=[reps[kind].record.get(metric_id, k) for kind in kinds],
        gains=[grmf_x(reps[kind].record, base, metric_id, k) for kind in kinds],
    )
