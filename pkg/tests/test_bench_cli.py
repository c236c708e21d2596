import json

import pytest

from recbench.bench import (
    RunManifest,
    RunStore,
    build_report,
    parse_plan,
    point_id,
    representatives,
    run_plan,
)
from recbench.cli import main
from recbench.context import EvalContext, TrainConfig
from recbench.data import serialize_adjacency_list, synthetic_split
from recbench.errors import ContextViolationError, InvariantError, MissingBaselineError, UsageError
from recbench.metrics import MetricScore, RunRecord
from recbench.models.train import ModelKind

SYN = "synthetic:40x60:rank3:seed1"


def manifest(kind, value, ctx, l2=1e-4, dataset="yelp2018", valid=None):
    cfg = TrainConfig(l2_coefficient=l2)
    rec = RunRecord.for_context(kind, ctx, [MetricScore("ndcg", 20, value)])
    v = None if valid is None else RunRecord.for_context(kind, ctx, [MetricScore("ndcg", 20, valid)])
    return RunManifest(record=rec, validation=v, train_config=cfg, model_kind=kind, dataset=dataset, seed=0)


def seeded_store(tmp_path, entries, ctx):
    store = RunStore(tmp_path / "store")
    for kind, value in entries:
        store.put(manifest(kind, value, ctx, dataset=ctx.dataset_id))
    return store


# ------------------------------------------------------------------ reports


def test_report_reproduces_published_bpr_table(tmp_path):
    ctx = EvalContext("yelp2018", "bpr")
    store = seeded_store(tmp_path, [("mf", 0.0461), ("lightgcn", 0.0524)], ctx)
    table = build_report(store.manifests(), "yelp2018")
    assert table.columns == ["MF", "LightGCN"]
    assert table.gains[0] == 0.0
    assert abs(table.gains[1] * 100 - 13.66) <= 0.01
    md = table.to_markdown()
    assert "| Datasets | Metrics | MF | LightGCN |" in md
    assert "| yelp2018 | NDCG@20 | 0.0461 | 0.0524 |" in md
    assert "|  | GRMF-X(%) | 0.00% |" in md


def test_report_reproduces_published_bce_table(tmp_path):
    ctx = EvalContext("yelp2018", "bce")
    store = seeded_store(tmp_path, [("lightgcn", 0.0458), ("ultragcn", 0.0442), ("mf", 0.0420)], ctx)
    table = build_report(store.manifests(), "yelp2018")
    assert table.columns == ["MF", "UltraGCN", "LightGCN"]
    for got, want in zip(table.gains, [0.0, 5.23, 9.05]):
        assert abs(got * 100 - want) <= 0.01
    data = json.loads(table.to_json())
    assert data["rows"]["GRMF-X"]["MF"] == 0.0 and data["ctx_fingerprint"] == ctx.fingerprint()


def test_report_without_mf_baseline(tmp_path):
    store = seeded_store(tmp_path, [("lightgcn", 0.05)], EvalContext("gowalla", "bpr"))
    with pytest.raises(MissingBaselineError, match="MF"):
        build_report(store.manifests(), "gowalla")
    with pytest.raises(MissingBaselineError):
        build_report(store.manifests(), "yelp2018")


def test_report_refuses_mixed_contexts(tmp_path):
    bpr, bce = EvalContext("gowalla", "bpr"), EvalContext("gowalla", "bce")
    store = RunStore(tmp_path / "s")
    for ctx in (bpr, bce):
        store.put(manifest("mf", 0.14, ctx, dataset="gowalla"))
        store.put(manifest("lightgcn", 0.15, ctx, dataset="gowalla"))
    with pytest.raises(ContextViolationError, match="2 contexts"):
        build_report(store.manifests(), "gowalla")
    table = build_report(store.manifests(), "gowalla", fingerprint=bce.fingerprint()[:6])
    assert table.ctx == bce
    with pytest.raises(ContextViolationError):
        build_report(store.manifests(), "gowalla", fingerprint="zzzz")


def test_representative_is_best_validated_grid_point():
    ctx = EvalContext("d", "bpr")
    runs = [manifest("mf", 0.30, ctx, l2=l2, valid=v) for l2, v in [(1e-5, 0.2), (1e-4, 0.4), (1e-3, 0.1)]]
    best = representatives(runs)[("yelp2018", ctx.fingerprint(), ModelKind.MF)]
    assert best.train_config.l2_coefficient == 1e-4


def test_manifest_roundtrip_and_tamper(tmp_path):
    ctx = EvalContext("yelp2018", "bpr")
    m = manifest("mf", 0.0461, ctx, valid=0.05)
    store = RunStore(tmp_path)
    path = store.put(m)
    back = RunManifest.load(path)
    assert back.to_dict() == m.to_dict() and back.point_id == m.point_id
    d = json.loads(path.read_text())
    d["record"]["ctx"]["embedding_dim"] = 32
    with pytest.raises(InvariantError):
        RunManifest.from_dict(d)


# -------------------------------------------------------------------- plans

PLAN = f"""
[plan]
dataset = {SYN}
loss = bpr
dim = 8
k = 5, 20
validation_fraction = 0.1

[defaults]
lr = 0.01
batch_size = 128
epochs = 3

[model mf]
l2 = 0, 1e-5, 1e-4, 1e-3

[model lightgcn]
layers = 2
"""


def test_parse_plan_grid():
    plan = parse_plan(PLAN)
    assert plan.ctx.k_list == (5, 20) and plan.ctx.embedding_dim == 8
    (k1, g1), (k2, g2) = plan.models
    assert k1 is ModelKind.MF and [c.l2_coefficient for c in g1] == [0, 1e-5, 1e-4, 1e-3]
    assert all(c.learning_rate == 0.01 and c.epochs == 3 for c in g1)
    assert k2 is ModelKind.LIGHTGCN and g2[0].lightgcn_layers == 2
    assert plan.holdout == {"fraction": 0.1, "seed": 0}


@pytest.mark.parametrize(
    "text",
    [
        "[plan]\ndataset = d\n[model mf]\nloss = bce\n",
        "[plan]\ndataset = d\nloss = bpr, bce\n[model mf]\n",
        "[plan]\ndataset = d\n[model mf]\nlayers = 2\n",
        "[plan]\ndataset = d\nloss = bpr\n[model ultragcn]\n",
        "[plan]\ndataset = d\n[model transformer]\n",
        "[plan]\ndataset = d\n",
        "[model mf]\nl2 = 0\n",
        "[plan]\ndataset = d\n[model mf]\nmomentum = 0.9\n",
    ],
)
def test_parse_plan_rejects(text):
    with pytest.raises(UsageError):
        parse_plan(text)


def test_run_plan_grid_and_resume(tmp_path):
    plan = parse_plan(PLAN)
    store = RunStore(tmp_path / "store")
    reps = run_plan(plan, store)
    assert len(store.manifests()) == 5
    assert set(reps) == {ModelKind.MF, ModelKind.LIGHTGCN}
    mf_runs = [m for m in store.manifests() if m.model_kind is ModelKind.MF]
    assert len(mf_runs) == 4
    best = max(mf_runs, key=lambda m: (m.selection_score(), [-ord(c) for c in m.point_id]))
    assert reps[ModelKind.MF].point_id == best.point_id
    index = json.loads((store.root / "representatives.json").read_text())
    assert len([k for k in index if k.endswith("/mf")]) == 1
    for m in store.manifests():
        assert m.validation is not None and m.holdout == plan.holdout
        assert (store.artifact_dir / m.point_id / "checkpoint.bin").exists()
    stamps = {p.name: p.stat().st_mtime_ns for p in store.manifest_dir.iterdir()}
    run_plan(plan, store)  # every point is already stored
    assert {p.name: p.stat().st_mtime_ns for p in store.manifest_dir.iterdir()} == stamps


def test_point_id_ignores_nothing_that_matters():
    ctx = EvalContext("d", "bpr")
    a = point_id("d", "mf", ctx, TrainConfig(), None)
    assert a == point_id("d", "mf", ctx, TrainConfig(), None)
    assert a != point_id("d", "mf", ctx, TrainConfig(l2_coefficient=1e-3), None)
    assert a != point_id("d", "lightgcn", ctx, TrainConfig(), None)
    assert a != point_id("d", "mf", EvalContext("d", "bce"), TrainConfig(), None)


# ---------------------------------------------------------------------- CLI


def train_args(out, *extra):
    return ["train", "--dataset", SYN, "--model", "mf", "--dim", "8", "--lr", "0.01",
            "--batch-size", "128", "--epochs", "3", "--out-dir", str(out), *extra]


def test_cli_train_eval_roundtrip(tmp_path, capsys):
    assert main(train_args(tmp_path / "a")) == 0
    assert main(train_args(tmp_path / "b")) == 0
    a = RunManifest.load(tmp_path / "a" / "manifest.json")
    b = RunManifest.load(tmp_path / "b" / "manifest.json")
    assert a.record.scores == b.record.scores  # same seed, same numbers
    capsys.readouterr()
    assert main(["eval", "--manifest", str(tmp_path / "a" / "manifest.json"), "--batch-size", "7"]) == 0
    again = RunRecord.from_json(capsys.readouterr().out)
    assert abs(again.get("ndcg", 20) - a.record.get("ndcg", 20)) <= 1e-10
    lines = (tmp_path / "a" / "loss_trace.csv").read_text().splitlines()
    assert len(lines) == 4


def test_cli_train_with_holdout_and_eval(tmp_path, capsys):
    out = tmp_path / "h"
    assert main(train_args(out, "--patience", "2", "--validation-fraction", "0.1")) == 0
    m = RunManifest.load(out / "manifest.json")
    assert m.validation is not None and m.best_epoch is not None
    capsys.readouterr()
    assert main(["eval", "--manifest", str(out / "manifest.json")]) == 0
    assert RunRecord.from_json(capsys.readouterr().out).get("ndcg", 20) == pytest.approx(m.record.get("ndcg", 20), abs=1e-10)


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--dataset", SYN, "--model", "mf", "--layers", "2", "--out-dir", "x"],
        ["train", "--dataset", SYN, "--model", "lightgcn", "--gamma", "1", "--out-dir", "x"],
        ["train", "--dataset", SYN, "--model", "ultragcn", "--loss", "bpr", "--out-dir", "x"],
        ["train", "--dataset", "movielens", "--model", "mf", "--out-dir", "x"],
        ["train", "--dataset", SYN, "--model", "mf", "--k", "0", "--out-dir", "x"],
        ["train", "--dataset", SYN, "--model", "nope", "--out-dir", "x"],
        ["dataset", "stats", "nope"],
        ["frobnicate"],
    ],
)
def test_cli_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert not (tmp_path / "x").exists()


def test_cli_runtime_errors_exit_1(tmp_path):
    assert main(["eval", "--manifest", str(tmp_path / "missing.json")]) == 1
    store = tmp_path / "store"
    seeded_store(tmp_path, [("lightgcn", 0.05)], EvalContext("gowalla", "bpr"))
    assert main(["report", "--store", str(store), "--dataset", "gowalla"]) == 1


def test_cli_bench_and_report_are_reproducible(tmp_path, capsys):
    plan = tmp_path / "plan.ini"
    plan.write_text(PLAN.replace("l2 = 0, 1e-5, 1e-4, 1e-3", "l2 = 0, 1e-3"))
    store = tmp_path / "store"
    assert main(["bench", str(plan), "--store", str(store)]) == 0
    outs = []
    for name in ("r1", "r2"):
        assert main(["report", "--store", str(store), "--dataset", SYN, "--out", str(tmp_path / f"{name}.md"),
                     "--json", str(tmp_path / f"{name}.json")]) == 0
        outs.append((tmp_path / f"{name}.md").read_bytes())
    assert outs[0] == outs[1]
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()
    text = outs[0].decode()
    assert "| MF | LightGCN |" in text and "| 0.00% |" in text


def test_cli_dataset_fetch_and_stats(tmp_path, capsys):
    src = tmp_path / "src"
    src.mkdir()
    sp = synthetic_split(25, 30, 2, seed=3)
    (src / "train.txt").write_text(serialize_adjacency_list(sp.train))
    (src / "test.txt").write_text(serialize_adjacency_list(sp.test))
    cache = tmp_path / "cache"
    argv = ["dataset", "fetch", "gowalla", "--source", str(src), "--cache-root", str(cache)]
    assert main(argv) == 0
    assert "prepared" in capsys.readouterr().out
    assert main(argv) == 0
    assert "cached at" in capsys.readouterr().out
    assert main(["dataset", "stats", "gowalla", "--source", str(src), "--cache-root", str(cache)]) == 0
    out = capsys.readouterr().out
    assert f"| {sp.train.nnz + sp.test.nnz} |" in out.replace(",", "")
    assert main(["dataset", "fetch", SYN]) == 0
    assert "generated on demand" in capsys.readouterr().out

