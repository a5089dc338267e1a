import csv
import json
import math
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from tpssl.errors import ConfigurationError
from tpssl.evaluate import (
    MetricRecord,
    classification_accuracy,
    cluster_accuracy,
    embed,
    kmeans_cluster,
    onehot,
)
from tpssl.harness import experiments as ex
from tpssl.harness.checkpoint import CorruptionError, load_checkpoint, provenance_chain, read_manifest
from tpssl.harness.cli import build_parser, main
from tpssl.harness.config import parse_config
from tpssl.harness.data import make_dataset, split_dataset
from tpssl.harness.plotting import SchemaError, cmd_plot, merge_curves, read_curves
from tpssl.ssl import predict

TINY = """
[data]
n_samples = 24
n_test = 8
seed = 5
[pretrain_data]
n_samples = 24
[pretrain]
epochs = 1
batch_size = 12
[contrastive]
epochs = 2
batch_size = 12
[ssl]
epochs = 2
steps_per_epoch = 2
batch_size = 4
unlabeled_ratio = 2
[split]
n_labeled = 4
"""

SEG_TINY = TINY + """
[data]
kind = blobs_segmentation
n_classes = 3
[ssl]
learner = cutmix
"""


@pytest.fixture(scope="module")
def cfg():
    return parse_config(TINY)


@pytest.fixture(scope="module")
def generic(cfg, tmp_path_factory):
    return ex.cmd_pretrain(cfg, 0, tmp_path_factory.mktemp("generic"))


def _bytes(path):
    path = Path(path)
    return {p.name: p.read_bytes() for p in sorted(path.iterdir()) if p.is_file() and p.name != "manifest.json"}


# -- stages -----------------------------------------------------------------

def test_target_pretrain_zero_epochs_is_identity(cfg, generic, tmp_path):
    zero = replace(cfg, contrastive=replace(cfg.contrastive, epochs=0))
    res = ex.cmd_target_pretrain(zero, 0, tmp_path / "tp", generic.path)
    m0, t0 = load_checkpoint(generic.path)
    m1, t1 = load_checkpoint(res.path)
    assert m1.digests == m0.digests
    assert all(torch.equal(t0[k], t1[k]) for k in t0)
    assert res.records == []


def test_target_pretrain_records_parent_and_snapshots(cfg, generic, tmp_path):
    res = ex.cmd_target_pretrain(cfg, 0, tmp_path / "tp", generic.path, snapshots=(0, 1, 2))
    assert res.manifest.parent == generic.manifest.run_id
    assert [m.stage for m in provenance_chain(res.path)] == ["target_pretrain", "generic_pretrain"]
    snap0 = load_checkpoint(tmp_path / "tp" / "snapshots" / "epoch_0")[1]
    assert all(torch.equal(v, load_checkpoint(generic.path)[1][k]) for k, v in snap0.items())
    final = load_checkpoint(res.path)[1]
    snap2 = load_checkpoint(tmp_path / "tp" / "snapshots" / "epoch_2")[1]
    assert all(torch.equal(final[k], snap2[k]) for k in final)
    lines = (res.path / ex.METRICS_FILE).read_text().splitlines()
    assert [json.loads(line)["epoch"] for line in lines] == [1, 2]


def test_snapshot_validation(cfg, tmp_path):
    with pytest.raises(ConfigurationError):
        ex.cmd_target_pretrain(cfg, 0, tmp_path / "a", snapshots=(0, 3))
    with pytest.raises(ConfigurationError):
        ex.cmd_target_pretrain(cfg, 0, tmp_path / "b", snapshots=(1, 2))
    with pytest.raises(ConfigurationError):
        ex.cmd_target_pretrain(cfg, 0, tmp_path / "c", snapshots=(0, 2, 1))


def test_target_pretrain_rerun_is_byte_identical(cfg, generic, tmp_path):
    a = ex.cmd_target_pretrain(cfg, 3, tmp_path / "a", generic.path)
    b = ex.cmd_target_pretrain(cfg, 3, tmp_path / "b", generic.path)
    assert _bytes(a.path) == _bytes(b.path)
    assert a.manifest.run_id == b.manifest.run_id


def test_finetune_records_and_rerun(cfg, generic, tmp_path):
    a = ex.cmd_finetune(cfg, 1, tmp_path / "a", generic.path)
    b = ex.cmd_finetune(cfg, 1, tmp_path / "b", generic.path)
    epochs = [r.epoch for r in a.records]
    assert epochs == list(range(1, cfg.ssl.epochs + 1))
    assert all("test_accuracy" in r.metrics for r in a.records)
    assert a.final["test_accuracy"] == b.final["test_accuracy"]
    assert _bytes(a.path) == _bytes(b.path)
    chain = provenance_chain(a.path)
    assert [m.stage for m in chain] == ["finetune", "generic_pretrain"]


def test_finetune_from_zero_epoch_target_pretrain_matches_parent(cfg, generic, tmp_path):
    zero = replace(cfg, contrastive=replace(cfg.contrastive, epochs=0))
    tp = ex.cmd_target_pretrain(zero, 2, tmp_path / "tp", generic.path)
    via = ex.cmd_finetune(cfg, 2, tmp_path / "via", tp.path)
    direct = ex.cmd_finetune(cfg, 2, tmp_path / "direct", generic.path)
    assert _bytes(via.path) == _bytes(direct.path)


def test_finetune_uses_split_file(cfg, tmp_path):
    path = ex.cmd_split(cfg, 4, tmp_path)
    d = json.loads(path.read_text())
    assert d["n_labeled"] == 4 and len(d["labeled_index"]) == 4
    a = ex.cmd_finetune(cfg, 4, tmp_path / "a", split_path=path)
    b = ex.cmd_finetune(cfg, 4, tmp_path / "b")
    assert _bytes(a.path) == _bytes(b.path)


def test_missing_parent_checkpoint(cfg, tmp_path):
    with pytest.raises(FileNotFoundError):
        ex.cmd_target_pretrain(cfg, 0, tmp_path / "x", tmp_path / "nowhere")


# -- eval -------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit(cfg, tmp_path_factory):
    fit = replace(cfg, ssl=replace(cfg.ssl, unlabeled_weight=0.0, epochs=6, steps_per_epoch=10,
                                   lr=0.05, weight_decay=0.0))
    res = ex.cmd_finetune(fit, 0, tmp_path_factory.mktemp("overfit"))
    return fit, res


def test_eval_empty_metrics(cfg, overfit, tmp_path):
    assert ex.cmd_eval(overfit[1].path, cfg, (), tmp_path) == {}
    assert json.loads((tmp_path / "report.json").read_text()) == {}


def test_eval_overfit_labeled_accuracy(overfit, tmp_path):
    fit, res = overfit
    report = ex.cmd_eval(res.path, fit, ("accuracy",), tmp_path, seed=0)
    assert report["accuracy/labeled"] == 1.0


def test_eval_matches_in_process(overfit, tmp_path):
    fit, res = overfit
    report = ex.cmd_eval(res.path, fit, ("accuracy", "cluster"), tmp_path, seed=0)
    ds = make_dataset(fit.data)
    model = ex.load_classifier(res.path, ds.n_classes, "classification")
    acc = classification_accuracy(predict(model, ds.tensor(True)), ds.test_labels)
    assert abs(report["accuracy/test"] - acc) < 1e-9
    enc, _ = ex.load_encoder(res.path, 0)
    for name, x, y in (("train", ds.tensor(), ds.labels), ("test", ds.tensor(True), ds.test_labels)):
        a = kmeans_cluster(embed(enc, x), ds.n_classes, np.random.default_rng([0, 14]))
        assert abs(report[f"cluster_accuracy/{name}"] - cluster_accuracy(a, onehot(y, ds.n_classes))) < 1e-9
    rows = list(csv.reader((tmp_path / "report.csv").open()))
    assert rows[0] == ["metric", "value"]
    assert {r[0]: float(r[1]) for r in rows[1:]} == report


def test_eval_embeddings_export(overfit, tmp_path):
    fit, res = overfit
    ex.cmd_eval(res.path, fit, ("embeddings",), tmp_path)
    lines = (tmp_path / "embeddings.csv").read_text().splitlines()
    assert len(lines) == 1 + fit.data.n_test


def test_eval_detects_corruption(overfit, tmp_path):
    fit, res = overfit
    copy = tmp_path / "ck"
    shutil.copytree(res.path, copy)
    blob = copy / read_manifest(copy).tensors["head.weight"]["file"]
    raw = bytearray(blob.read_bytes())
    raw[3] ^= 0x10
    blob.write_bytes(bytes(raw))
    with pytest.raises(CorruptionError):
        ex.cmd_eval(copy, fit, ("accuracy",), tmp_path / "r")


def test_eval_rejects_unknown_metric(overfit, tmp_path):
    with pytest.raises(ConfigurationError):
        ex.cmd_eval(overfit[1].path, overfit[0], ("f1",), tmp_path)


def test_eval_needs_head(cfg, generic, tmp_path):
    with pytest.raises(ConfigurationError):
        ex.cmd_eval(generic.path, cfg, ("accuracy",), tmp_path)


# -- multi-run experiments --------------------------------------------------

def test_transfer_single_dataset_equals_pipeline(cfg, generic, tmp_path):
    one = replace(cfg, transfer=replace(cfg.transfer, appearances=("warm_on_dark",)))
    m = ex.cmd_transfer_matrix(one, (0,), tmp_path / "t", generic.path)
    assert list(m) == ["warm_on_dark"]
    tp = ex.cmd_target_pretrain(cfg, 0, tmp_path / "tp", generic.path)
    ft = ex.cmd_finetune(cfg, 0, tmp_path / "ft", tp.path)
    assert m["warm_on_dark"]["warm_on_dark"] == ft.final["test_accuracy"]


def test_transfer_two_datasets_is_complete(cfg, generic, tmp_path):
    m = ex.cmd_transfer_matrix(cfg, (0,), tmp_path, generic.path)
    looks = cfg.transfer.appearances
    assert len(looks) == 2
    assert all(not math.isnan(m[s][t]) for s in looks for t in looks)
    runs = sorted(p.name for p in (tmp_path / "seed0").iterdir() if p.name.startswith("ft_"))
    assert len(runs) == 4
    rows = list(csv.reader((tmp_path / "transfer.csv").open()))
    assert len(rows) == 3 and len(rows[0]) == 3


def test_sweep_zero_snapshot_equals_baseline(cfg, generic, tmp_path):
    one = replace(cfg, sweep=replace(cfg.sweep, snapshots=(0,), label_budgets=(4,)))
    rows = ex.cmd_steps_sweep(one, (0,), tmp_path / "s", generic.path)
    base = ex.cmd_finetune(cfg, 0, tmp_path / "base", generic.path)
    assert len(rows) == 1 and rows[0]["accuracy"] == base.final["test_accuracy"]


def test_sweep_rows_are_snapshots_times_budgets(cfg, tmp_path):
    sw = replace(cfg, sweep=replace(cfg.sweep, snapshots=(0, 1, 2), label_budgets=(4, 8)))
    rows = ex.cmd_steps_sweep(sw, (0,), tmp_path)
    assert [(r["epoch"], r["n_labeled"]) for r in rows] == [(t, n) for t in (0, 1, 2) for n in (4, 8)]
    recs = ex.read_metrics(tmp_path / "sweep.jsonl")
    assert [r.epoch for r in recs] == [0, 1, 2] and set(recs[0].metrics) == {"n4", "n8"}


def test_sweep_snapshot_beyond_epochs(cfg, tmp_path):
    bad = replace(cfg, sweep=replace(cfg.sweep, snapshots=(0, 5)))
    with pytest.raises(ConfigurationError):
        ex.cmd_steps_sweep(bad, (0,), tmp_path)


def test_dense_ablation_table(tmp_path):
    seg = parse_config(SEG_TINY)
    rows = ex.cmd_ablation(seg, (0,), tmp_path)
    assert [r["variant"] for r in rows] == ["full", "no_anchor", "no_affine"]
    assert rows[1]["anchor_weight"] == 0.0 and rows[2]["affine"] is False
    assert all(0.0 <= r["miou"] <= 1.0 for r in rows)
    assert len(list(csv.reader((tmp_path / "ablation.csv").open()))) == 4


def test_segmentation_split_file_round_trip(tmp_path):
    seg = parse_config(SEG_TINY)
    ds = make_dataset(seg.data)
    s = split_dataset(ds, 4, 0)
    assert s.labeled_targets.shape[1:] == (32, 32)


# -- plotting ---------------------------------------------------------------

def _records(path, epochs, key="test_accuracy", scale=1.0):
    return ex.write_metrics(path, [MetricRecord(step=e * 10, epoch=e, metrics={key: scale * e / 10, "loss": 1.0})
                                   for e in epochs])


def test_plot_single_file_identity(tmp_path):
    f = _records(tmp_path / "a" / "metrics.jsonl", [1, 2, 3])
    header, rows = merge_curves([f])
    assert header == ["epoch", "a:test_accuracy"]
    assert rows == [[1, 0.1], [2, 0.2], [3, 0.3]]


def test_plot_disjoint_epochs_have_gaps(tmp_path):
    a = _records(tmp_path / "a" / "metrics.jsonl", [1, 3])
    b = _records(tmp_path / "b" / "metrics.jsonl", [2, 4], scale=2.0)
    header, rows = merge_curves([a, b])
    assert [r[0] for r in rows] == [1, 2, 3, 4]
    assert rows[0] == [1, 0.1, None] and rows[1] == [2, None, 0.4]


def test_plot_round_trip_and_image(tmp_path):
    a = _records(tmp_path / "a" / "metrics.jsonl", [1, 2, 5])
    b = _records(tmp_path / "b" / "metrics.jsonl", [2, 3], scale=1 / 3)
    data, image = cmd_plot([a, b], "convergence", tmp_path / "out")
    assert image.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    header, rows = read_curves(data)
    assert (header, rows) == merge_curves([a, b])


def test_plot_schema_mismatch(tmp_path):
    a = _records(tmp_path / "a" / "metrics.jsonl", [1])
    b = _records(tmp_path / "b" / "metrics.jsonl", [1], key="test_miou")
    with pytest.raises(SchemaError):
        merge_curves([a, b])
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    with pytest.raises(ConfigurationError):
        merge_curves([bad])


def test_plot_sweep_kind(tmp_path):
    f = ex.write_metrics(tmp_path / "sweep.jsonl", [MetricRecord(0, t, {"n16": 0.5, "n256": 0.8}) for t in (0, 5)])
    header, rows = merge_curves([f], "sweep", labels=["tp"])
    assert header == ["epoch", "tp:n16", "tp:n256"] and rows == [[0, 0.5, 0.8], [5, 0.5, 0.8]]


# -- cli --------------------------------------------------------------------

def test_cli_has_all_subcommands():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert {"gen-data", "split", "pretrain", "target-pretrain", "finetune", "eval",
            "transfer", "sweep", "plot"} <= set(sub.choices)


def test_cli_pipeline(tmp_path, capsys):
    ini = tmp_path / "tiny.ini"
    ini.write_text(TINY)
    g = ["--config", str(ini), "--threads", "1", "--seed", "0"]
    assert main(g + ["--out", str(tmp_path / "data"), "gen-data"]) == 0
    data = tmp_path / "data" / "target.npz"
    assert main(g + ["--out", str(tmp_path / "split"), "split", "--data", str(data)]) == 0
    assert main(g + ["--out", str(tmp_path / "gen"), "pretrain",
                     "--data", str(tmp_path / "data" / "generic.npz")]) == 0
    assert main(g + ["--out", str(tmp_path / "tp"), "target-pretrain", "--init", str(tmp_path / "gen"),
                     "--data", str(data)]) == 0
    assert main(g + ["--out", str(tmp_path / "ft"), "finetune", "--init", str(tmp_path / "tp"),
                     "--data", str(data), "--split", str(tmp_path / "split" / "split.json")]) == 0
    capsys.readouterr()
    assert main(["--out", str(tmp_path / "ev"), "eval", "--config", str(ini),
                 "--checkpoint", str(tmp_path / "ft"), "--metrics", "accuracy,cluster"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "metric,value" and any(line.startswith("accuracy/test,") for line in out)
    assert main(g + ["--out", str(tmp_path / "pl"), "plot", str(tmp_path / "ft" / "metrics.jsonl")]) == 0
    assert (tmp_path / "pl" / "convergence.png").is_file()
    chain = provenance_chain(tmp_path / "ft")
    assert [m.stage for m in chain] == ["finetune", "target_pretrain", "generic_pretrain"]


@pytest.mark.parametrize("argv,category,code", [
    (["--config", "{missing}", "gen-data"], "config", 2),
    (["eval", "--checkpoint", "{missing}"], "checkpoint", 4),
    (["--config", "{badkey}", "gen-data"], "config", 2),
    (["plot", "{badjsonl}"], "config", 2),
    (["--threads", "0", "gen-data"], "config", 2),
])
def test_cli_error_lines(tmp_path, capsys, argv, category, code):
    (tmp_path / "bad.ini").write_text("ssl.no_such_key = 1\n")
    (tmp_path / "bad.jsonl").write_text("[1, 2]\n")
    paths = {"missing": tmp_path / "missing", "badkey": tmp_path / "bad.ini", "badjsonl": tmp_path / "bad.jsonl"}
    argv = [a.format(**paths) for a in argv]
    assert main(["--out", str(tmp_path / "o")] + argv) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith(f"error[{category}]: ")


def test_cli_corruption_exit(tmp_path, capsys, overfit):
    fit, res = overfit
    shutil.copytree(res.path, tmp_path / "ck")
    blob = tmp_path / "ck" / read_manifest(tmp_path / "ck").tensors["head.bias"]["file"]
    blob.write_bytes(b"\x00" * len(blob.read_bytes()))
    ini = tmp_path / "c.ini"
    ini.write_text(TINY)
    assert main(["--config", str(ini), "--out", str(tmp_path / "r"), "eval",
                 "--checkpoint", str(tmp_path / "ck"), "--metrics", "accuracy"]) == 5
    assert capsys.readouterr().err.startswith("error[corruption]: ")
