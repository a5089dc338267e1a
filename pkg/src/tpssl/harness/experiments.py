"""Pipeline stages: generic pretraining, target pretraining, finetuning, evaluation.

Every stage owns one output directory holding a checkpoint (see
``checkpoint``) and a ``metrics.jsonl`` file. Metrics are written without
timestamps so a single-threaded rerun reproduces them byte for byte.
Checkpoint tensors are the model's state dict; encoder weights live under the
``encoder.`` prefix in every stage, so any checkpoint can seed the next one.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from ..augment import AffinePolicy
from ..contrastive import AnchorSnapshot, ContrastiveConfig, run_target_pretrain
from ..errors import ConfigurationError
from ..evaluate import (
    MetricRecord,
    classification_accuracy,
    cluster_accuracy,
    embed,
    export_embeddings,
    kmeans_cluster,
    miou,
    onehot,
)
from ..models import Classifier, Encoder, ModelState, build_classifier, build_encoder
from ..ssl import FinetuneState, predict, run_finetune
from .checkpoint import (
    CheckpointManifest,
    MissingCheckpointError,
    load_checkpoint,
    prefixed,
    save_checkpoint,
    unprefixed,
)
from .config import ExperimentConfig
from .data import Dataset, DatasetSpec, image_classes, make_dataset, split_dataset

METRICS_FILE = "metrics.jsonl"
EVAL_METRICS = ("accuracy", "miou", "cluster", "embeddings")

# Stream ids mixed into the per-run seed so stages never share a generator.
_GENERIC_STREAM, _TARGET_STREAM, _FINETUNE_STREAM, _CLUSTER_STREAM = 11, 12, 13, 14


@dataclass
class StageResult:
    path: Path
    manifest: CheckpointManifest
    records: list[MetricRecord]

    @property
    def final(self) -> dict[str, float]:
        return self.records[-1].metrics if self.records else {}


def set_threads(n: int) -> None:
    """Pin intra-op threads; one thread makes every stage bit-reproducible."""
    if n < 1:
        raise ConfigurationError("--threads must be >= 1")
    torch.set_num_threads(n)


# -- files ------------------------------------------------------------------

def write_metrics(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    return path


def read_metrics(path) -> list[MetricRecord]:
    path = Path(path)
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(MetricRecord.from_json(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigurationError(f"{path}:{lineno}: not a metric record ({exc})") from exc
    return out


def write_table(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def load_dataset(spec: DatasetSpec, path=None) -> Dataset:
    """A saved dataset if ``path`` is given, else a fresh deterministic render."""
    if path is None:
        return make_dataset(spec)
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"dataset file {path} does not exist")
    return Dataset.load(path)


# -- weights ----------------------------------------------------------------

def _encoder_tensors(encoder: Encoder) -> dict[str, torch.Tensor]:
    return prefixed(encoder.state_dict(), "encoder")


def load_encoder(init, seed: int) -> tuple[Encoder, Path | None]:
    """Resolve ``init`` ("random" or a checkpoint directory) to an encoder.

    Returns the encoder and the checkpoint path it came from (None for random).
    """
    if init is None or str(init) == "random":
        return build_encoder(seed), None
    path = Path(init)
    _, tensors = load_checkpoint(path)
    enc = build_encoder(seed)
    state = unprefixed(tensors, "encoder")
    if not state:
        raise MissingCheckpointError(f"checkpoint {path} holds no encoder weights")
    enc.load_state_dict(state)
    return enc, path


def load_classifier(path, n_classes: int, task: str, seed: int = 0) -> Classifier:
    _, tensors = load_checkpoint(path)
    if not any(k.startswith("head.") for k in tensors):
        raise ConfigurationError(f"checkpoint {path} has no task head; finetune it first")
    model = build_classifier(build_encoder(seed), n_classes, seed, task)
    model.load_state_dict(tensors)
    return model


def _affine_policy(config: ContrastiveConfig) -> AffinePolicy | None:
    return AffinePolicy() if config.affine else None


def _task(spec: DatasetSpec) -> str:
    return "segmentation" if spec.kind == "blobs_segmentation" else "classification"


# -- stages -----------------------------------------------------------------

def cmd_gen_data(cfg: ExperimentConfig, out) -> dict[str, Path]:
    out = Path(out)
    return {
        "target": make_dataset(cfg.data).save(out / "target.npz"),
        "generic": make_dataset(cfg.pretrain_data).save(out / "generic.npz"),
    }


def cmd_split(cfg: ExperimentConfig, seed: int, out, data_path=None) -> Path:
    ds = load_dataset(cfg.data, data_path)
    split = split_dataset(ds, cfg.split.n_labeled, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "split.json"
    path.write_text(json.dumps({
        "seed": seed,
        "n_labeled": split.n_labeled,
        "labeled_index": split.labeled_index.tolist(),
        "per_class": {str(k): v for k, v in split.per_class.items()},
    }, indent=2))
    return path


def _pretrain(images, encoder, anchor, config: ContrastiveConfig, cfg: ExperimentConfig,
              seed: int, stream: int, snapshots=()):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)  # projector/predictor init
        state = ModelState.create(encoder, dense=config.mode == "dense")
    rng = np.random.default_rng([seed, stream])
    policy = (cfg.augment, cfg.augment)
    return run_target_pretrain(images, state, anchor, config, rng, snapshot_epochs=snapshots,
                               photometric=policy, affine=_affine_policy(config))


def cmd_pretrain(cfg: ExperimentConfig, seed: int, out, data_path=None) -> StageResult:
    """Generic pretraining on the broad distribution (the ImageNet-weights stand-in)."""
    ds = load_dataset(cfg.pretrain_data, data_path)
    out = Path(out)
    res = _pretrain(ds.tensor(), build_encoder(seed), None, cfg.pretrain, cfg, seed, _GENERIC_STREAM)
    m = save_checkpoint(out, _encoder_tensors(res.state.encoder), "generic_pretrain",
                        cfg.hash("pretrain_data", "pretrain", "augment"), cfg.pretrain.epochs,
                        seed=seed)
    write_metrics(out / METRICS_FILE, res.records)
    return StageResult(out, m, res.records)


def _check_snapshots(snaps, epochs: int) -> tuple[int, ...]:
    snaps = tuple(snaps)
    if not snaps:
        return snaps
    if list(snaps) != sorted(set(snaps)) or snaps[0] != 0:
        raise ConfigurationError("snapshot epochs must be strictly ascending and start at 0")
    if snaps[-1] > epochs:
        raise ConfigurationError(f"snapshot epoch {snaps[-1]} is beyond the {epochs} target-pretraining epochs")
    return snaps


def cmd_target_pretrain(cfg: ExperimentConfig, seed: int, out, init="random", data_path=None,
                        snapshots=()) -> StageResult:
    """Contrastive pretraining on the target images, anchored to the initial weights.

    ``snapshots`` lists epochs whose weights are also written, each as its own
    checkpoint under ``out/snapshots/epoch_<T>``.
    """
    snaps = _check_snapshots(snapshots, cfg.contrastive.epochs)
    ds = load_dataset(cfg.data, data_path)
    encoder, parent = load_encoder(init, seed)
    anchor = AnchorSnapshot.from_module(encoder, source=str(parent) if parent else "random")
    out = Path(out)
    res = _pretrain(ds.tensor(), encoder, anchor, cfg.contrastive, cfg, seed, _TARGET_STREAM, snaps)
    h = cfg.hash("data", "contrastive", "augment")
    m = save_checkpoint(out, _encoder_tensors(res.state.encoder), "target_pretrain", h,
                        cfg.contrastive.epochs, parent=parent, seed=seed,
                        extra={"anchor_digest": res.anchor_digest})
    for epoch, snap in sorted(res.snapshots.items()):
        save_checkpoint(out / "snapshots" / f"epoch_{epoch}",
                        {f"encoder.{k}": v for k, v in snap.items()}, "target_pretrain", h,
                        epoch, parent=parent, seed=seed, tag=f"epoch{epoch}")
    write_metrics(out / METRICS_FILE, res.records)
    return StageResult(out, m, res.records)


def _read_split(path):
    d = json.loads(Path(path).read_text())
    return np.asarray(d["labeled_index"], dtype=np.int64)


def _evaluator(ds: Dataset, task: str):
    xt = ds.tensor(test=True)
    if xt.shape[0] == 0:
        return None
    yt = torch.from_numpy(ds.test_labels)
    if task == "classification":
        return lambda model: {"test_accuracy": classification_accuracy(predict(model, xt), yt)}
    return lambda model: {"test_miou": miou(predict(model, xt).numpy(), ds.test_labels, ds.n_classes)}


def cmd_finetune(cfg: ExperimentConfig, seed: int, out, init="random", data_path=None,
                 split_path=None, dataset: Dataset | None = None) -> StageResult:
    """Semi-supervised finetuning; logs the test metric after every epoch."""
    ds = dataset if dataset is not None else load_dataset(cfg.data, data_path)
    task = _task(ds.spec)
    encoder, parent = load_encoder(init, seed)
    x = ds.tensor()
    split = split_dataset(ds, cfg.split.n_labeled, seed, images=x)
    lx, ly = split.labeled_images, split.labeled_targets
    if split_path is not None:
        idx = _read_split(split_path)
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise ConfigurationError(f"split {split_path} indexes outside the dataset")
        lx, ly = x[torch.from_numpy(idx)], torch.from_numpy(ds.labels[idx])
    model = build_classifier(encoder, ds.n_classes, seed, task)
    state = FinetuneState.create(model, cfg.ssl)
    state, records = run_finetune(state, lx, ly, split.unlabeled, cfg.ssl,
                                  np.random.default_rng([seed, _FINETUNE_STREAM]), task,
                                  evaluate=_evaluator(ds, task))
    out = Path(out)
    m = save_checkpoint(out, state.model.state_dict(), "finetune",
                        cfg.hash("data", "split", "ssl"), cfg.ssl.epochs, parent=parent,
                        seed=seed, extra={"task": task, "n_classes": ds.n_classes})
    write_metrics(out / METRICS_FILE, records)
    return StageResult(out, m, records)


# -- evaluation -------------------------------------------------------------

def cluster_report(encoder: Encoder, ds: Dataset, seed: int) -> dict[str, float]:
    """k-means cluster accuracy, fit independently on the train and the test split."""
    out = {}
    for name, test in (("train", False), ("test", True)):
        labels = ds.test_labels if test else ds.labels
        if labels.ndim != 1 or labels.size == 0:
            continue
        z = embed(encoder, ds.tensor(test=test))
        assign = kmeans_cluster(z, ds.n_classes, np.random.default_rng([seed, _CLUSTER_STREAM]))
        out[f"cluster_accuracy/{name}"] = cluster_accuracy(assign, onehot(labels, ds.n_classes))
    return out


def cmd_eval(checkpoint, cfg: ExperimentConfig, metrics, out, seed: int = 0,
             data_path=None) -> dict[str, float]:
    """Evaluate a checkpoint; writes ``report.json`` and ``report.csv`` under ``out``.

    ``accuracy`` and ``miou`` need a finetuned head and cover the test split and
    the labeled training subset; ``cluster`` and ``embeddings`` only need the
    encoder.
    """
    metrics = tuple(metrics)
    unknown = sorted(set(metrics) - set(EVAL_METRICS))
    if unknown:
        raise ConfigurationError(f"unknown eval metrics {unknown}; choose from {EVAL_METRICS}")
    out = Path(out)
    report: dict[str, float] = {}
    if metrics:
        manifest, _ = load_checkpoint(checkpoint)
        ds = load_dataset(cfg.data, data_path)
        task = _task(ds.spec)
        encoder, _ = load_encoder(checkpoint, seed)
        if "accuracy" in metrics or "miou" in metrics:
            model = load_classifier(checkpoint, ds.n_classes, task)
            split = split_dataset(ds, cfg.split.n_labeled, seed)
            parts = {"test": (ds.tensor(test=True), ds.test_labels),
                     "labeled": (split.labeled_images, split.labeled_targets.numpy())}
            for name, (x, y) in parts.items():
                if x.shape[0] == 0:
                    continue
                pred = predict(model, x).numpy()
                if "accuracy" in metrics:
                    report[f"accuracy/{name}"] = classification_accuracy(pred.ravel(), y.ravel())
                if "miou" in metrics and task == "segmentation":
                    report[f"miou/{name}"] = miou(pred, y, ds.n_classes)
        if "cluster" in metrics:
            report.update(cluster_report(encoder, ds, seed))
        if "embeddings" in metrics:
            # Segmentation images are labeled by their dominant foreground class.
            labels = image_classes(ds.test_labels) if ds.test_labels.size else ds.test_labels
            export_embeddings(encoder, ds.tensor(test=True), labels, out / "embeddings.csv")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    write_table(out / "report.csv", ["metric", "value"],
                [[k, repr(v)] for k, v in sorted(report.items())])
    return report


# -- multi-run experiments --------------------------------------------------

def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else math.nan


def _final_metric(res: StageResult) -> float:
    m = res.final
    return m.get("test_accuracy", m.get("test_miou", math.nan))


def cmd_transfer_matrix(cfg: ExperimentConfig, seeds, out, init="random") -> dict:
    """Target-pretrain on every dataset, finetune every (source, target) pair.

    Datasets share ``cfg.data`` except for ``cfg.transfer.appearances``. The
    returned matrix is indexed ``[source][target]`` and averaged over seeds.
    """
    looks = cfg.transfer.appearances
    if not looks:
        raise ConfigurationError("transfer.appearances must name at least one dataset")
    out = Path(out)
    specs = {a: replace(cfg.data, appearance=a) for a in looks}
    data = {a: make_dataset(s) for a, s in specs.items()}
    runs: dict[tuple[str, str], list[float]] = {}
    for seed in seeds:
        for src in looks:
            src_cfg = replace(cfg, data=specs[src])
            tp_dir = out / f"seed{seed}" / f"tp_{src}"
            cmd_target_pretrain(src_cfg, seed, tp_dir, init)
            for tgt in looks:
                res = cmd_finetune(replace(cfg, data=specs[tgt]), seed,
                                   out / f"seed{seed}" / f"ft_{src}_to_{tgt}", tp_dir,
                                   dataset=data[tgt])
                runs.setdefault((src, tgt), []).append(_final_metric(res))
    matrix = {s: {t: _mean(runs[(s, t)]) for t in looks} for s in looks}
    write_table(out / "transfer.csv", ["pretrain_source"] + list(looks),
                [[s] + [repr(matrix[s][t]) for t in looks] for s in looks])
    return matrix


def cmd_steps_sweep(cfg: ExperimentConfig, seeds, out, init="random") -> list[dict]:
    """Finetune from target-pretraining snapshots for every label budget.

    Rows are (pretrain epoch T, label budget, mean final test metric). Also
    writes ``sweep.jsonl`` with one record per snapshot for plotting.
    """
    snaps = _check_snapshots(cfg.sweep.snapshots, cfg.contrastive.epochs)
    if not snaps:
        raise ConfigurationError("sweep.snapshots must not be empty")
    budgets = cfg.sweep.label_budgets
    if not budgets:
        raise ConfigurationError("sweep.label_budgets must not be empty")
    out = Path(out)
    ds = make_dataset(cfg.data)
    acc: dict[tuple[int, int], list[float]] = {}
    for seed in seeds:
        tp_dir = out / f"seed{seed}" / "tp"
        cmd_target_pretrain(cfg, seed, tp_dir, init, snapshots=snaps)
        for t in snaps:
            for n in budgets:
                run_cfg = replace(cfg, split=replace(cfg.split, n_labeled=n))
                res = cmd_finetune(run_cfg, seed, out / f"seed{seed}" / f"ft_T{t}_n{n}",
                                   tp_dir / "snapshots" / f"epoch_{t}", dataset=ds)
                acc.setdefault((t, n), []).append(_final_metric(res))
    rows = [{"epoch": t, "n_labeled": n, "accuracy": _mean(acc[(t, n)])} for t in snaps for n in budgets]
    write_table(out / "sweep.csv", ["epoch", "n_labeled", "accuracy"],
                [[r["epoch"], r["n_labeled"], repr(r["accuracy"])] for r in rows])
    write_metrics(out / "sweep.jsonl", [
        MetricRecord(step=0, epoch=t, metrics={f"n{n}": _mean(acc[(t, n)]) for n in budgets})
        for t in snaps])
    return rows


ABLATIONS = (
    ("full", {}),
    ("no_anchor", {"anchor_weight": 0.0}),
    ("no_affine", {"affine": False}),
)


def cmd_ablation(cfg: ExperimentConfig, seeds, out, init="random") -> list[dict]:
    """Dense target pretraining with and without the anchor and the affine warp.

    Each variant is target-pretrained in dense mode on ``cfg.data`` and then
    finetuned; rows report the mean final test metric over seeds.
    """
    out = Path(out)
    ds = make_dataset(cfg.data)
    rows = []
    for name, change in ABLATIONS:
        vals = []
        run_cfg = replace(cfg, contrastive=replace(cfg.contrastive, mode="dense", **change))
        for seed in seeds:
            tp_dir = out / name / f"seed{seed}" / "tp"
            cmd_target_pretrain(run_cfg, seed, tp_dir, init)
            res = cmd_finetune(run_cfg, seed, out / name / f"seed{seed}" / "ft", tp_dir, dataset=ds)
            vals.append(_final_metric(res))
        rows.append({"variant": name, "anchor_weight": run_cfg.contrastive.anchor_weight,
                     "affine": run_cfg.contrastive.affine, "miou": _mean(vals)})
    write_table(out / "ablation.csv", ["variant", "anchor_weight", "affine", "miou"],
                [[r["variant"], r["anchor_weight"], r["affine"], repr(r["miou"])] for r in rows])
    return rows
