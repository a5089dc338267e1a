"""Semi-supervised finetuning.

Supervised cross-entropy on labeled data plus an unlabeled consistency term:
FixMatch pseudo-labeling, Mean Teacher consistency, or CutMix mixing for
segmentation.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import PhotometricPolicy, apply_photometric, strong_augment, weak_augment
from .contrastive import ema_update
from .evaluate import MetricRecord

LEARNERS = ("fixmatch", "mean_teacher", "cutmix")


class DataError(ValueError):
    """Labels outside the valid class range."""


@dataclass
class SSLConfig:
    """Finetuning hyperparameters; defaults are the FixMatch CIFAR settings."""

    confidence_threshold: float = 0.95
    unlabeled_weight: float = 1.0
    unlabeled_ratio: int = 7
    batch_size: int = 64
    learner: str = "fixmatch"
    epochs: int = 10
    steps_per_epoch: int = 50
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    ema_momentum: float = 0.99
    schedule: str = "cosine"
    optimizer: str = "sgd"

    def __post_init__(self):
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        if self.unlabeled_ratio < 1:
            raise ValueError("unlabeled_ratio must be >= 1")
        if self.unlabeled_weight < 0:
            raise ValueError("unlabeled_weight must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learner not in LEARNERS:
            raise ValueError(f"learner must be one of {LEARNERS}, got {self.learner!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class PseudoLabelBatch:
    labels: torch.Tensor
    mask: torch.Tensor
    confidence: torch.Tensor

    @property
    def mask_rate(self) -> float:
        return float(self.mask.float().mean()) if self.mask.numel() else 0.0


def supervised_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy; works for [n, K] logits or [n, K, H, W] maps."""
    k = logits.shape[1]
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k})")
    return F.cross_entropy(logits, labels)


@torch.no_grad()
def fixmatch_pseudo_labels(weak_logits: torch.Tensor, confidence_threshold: float) -> PseudoLabelBatch:
    probs = torch.softmax(weak_logits.detach(), dim=1)
    # torch.max returns the first maximal index, i.e. the lowest class on ties.
    conf, labels = probs.max(dim=1)
    return PseudoLabelBatch(labels=labels, mask=conf >= confidence_threshold, confidence=conf)


def fixmatch_unlabeled_loss(strong_logits: torch.Tensor, pseudo: PseudoLabelBatch) -> torch.Tensor:
    """Masked cross-entropy summed over confident entries, divided by the total entry count."""
    m = pseudo.mask.numel()
    if m == 0 or not pseudo.mask.any():
        return strong_logits.sum() * 0.0
    ce = F.cross_entropy(strong_logits, pseudo.labels, reduction="none")
    return (ce * pseudo.mask.to(ce.dtype)).sum() / m


def mean_teacher_consistency(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """MSE between student and teacher softmax outputs, averaged over samples and classes."""
    ps = torch.softmax(student_logits, dim=1)
    pt = torch.softmax(teacher_logits.detach(), dim=1)
    return ((ps - pt) ** 2).mean()


def cutmix_mask(height: int, width: int, rect) -> torch.Tensor:
    """Binary [H, W] mask that is 1 inside ``rect = (top, left, h, w)``."""
    top, left, h, w = (int(v) for v in rect)
    if top < 0 or left < 0 or top + max(h, 0) > height or left + max(w, 0) > width:
        raise ValueError(f"rectangle {rect} leaves the {height}x{width} frame")
    mask = torch.zeros(height, width)
    if h > 0 and w > 0:
        mask[top:top + h, left:left + w] = 1.0
    return mask


def cutmix_mix(x1: torch.Tensor, x2: torch.Tensor, rect):
    """``mask * x1 + (1 - mask) * x2`` with the mask set inside ``rect``."""
    if x1.shape != x2.shape:
        raise ValueError("cutmix inputs must have identical shapes")
    mask = cutmix_mask(x1.shape[-2], x1.shape[-1], rect).to(x1.dtype)
    return mask * x1 + (1 - mask) * x2, mask


def _mix_with(mask: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # mask: [H, W] or [B, 1, H, W]
    return mask * a + (1 - mask) * b


def cutmix_consistency(teacher_pred1: torch.Tensor, teacher_pred2: torch.Tensor,
                       student_pred_mixed: torch.Tensor, rect,
                       confidence_threshold: float = 0.0) -> torch.Tensor:
    """Masked squared error between student softmax and the mixed teacher softmax.

    Predictions are logit maps [B, K, H, W]. ``rect`` is a single rectangle or a
    precomputed [B, 1, H, W] mix mask. Pixels whose mixed teacher confidence is
    below the threshold contribute zero; the sum is normalized by the pixel count.
    """
    h, w = student_pred_mixed.shape[-2:]
    mask = rect if isinstance(rect, torch.Tensor) else cutmix_mask(h, w, rect)
    mask = mask.to(student_pred_mixed.dtype)
    with torch.no_grad():
        pt = _mix_with(mask, torch.softmax(teacher_pred1, 1), torch.softmax(teacher_pred2, 1))
        conf = pt.max(dim=1).values
        keep = (conf >= confidence_threshold).to(pt.dtype)
    ps = torch.softmax(student_pred_mixed, 1)
    per_pixel = ((ps - pt) ** 2).mean(dim=1)
    return (per_pixel * keep).sum() / keep.numel()


def random_rects(n: int, height: int, width: int, rng: np.random.Generator,
                 area: float = 0.5) -> list[tuple[int, int, int, int]]:
    """Random rectangles covering ``area`` of the frame (CutMix box sampling)."""
    rh = max(1, int(round(height * math.sqrt(area))))
    rw = max(1, int(round(width * math.sqrt(area))))
    tops = rng.integers(0, height - rh + 1, size=n)
    lefts = rng.integers(0, width - rw + 1, size=n)
    return [(int(t), int(l), rh, rw) for t, l in zip(tops, lefts)]


@dataclass
class FinetuneState:
    model: nn.Module
    teacher: nn.Module | None = None
    optimizer: torch.optim.Optimizer | None = field(default=None, repr=False)
    step: int = 0

    @classmethod
    def create(cls, model: nn.Module, config: SSLConfig) -> "FinetuneState":
        teacher = None
        if config.learner in ("mean_teacher", "cutmix"):
            teacher = copy.deepcopy(model)
            for p in teacher.parameters():
                p.requires_grad_(False)
        return cls(model=model, teacher=teacher, optimizer=_make_optimizer(model, config))


def _make_optimizer(model: nn.Module, config: SSLConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                           nesterov=config.nesterov and config.momentum > 0,
                           weight_decay=config.weight_decay)


def ssl_total_loss(labeled, unlabeled, state: FinetuneState, config: SSLConfig):
    """Supervised CE plus ``unlabeled_weight`` times the learner's consistency term.

    ``labeled`` is ``(x, y)``. ``unlabeled`` depends on the learner:
    ``(weak, strong)`` for fixmatch, ``(student_view, teacher_view)`` for
    mean_teacher, ``(x1, x2, mix_mask)`` for cutmix. It is ignored (and may be
    None) when ``unlabeled_weight`` is 0.
    """
    x, y = labeled
    model = state.model
    use_unlabeled = config.unlabeled_weight > 0 and unlabeled is not None
    metrics: dict[str, float] = {}

    if not use_unlabeled:
        sup = supervised_ce(model(x), y)
        unsup = torch.zeros(())
        metrics["mask_rate"] = 0.0
    elif config.learner == "fixmatch":
        weak, strong = unlabeled
        with torch.no_grad():
            pseudo = fixmatch_pseudo_labels(model(weak), config.confidence_threshold)
        logits = model(torch.cat([x, strong]))
        sup = supervised_ce(logits[:x.shape[0]], y)
        unsup = fixmatch_unlabeled_loss(logits[x.shape[0]:], pseudo)
        metrics["mask_rate"] = pseudo.mask_rate
    elif config.learner == "mean_teacher":
        student_view, teacher_view = unlabeled
        logits = model(torch.cat([x, student_view]))
        sup = supervised_ce(logits[:x.shape[0]], y)
        with torch.no_grad():
            t_logits = state.teacher(teacher_view)
        unsup = mean_teacher_consistency(logits[x.shape[0]:], t_logits)
        metrics["mask_rate"] = 1.0
    else:
        x1, x2, mix = unlabeled
        with torch.no_grad():
            t1, t2 = state.teacher(x1), state.teacher(x2)
        mixed = _mix_with(mix, x1, x2)
        logits = model(torch.cat([x, mixed]))
        sup = supervised_ce(logits[:x.shape[0]], y)
        unsup = cutmix_consistency(t1, t2, logits[x.shape[0]:], mix, config.confidence_threshold)
        with torch.no_grad():
            pt = _mix_with(mix, torch.softmax(t1, 1), torch.softmax(t2, 1))
            metrics["mask_rate"] = float((pt.max(1).values >= config.confidence_threshold).float().mean())

    total = sup + config.unlabeled_weight * unsup if use_unlabeled else sup
    metrics.update(loss=float(total.detach()), sup_loss=float(sup.detach()),
                   unsup_loss=float(unsup.detach()))
    return total, MetricRecord(step=state.step, metrics=metrics)


def _flip_pair(x: torch.Tensor, y: torch.Tensor, rng: np.random.Generator):
    flip = torch.from_numpy(rng.random(x.shape[0]) < 0.5)
    x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
    y = torch.where(flip.view(-1, 1, 1), y.flip(-1), y)
    return x, y


SEG_PHOTOMETRIC = PhotometricPolicy(flip_prob=0.0, blur_prob=0.0, grayscale_prob=0.0,
                                    crop_scale=None)


def prepare_batches(x_l: torch.Tensor, y_l: torch.Tensor, x_u: torch.Tensor | None,
                    config: SSLConfig, rng: np.random.Generator, task: str = "classification"):
    """Apply the learner's augmentations to raw labeled/unlabeled images."""
    if task == "segmentation":
        x_l, y_l = _flip_pair(x_l, y_l, rng)
    else:
        x_l = weak_augment(x_l, rng)
    if x_u is None:
        return (x_l, y_l), None
    if config.learner == "fixmatch":
        if task == "segmentation":
            raise ValueError("the fixmatch learner is implemented for classification only")
        return (x_l, y_l), (weak_augment(x_u, rng), strong_augment(x_u, rng))
    if config.learner == "mean_teacher":
        if task == "segmentation":
            return (x_l, y_l), (apply_photometric(x_u, SEG_PHOTOMETRIC, rng), x_u)
        return (x_l, y_l), (weak_augment(x_u, rng), weak_augment(x_u, rng))
    # cutmix pairs consecutive halves of the unlabeled batch.
    half = x_u.shape[0] // 2
    if half == 0:
        raise ValueError("cutmix needs at least two unlabeled images per step")
    x1, x2 = x_u[:half], x_u[half:2 * half]
    h, w = x_u.shape[-2:]
    rects = random_rects(half, h, w, rng)
    mix = torch.stack([cutmix_mask(h, w, r) for r in rects]).unsqueeze(1).to(x_u.dtype)
    return (x_l, y_l), (x1, x2, mix)


def finetune_step(state: FinetuneState, batches, config: SSLConfig, rng: np.random.Generator,
                  task: str = "classification"):
    """One optimizer step on ``ssl_total_loss`` from raw ``(x_l, y_l, x_u)`` batches.

    The teacher (mean_teacher / cutmix) is refreshed by EMA after the step.
    """
    x_l, y_l, x_u = batches
    if config.unlabeled_weight == 0:
        x_u = None
    labeled, unlabeled = prepare_batches(x_l, y_l, x_u, config, rng, task)
    state.model.train()
    loss, rec = ssl_total_loss(labeled, unlabeled, state, config)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    if state.teacher is not None:
        ema_update(state.teacher, state.model, config.ema_momentum)
    state.step += 1
    rec.step = state.step
    rec.metrics["lr"] = float(state.optimizer.param_groups[0]["lr"])
    return state, rec


class _Cycler:
    """Endless, reshuffled stream of index batches."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.buf = np.empty(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        while self.buf.size < k:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.n)])
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


def _lr_at(config: SSLConfig, step: int, total: int) -> float:
    if config.schedule == "constant" or total <= 1:
        return config.lr
    return config.lr * math.cos(7 * math.pi * step / (16 * total))


def run_finetune(state: FinetuneState, labeled_x: torch.Tensor, labeled_y: torch.Tensor,
                 unlabeled, config: SSLConfig, rng: np.random.Generator,
                 task: str = "classification",
                 evaluate: Callable[[nn.Module], dict[str, float]] | None = None,
                 on_epoch: Callable[[int, MetricRecord], None] | None = None):
    """Run ``config.epochs * config.steps_per_epoch`` finetuning steps.

    ``unlabeled`` is anything indexable by an integer array (a tensor or a pool
    wrapper); it is never indexed when ``unlabeled_weight`` is 0. ``evaluate``
    is called on the model at the end of every epoch and its metrics are merged
    into that epoch's record.
    """
    n_l = labeled_x.shape[0]
    if n_l == 0:
        raise ValueError("finetuning needs at least one labeled sample")
    lab = _Cycler(n_l, rng)
    use_u = config.unlabeled_weight > 0 and unlabeled is not None and len(unlabeled) > 0
    unl = _Cycler(len(unlabeled), rng) if use_u else None
    bs = config.batch_size
    n_u = bs * config.unlabeled_ratio
    if config.learner == "cutmix":
        n_u = 2 * max(1, n_u // 2)
    total = config.epochs * config.steps_per_epoch
    records: list[MetricRecord] = []
    for epoch in range(1, config.epochs + 1):
        sums: dict[str, float] = {}
        for _ in range(config.steps_per_epoch):
            for g in state.optimizer.param_groups:
                g["lr"] = _lr_at(config, state.step, total)
            idx = torch.from_numpy(lab.take(bs))
            x_u = unlabeled[unl.take(n_u)] if use_u else None
            _, rec = finetune_step(state, (labeled_x[idx], labeled_y[idx], x_u), config, rng, task)
            for k, v in rec.metrics.items():
                sums[k] = sums.get(k, 0.0) + v
        metrics = {k: v / config.steps_per_epoch for k, v in sums.items()}
        if evaluate is not None:
            metrics.update(evaluate(state.model))
        rec = MetricRecord(step=state.step, epoch=epoch, metrics=metrics)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(epoch, rec)
    return state, records


@torch.no_grad()
def predict(model: nn.Module, images: torch.Tensor, batch_size: int = 500) -> torch.Tensor:
    model.eval()
    out = [model(images[i:i + batch_size]).argmax(1) for i in range(0, images.shape[0], batch_size)]
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)
