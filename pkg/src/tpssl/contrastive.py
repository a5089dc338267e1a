"""Contrastive target pretraining.

BYOL and InfoNCE objectives, the EMA target network, the L2 anchor that keeps
target-pretrained encoder weights close to the generic pretrained ones, and a
dense (per-pixel) BYOL variant that aligns online and target feature maps by
inverse-warping both into the original image frame.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import (AffinePolicy, AffineTransform, PhotometricPolicy, byol_photometric_pair,
                      invert_affine, make_view_pair, warp)
from .evaluate import MetricRecord
from .models import ModelState


class DegenerateInputError(ValueError):
    """A zero-norm vector was passed to a cosine-based loss."""


class NoCorrespondenceError(RuntimeError):
    """Two warped views share no valid pixel."""


class StructuralError(ValueError):
    """Parameter collections do not line up."""


@dataclass
class ContrastiveConfig:
    """Target-pretraining hyperparameters.

    The batch size / lr / momentum / epochs defaults are the CIFAR-scale BYOL
    reference values; desk-scale runs override them.
    """

    temperature: float = 0.2
    ema_momentum: float = 0.99
    anchor_weight: float = 1e-2
    mode: str = "global"
    objective: str = "byol"
    symmetric: bool = True
    affine: bool = True
    epochs: int = 300
    batch_size: int = 256
    lr: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "cosine"
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if self.anchor_weight < 0:
            raise ValueError("anchor_weight must be nonnegative")
        if self.mode not in ("global", "dense"):
            raise ValueError(f"mode must be 'global' or 'dense', got {self.mode!r}")
        if self.objective not in ("byol", "infonce"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.objective == "infonce" and self.mode == "dense":
            raise ValueError("the InfoNCE objective is only supported in global mode")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def _check_nonzero(v: torch.Tensor, dim: int, what: str) -> None:
    if (v.norm(dim=dim) == 0).any():
        raise DegenerateInputError(f"{what} contains a zero-norm vector")


def info_nce(embeddings: torch.Tensor, positive_index, temperature: float) -> torch.Tensor:
    """Mean InfoNCE over anchors with cosine similarities.

    ``positive_index[i]`` is the row paired with anchor ``i``; the denominator
    runs over every ``k != i``.
    """
    n = embeddings.shape[0]
    if n < 2:
        raise ValueError("info_nce needs at least two embeddings")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    _check_nonzero(embeddings, 1, "embeddings")
    pos = torch.as_tensor(np.asarray(positive_index), dtype=torch.long)
    if pos.shape != (n,) or ((pos == torch.arange(n)) | (pos < 0) | (pos >= n)).any():
        raise ValueError("positive_index must map each anchor to a different valid row")
    z = F.normalize(embeddings, dim=1)
    logits = z @ z.t() / temperature
    eye = torch.eye(n, dtype=torch.bool)
    logits = logits.masked_fill(eye, float("-inf"))
    return F.cross_entropy(logits, pos)


def info_nce_views(z1: torch.Tensor, z2: torch.Tensor, temperature: float) -> torch.Tensor:
    """InfoNCE over two stacked views; row i of ``z1`` pairs with row i of ``z2``."""
    b = z1.shape[0]
    pos = torch.cat([torch.arange(b, 2 * b), torch.arange(b)])
    return info_nce(torch.cat([z1, z2]), pos, temperature)


def byol_loss(online_projection: torch.Tensor, target_projection: torch.Tensor,
              predictor: Callable | None = None) -> torch.Tensor:
    """Mean negative cosine between ``predictor(online)`` and ``target`` over dim 1."""
    p = online_projection if predictor is None else predictor(online_projection)
    t = target_projection.detach()
    _check_nonzero(p, 1, "prediction")
    _check_nonzero(t, 1, "target projection")
    cos = (p * t).sum(1) / (p.norm(dim=1) * t.norm(dim=1))
    return -cos.mean()


def _inverse_warp_all(fmap: torch.Tensor, transforms: Sequence[AffineTransform]):
    inv = [invert_affine(t) for t in transforms]
    res = warp(fmap, inv)
    return res.image, res.validity_mask


def _view_mask_at(fmap: torch.Tensor, view_mask: torch.Tensor | None) -> torch.Tensor:
    if view_mask is None:
        return torch.ones(fmap.shape[0], 1, *fmap.shape[-2:], dtype=fmap.dtype)
    # A feature cell counts as valid only if its whole receptive patch was.
    pooled = F.adaptive_avg_pool2d(view_mask.to(fmap.dtype), fmap.shape[-2:])
    return (pooled >= 1 - 1e-6).to(fmap.dtype)


def dense_byol_loss(online_feature_map: torch.Tensor, target_feature_map: torch.Tensor,
                    t1: Sequence[AffineTransform] | AffineTransform,
                    t2: Sequence[AffineTransform] | AffineTransform,
                    predictor: Callable | None = None,
                    view_masks: tuple | None = None) -> torch.Tensor:
    """Per-pixel BYOL loss between two views after mapping both back to the source frame.

    ``online_feature_map`` is the online projection of view 1 (the predictor is
    applied in the view frame), ``target_feature_map`` the target projection of
    view 2. Both are inverse-warped, their validity masks intersected, and the
    negative cosine averaged over surviving pixels. ``view_masks`` optionally
    carries each view's image-level validity mask.
    """
    if online_feature_map.shape != target_feature_map.shape:
        raise ValueError("feature maps must have identical shapes")
    b = online_feature_map.shape[0]
    if isinstance(t1, AffineTransform):
        t1 = [t1] * b
    if isinstance(t2, AffineTransform):
        t2 = [t2] * b
    p = online_feature_map if predictor is None else predictor(online_feature_map)
    t = target_feature_map.detach()
    m1, m2 = (None, None) if view_masks is None else view_masks
    vm1 = _view_mask_at(p, m1)
    vm2 = _view_mask_at(t, m2)

    p_back, v1 = _inverse_warp_all(p, t1)
    t_back, v2 = _inverse_warp_all(t, t2)
    # Mask warps are linear too; requiring ~1 keeps only fully valid bilinear taps.
    vm1_back = warp(vm1, [invert_affine(a) for a in t1]).image
    vm2_back = warp(vm2, [invert_affine(a) for a in t2]).image
    valid = v1 * v2 * (vm1_back >= 1 - 1e-6) * (vm2_back >= 1 - 1e-6)
    valid = valid[:, 0].bool()
    count = int(valid.sum())
    if count == 0:
        raise NoCorrespondenceError("views share no valid pixel after inverse warping")

    pv = p_back.permute(0, 2, 3, 1)[valid]
    tv = t_back.permute(0, 2, 3, 1)[valid]
    return byol_loss(pv, tv)


def _params(x) -> list[torch.Tensor]:
    if isinstance(x, nn.Module):
        return list(x.parameters())
    if isinstance(x, Mapping):
        return list(x.values())
    return list(x)


@torch.no_grad()
def ema_update(target_params, online_params, m: float):
    """In place ``target <- m * target + (1 - m) * online``; returns ``target_params``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("EMA momentum must lie in [0, 1]")
    tgt, onl = _params(target_params), _params(online_params)
    if len(tgt) != len(onl) or any(a.shape != b.shape for a, b in zip(tgt, onl)):
        raise StructuralError("target and online parameters are not shape compatible")
    for t, o in zip(tgt, onl):
        if m == 0.0:
            t.copy_(o)
        elif m != 1.0:
            t.mul_(m).add_(o.detach(), alpha=1.0 - m)
    return target_params


class AnchorSnapshot:
    """Frozen copy of encoder parameters (the generic pretrained weights or an epoch-T snapshot)."""

    def __init__(self, params: Mapping[str, torch.Tensor], epoch: int | None = None,
                 source: str | None = None):
        self._params = {k: v.detach().clone() for k, v in params.items()}
        for v in self._params.values():
            v.requires_grad_(False)
        self.epoch = epoch
        self.source = source

    @classmethod
    def from_module(cls, module: nn.Module, epoch: int | None = None, source: str | None = None):
        return cls(dict(module.named_parameters()), epoch=epoch, source=source)

    def names(self) -> list[str]:
        return list(self._params)

    def tensor(self, name: str) -> torch.Tensor:
        return self._params[name].clone()

    def items(self):
        # Read-only view for the regularizer; callers must not write into these.
        return self._params.items()

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self._params):
            h.update(k.encode())
            h.update(self._params[k].numpy().astype("<f4").tobytes())
        return h.hexdigest()


def anchor_regularizer(phi, anchor: AnchorSnapshot, anchor_weight: float) -> torch.Tensor:
    """``anchor_weight * sum((phi - phi_pre) ** 2)`` over all anchored parameters."""
    if anchor_weight < 0:
        raise ValueError("anchor_weight must be nonnegative")
    named = dict(phi.named_parameters()) if isinstance(phi, nn.Module) else dict(phi)
    if set(named) != set(anchor.names()):
        raise StructuralError("parameter names differ from the anchor snapshot")
    total = None
    for name, ref in anchor.items():
        p = named[name]
        if p.shape != ref.shape:
            raise StructuralError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(ref.shape)}")
        term = ((p - ref) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return anchor_weight * total


def _make_optimizer(state: ModelState, config: ContrastiveConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(state.online_parameters(), lr=config.lr,
                                weight_decay=config.weight_decay)
    return torch.optim.SGD(state.online_parameters(), lr=config.lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def contrastive_loss(state: ModelState, batch: torch.Tensor, config: ContrastiveConfig,
                     rng: np.random.Generator,
                     photometric=None, affine: AffinePolicy | None = None) -> torch.Tensor:
    """Contrastive objective (without the anchor) on one batch of raw images."""
    photometric = photometric if photometric is not None else byol_photometric_pair()
    if config.mode == "dense" and config.affine and affine is None:
        affine = AffinePolicy()
    if config.mode == "global":
        affine = None
    v1, v2, t1, t2 = make_view_pair(batch, photometric, affine, rng)

    if config.mode == "global":
        z1 = state.projector(state.encoder(v1))
        z2 = state.projector(state.encoder(v2))
        if config.objective == "infonce":
            return info_nce_views(z1, z2, config.temperature)
        with torch.no_grad():
            y1 = state.target_projector(state.target_encoder(v1))
            y2 = state.target_projector(state.target_encoder(v2))
        loss = byol_loss(z1, y2, state.predictor)
        if config.symmetric:
            loss = 0.5 * (loss + byol_loss(z2, y1, state.predictor))
        return loss

    z1 = state.projector(state.encoder.dense(v1))
    z2 = state.projector(state.encoder.dense(v2))
    with torch.no_grad():
        y1 = state.target_projector(state.target_encoder.dense(v1))
        y2 = state.target_projector(state.target_encoder.dense(v2))
    if affine is None:
        m1 = m2 = None
    else:
        ones = torch.ones(batch.shape[0], 1, *batch.shape[-2:], dtype=batch.dtype)
        m1, m2 = warp(ones, t1).validity_mask, warp(ones, t2).validity_mask
    loss = dense_byol_loss(z1, y2, t1, t2, state.predictor, view_masks=(m1, m2))
    if config.symmetric:
        loss = 0.5 * (loss + dense_byol_loss(z2, y1, t2, t1, state.predictor, view_masks=(m2, m1)))
    return loss


def target_pretrain_step(state: ModelState, batch: torch.Tensor, anchor: AnchorSnapshot | None,
                         config: ContrastiveConfig, rng: np.random.Generator,
                         photometric=None, affine: AffinePolicy | None = None):
    """One SGD step on contrastive loss + anchor term, then the EMA target update.

    Only the online encoder, projector and predictor move; the classifier is
    never touched. With ``anchor=None`` this is plain contrastive pretraining.
    """
    if state.optimizer is None:
        state.optimizer = _make_optimizer(state, config)
    state.encoder.train()
    state.projector.train()
    state.predictor.train()

    con = contrastive_loss(state, batch, config, rng, photometric, affine)
    reg = (anchor_regularizer(state.encoder, anchor, config.anchor_weight)
           if anchor is not None else torch.zeros(()))
    loss = con + reg
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(state.target_pair(), state.online_pair(), config.ema_momentum)
    state.step += 1
    rec = MetricRecord(step=state.step, metrics={
        "loss": float(loss.detach()),
        "contrastive_loss": float(con.detach()),
        "anchor_loss": float(reg.detach()),
        "lr": float(state.optimizer.param_groups[0]["lr"]),
    })
    return state, rec


@dataclass
class PretrainResult:
    state: ModelState
    records: list[MetricRecord]
    snapshots: dict[int, AnchorSnapshot] = field(default_factory=dict)
    anchor_digest: str | None = None

    @property
    def encoder_state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state.encoder.state_dict().items()}


def _lr_at(config: ContrastiveConfig, step: int, total: int) -> float:
    if config.schedule == "constant" or total <= 1:
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))


def run_target_pretrain(images: torch.Tensor, state: ModelState, anchor: AnchorSnapshot | None,
                        config: ContrastiveConfig, rng: np.random.Generator,
                        snapshot_epochs: Iterable[int] = (), photometric=None,
                        affine: AffinePolicy | None = None,
                        on_epoch: Callable[[int, MetricRecord], None] | None = None) -> PretrainResult:
    """Run ``config.epochs`` epochs of target pretraining over all images (labels unused).

    Returns the final state, one averaged MetricRecord per epoch, and encoder
    snapshots at each requested epoch (epoch 0 is the initialization).
    """
    n = images.shape[0]
    if n == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    snaps = sorted(set(snapshot_epochs))
    if snaps and snaps[-1] > config.epochs:
        raise ValueError(f"snapshot epoch {snaps[-1]} is beyond the {config.epochs} configured epochs")
    bs = min(config.batch_size, n)
    steps_per_epoch = math.ceil(n / bs)
    total = steps_per_epoch * config.epochs
    if state.optimizer is None:
        state.optimizer = _make_optimizer(state, config)

    result = PretrainResult(state, [], anchor_digest=anchor.digest() if anchor else None)
    if 0 in snaps:
        result.snapshots[0] = AnchorSnapshot.from_module(state.encoder, epoch=0)
    step = 0
    for epoch in range(1, config.epochs + 1):
        perm = torch.from_numpy(rng.permutation(n))
        sums: dict[str, float] = {}
        for i in range(steps_per_epoch):
            idx = perm[i * bs:(i + 1) * bs]
            for g in state.optimizer.param_groups:
                g["lr"] = _lr_at(config, step, total)
            _, rec = target_pretrain_step(state, images[idx], anchor, config, rng, photometric, affine)
            step += 1
            for k, v in rec.metrics.items():
                sums[k] = sums.get(k, 0.0) + v
        rec = MetricRecord(step=state.step, epoch=epoch,
                           metrics={k: v / steps_per_epoch for k, v in sums.items()})
        result.records.append(rec)
        if on_epoch is not None:
            on_epoch(epoch, rec)
        if epoch in snaps:
            result.snapshots[epoch] = AnchorSnapshot.from_module(state.encoder, epoch=epoch)
    return result
