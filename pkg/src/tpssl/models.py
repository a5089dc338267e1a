"""Desk-scale networks: a small conv encoder with projector/predictor heads.

The encoder stands in for the ResNet backbones. GroupNorm keeps every
forward pass independent of batch composition, which the determinism
tests rely on.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

WIDTHS = (32, 64, 128, 128)
EMBED_DIM = WIDTHS[-1]
DENSE_DIM = WIDTHS[2]


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Four stride-2 conv blocks.

    ``forward`` returns the globally pooled 128-d embedding; ``dense`` returns
    the stride-8 map after block 3.
    """

    def __init__(self, in_channels: int = 3, widths=WIDTHS):
        super().__init__()
        chans = (in_channels,) + tuple(widths)
        self.blocks = nn.ModuleList(_block(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.out_dim = widths[-1]
        self.dense_dim = widths[2]

    def dense(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks[:3]:
            x = blk(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.blocks[3](self.dense(x))
        return x.mean(dim=(2, 3))


class MLPHead(nn.Module):
    """Linear-norm-ReLU-linear head.

    With ``dense=True`` the layers are 1x1 convolutions so the head runs per pixel.
    """

    def __init__(self, in_dim: int, hidden: int, out_dim: int, dense: bool = False,
                 norm: str = "batch"):
        super().__init__()
        self.dense = dense
        if dense:
            nrm = nn.BatchNorm2d(hidden) if norm == "batch" else nn.GroupNorm(8, hidden)
            self.net = nn.Sequential(
                nn.Conv2d(in_dim, hidden, 1), nrm, nn.ReLU(inplace=True),
                nn.Conv2d(hidden, out_dim, 1))
        else:
            nrm = nn.BatchNorm1d(hidden) if norm == "batch" else nn.LayerNorm(hidden)
            self.net = nn.Sequential(
                nn.Linear(in_dim, hidden), nrm, nn.ReLU(inplace=True),
                nn.Linear(hidden, out_dim))

    def forward(self, x):
        return self.net(x)


class SegmentationHead(nn.Module):
    """1x1 conv classifier on the dense map, bilinearly upsampled to input size."""

    def __init__(self, in_dim: int, n_classes: int):
        super().__init__()
        self.conv = nn.Conv2d(in_dim, n_classes, 1)

    def forward(self, feats: torch.Tensor, size) -> torch.Tensor:
        return F.interpolate(self.conv(feats), size=size, mode="bilinear", align_corners=False)


class Classifier(nn.Module):
    """Encoder plus task head; the finetuning model h(f(x))."""

    def __init__(self, encoder: Encoder, n_classes: int, task: str = "classification"):
        super().__init__()
        self.encoder = encoder
        self.task = task
        if task == "classification":
            self.head = nn.Linear(encoder.out_dim, n_classes)
        elif task == "segmentation":
            self.head = SegmentationHead(encoder.dense_dim, n_classes)
        else:
            raise ValueError(f"unknown task {task!r}")

    def forward(self, x):
        if self.task == "classification":
            return self.head(self.encoder(x))
        return self.head(self.encoder.dense(x), x.shape[-2:])


@dataclass
class ModelState:
    """Online encoder/projector/predictor, an optional classifier and the EMA target copy."""

    encoder: Encoder
    projector: MLPHead
    predictor: MLPHead
    classifier: nn.Module | None = None
    target_encoder: Encoder = None
    target_projector: MLPHead = None
    optimizer: torch.optim.Optimizer | None = field(default=None, repr=False)
    step: int = 0

    def __post_init__(self):
        if self.target_encoder is None:
            self.target_encoder = copy.deepcopy(self.encoder)
        if self.target_projector is None:
            self.target_projector = copy.deepcopy(self.projector)
        for p in list(self.target_encoder.parameters()) + list(self.target_projector.parameters()):
            p.requires_grad_(False)

    @classmethod
    def create(cls, encoder: Encoder | None = None, dense: bool = False,
               proj_hidden: int = 256, proj_dim: int = 64, norm: str = "batch") -> "ModelState":
        encoder = encoder if encoder is not None else Encoder()
        in_dim = encoder.dense_dim if dense else encoder.out_dim
        return cls(
            encoder=encoder,
            projector=MLPHead(in_dim, proj_hidden, proj_dim, dense=dense, norm=norm),
            predictor=MLPHead(proj_dim, proj_hidden, proj_dim, dense=dense, norm=norm),
        )

    def online_parameters(self):
        return (list(self.encoder.parameters()) + list(self.projector.parameters())
                + list(self.predictor.parameters()))

    def online_pair(self) -> nn.ModuleList:
        return nn.ModuleList([self.encoder, self.projector])

    def target_pair(self) -> nn.ModuleList:
        return nn.ModuleList([self.target_encoder, self.target_projector])


def build_encoder(seed: int, in_channels: int = 3) -> Encoder:
    """Freshly initialized encoder; weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Encoder(in_channels)


def build_classifier(encoder: Encoder, n_classes: int, seed: int,
                     task: str = "classification") -> Classifier:
    """Wrap ``encoder`` with a task head whose initialization depends only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Classifier(encoder, n_classes, task)
