"""Photometric and geometric augmentation.

Geometry uses the inverse-mapping convention on a normalized grid: a
transform's 2x3 matrix maps normalized *output* coordinates (x, y in
[-1, 1], pixel centers at (2j + 1) / W - 1) to normalized *input*
coordinates. With that convention composition and inversion are plain
3x3 homogeneous matrix algebra and warping is resolution independent,
so the same transform applies to an image and to its stride-8 feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

_SNAP = 1e-6


class InvertibilityError(ValueError):
    """Raised when inverting an affine transform with a singular linear block."""


@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray
    components: tuple = field(default=(), compare=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __eq__(self, other):
        if not isinstance(other, AffineTransform):
            return NotImplemented
        return np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())

    @property
    def homogeneous(self) -> np.ndarray:
        h = np.eye(3)
        h[:2] = self.matrix
        return h

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix[:, :2]))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]), ("translation",))

    @classmethod
    def rotation(cls, degrees: float) -> "AffineTransform":
        r = math.radians(degrees)
        c, s = math.cos(r), math.sin(r)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0]]), ("rotation",))

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> "AffineTransform":
        sy = sx if sy is None else sy
        return cls(np.array([[sx, 0.0, 0.0], [0.0, sy, 0.0]]), ("scale",))

    @classmethod
    def shearing(cls, x_degrees: float, y_degrees: float = 0.0) -> "AffineTransform":
        kx, ky = math.tan(math.radians(x_degrees)), math.tan(math.radians(y_degrees))
        return cls(np.array([[1.0, kx, 0.0], [ky, 1.0, 0.0]]), ("shear",))

    @classmethod
    def pixel_translation(cls, dx: float, dy: float, height: int, width: int) -> "AffineTransform":
        """Translation that moves image content by (dx, dy) pixels (right/down positive)."""
        return cls.translation(-2.0 * dx / width, -2.0 * dy / height)


def compose_affine(a: AffineTransform, b: AffineTransform) -> AffineTransform:
    """Transform equivalent to warping by ``b`` first and then by ``a``.

    Under inverse mapping ``warp(warp(x, b), a)`` samples ``x`` at ``B @ A @ p``,
    so the composed coordinate matrix is ``B @ A``.
    """
    m = b.homogeneous @ a.homogeneous
    return AffineTransform(m[:2], tuple(b.components) + tuple(a.components))


def invert_affine(a: AffineTransform) -> AffineTransform:
    if abs(a.det) <= 1e-8:
        raise InvertibilityError(f"affine linear block is singular (det={a.det:.3g})")
    return AffineTransform(np.linalg.inv(a.homogeneous)[:2], a.components)


@dataclass(frozen=True)
class AffinePolicy:
    """Distribution over random affine transforms.

    Each of scale, rotation, shear and translation is included independently
    with ``include_prob``; parameters are then drawn from the given ranges.
    Translation is a fraction of image size.
    """

    include_prob: float = 0.5
    scale_range: tuple[float, float] = (0.75, 1.333)
    rotation_range: tuple[float, float] = (-30.0, 30.0)
    shear_range: tuple[float, float] = (-10.0, 10.0)
    translation_range: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        if not 0.0 <= self.include_prob <= 1.0:
            raise ValueError("include_prob must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise ValueError("scale_range must be positive and ordered")
        for name in ("rotation_range", "shear_range", "translation_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered")
        if max(abs(s) for s in self.shear_range) >= 45.0:
            raise ValueError("shear magnitude must stay below 45 degrees")

    @classmethod
    def degenerate(cls) -> "AffinePolicy":
        return cls(scale_range=(1.0, 1.0), rotation_range=(0.0, 0.0),
                   shear_range=(0.0, 0.0), translation_range=(0.0, 0.0))


def sample_affine(policy: AffinePolicy, rng: np.random.Generator) -> AffineTransform:
    # Every draw consumes the same number of variates so streams stay aligned.
    include = rng.random(4) < policy.include_prob
    u = rng.random(6)
    lo, hi = policy.scale_range
    scale = math.exp(math.log(lo) + u[0] * (math.log(hi) - math.log(lo)))
    rot = policy.rotation_range[0] + u[1] * (policy.rotation_range[1] - policy.rotation_range[0])
    shx = policy.shear_range[0] + u[2] * (policy.shear_range[1] - policy.shear_range[0])
    shy = policy.shear_range[0] + u[3] * (policy.shear_range[1] - policy.shear_range[0])
    t_lo, t_hi = policy.translation_range
    # Fraction of image size -> normalized units (the frame spans 2).
    tx = 2.0 * (t_lo + u[4] * (t_hi - t_lo))
    ty = 2.0 * (t_lo + u[5] * (t_hi - t_lo))

    out = AffineTransform.identity()
    if include[0]:
        out = compose_affine(AffineTransform.scaling(scale), out)
    if include[1]:
        out = compose_affine(AffineTransform.rotation(rot), out)
    if include[2]:
        out = compose_affine(AffineTransform.shearing(shx, shy), out)
    if include[3]:
        out = compose_affine(AffineTransform.translation(tx, ty), out)
    return out


@dataclass
class WarpResult:
    image: torch.Tensor
    validity_mask: torch.Tensor


TransformLike = Union[AffineTransform, Sequence[AffineTransform], np.ndarray, torch.Tensor]


def _as_matrices(a: TransformLike, batch: int) -> torch.Tensor:
    if isinstance(a, AffineTransform):
        m = np.broadcast_to(a.matrix, (batch, 2, 3))
    elif isinstance(a, torch.Tensor):
        m = a.detach().to(torch.float64).cpu().numpy()
    elif isinstance(a, np.ndarray):
        m = a
    else:
        m = np.stack([t.matrix for t in a])
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 2:
        m = np.broadcast_to(m, (batch, 2, 3))
    if m.shape != (batch, 2, 3):
        raise ValueError(f"expected {batch} transforms, got array of shape {m.shape}")
    return torch.from_numpy(np.array(m, dtype=np.float64))


def _pixel_centers(n: int) -> torch.Tensor:
    return (2.0 * torch.arange(n, dtype=torch.float64) + 1.0) / n - 1.0


def _snap(p: torch.Tensor) -> torch.Tensor:
    r = torch.round(p)
    return torch.where((p - r).abs() < _SNAP, r, p)


def warp(x: torch.Tensor, a: TransformLike, fill: float = 0.0,
         padding: str = "fill") -> WarpResult:
    """Bilinearly resample ``x`` [B, C, H, W] under affine transform(s) ``a``.

    An output pixel is valid when its source location lies inside the hull of
    input pixel centers. With ``padding="fill"`` invalid pixels take ``fill``;
    with ``padding="border"`` they are sampled from the clamped border (the mask
    still reports them as invalid). Differentiable with respect to ``x``.
    """
    if x.dim() != 4:
        raise ValueError("warp expects a [B, C, H, W] tensor")
    b, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ValueError("warp needs H, W >= 2")
    m = _as_matrices(a, b)

    gy, gx = torch.meshgrid(_pixel_centers(h), _pixel_centers(w), indexing="ij")
    grid = torch.stack([gx.reshape(-1), gy.reshape(-1), torch.ones(h * w, dtype=torch.float64)])
    src = m @ grid  # [B, 2, H*W] normalized input coordinates
    px = _snap(((src[:, 0] + 1.0) * w - 1.0) / 2.0)
    py = _snap(((src[:, 1] + 1.0) * h - 1.0) / 2.0)
    valid = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    px = px.clamp(0, w - 1)
    py = py.clamp(0, h - 1)

    x0 = px.floor().clamp(max=w - 2)
    y0 = py.floor().clamp(max=h - 2)
    wx = (px - x0).to(x.dtype).unsqueeze(1)
    wy = (py - y0).to(x.dtype).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()

    flat = x.reshape(b, c, h * w)

    def tap(yy, xx):
        idx = (yy * w + xx).unsqueeze(1).expand(b, c, -1)
        return torch.gather(flat, 2, idx)

    out = ((1 - wy) * ((1 - wx) * tap(y0, x0) + wx * tap(y0, x0 + 1))
           + wy * ((1 - wx) * tap(y0 + 1, x0) + wx * tap(y0 + 1, x0 + 1)))
    mask = valid.to(x.dtype).reshape(b, 1, h, w)
    out = out.reshape(b, c, h, w)
    if padding == "fill":
        out = torch.where(mask.bool(), out, torch.full_like(out, fill))
    elif padding != "border":
        raise ValueError(f"unknown padding mode {padding!r}")
    return WarpResult(out, mask)


@dataclass(frozen=True)
class PhotometricPolicy:
    """Non-differentiable view augmentation applied before any affine warp.

    Besides the photometric operations proper, the policy carries the random
    resized crop and horizontal flip of the usual contrastive recipe.
    ``crop_scale=None`` disables cropping.
    """

    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    crop_scale: tuple[float, float] | None = (0.35, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)

    def __post_init__(self):
        for name in ("flip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.hue > 0.5:
            raise ValueError("hue strength must be <= 0.5")

    @classmethod
    def noop(cls) -> "PhotometricPolicy":
        return cls(flip_prob=0.0, jitter_prob=0.0, brightness=0.0, contrast=0.0,
                   saturation=0.0, hue=0.0, grayscale_prob=0.0, blur_prob=0.0,
                   crop_scale=None)


def byol_photometric_pair() -> tuple[PhotometricPolicy, PhotometricPolicy]:
    """Asymmetric BYOL-style pair: blur 0.5 on the first view, 0.1 on the second."""
    return PhotometricPolicy(blur_prob=0.5), PhotometricPolicy(blur_prob=0.1)


_LUMA = torch.tensor([0.299, 0.587, 0.114], dtype=torch.float64)


def _gray(x: torch.Tensor) -> torch.Tensor:
    return (x * _LUMA.to(x.dtype).view(1, 3, 1, 1)).sum(1, keepdim=True)


def _hue_matrices(angles: np.ndarray) -> torch.Tensor:
    # Rotation about the gray axis in YIQ space.
    rgb2yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    yiq2rgb = np.linalg.inv(rgb2yiq)
    mats = []
    for th in angles:
        c, s = math.cos(th), math.sin(th)
        rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
        mats.append(yiq2rgb @ rot @ rgb2yiq)
    return torch.from_numpy(np.stack(mats))


def _random_crop_matrices(n: int, policy: PhotometricPolicy, rng: np.random.Generator) -> np.ndarray:
    lo, hi = policy.crop_scale
    r_lo, r_hi = np.log(policy.crop_ratio[0]), np.log(policy.crop_ratio[1])
    u = rng.random((n, 4))
    area = lo + u[:, 0] * (hi - lo)
    ratio = np.exp(r_lo + u[:, 1] * (r_hi - r_lo))
    sx = np.minimum(np.sqrt(area * ratio), 1.0)
    sy = np.minimum(np.sqrt(area / ratio), 1.0)
    cx = (2 * u[:, 2] - 1) * (1 - sx)
    cy = (2 * u[:, 3] - 1) * (1 - sy)
    m = np.zeros((n, 2, 3))
    m[:, 0, 0], m[:, 0, 2] = sx, cx
    m[:, 1, 1], m[:, 1, 2] = sy, cy
    return m


def _gaussian_blur(x: torch.Tensor, sigmas: np.ndarray) -> torch.Tensor:
    b, c, h, w = x.shape
    radius = max(1, int(math.ceil(2 * float(np.max(sigmas)))))
    t = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-(t[None] ** 2) / (2 * torch.from_numpy(sigmas)[:, None] ** 2))
    k = (k / k.sum(1, keepdim=True)).to(x.dtype)
    k = k.repeat_interleave(c, 0)  # [b*c, ksize]
    y = x.reshape(1, b * c, h, w)
    y = F.pad(y, (radius, radius, radius, radius), mode="replicate")
    y = F.conv2d(y, k.view(b * c, 1, 1, -1), groups=b * c)
    y = F.conv2d(y, k.view(b * c, 1, -1, 1), groups=b * c)
    return y.reshape(b, c, h, w)


def apply_photometric(x: torch.Tensor, policy: PhotometricPolicy,
                      rng: np.random.Generator) -> torch.Tensor:
    """Augment a batch [B, C, H, W] in [0, 1]; each sample gets its own draws."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    b = x.shape[0]
    # Fixed draw layout per call keeps the stream position independent of outcomes.
    u = rng.random((b, 10))
    out = x

    if policy.crop_scale is not None:
        out = warp(out, _random_crop_matrices(b, policy, rng), padding="border").image

    flip = torch.from_numpy(u[:, 0] < policy.flip_prob).view(b, 1, 1, 1)
    if flip.any():
        out = torch.where(flip, out.flip(-1), out)

    if out.shape[1] == 3:
        jit = u[:, 1] < policy.jitter_prob
        if jit.any():
            jm = torch.from_numpy(jit).view(b, 1, 1, 1)
            bright = torch.from_numpy(1 + (2 * u[:, 2] - 1) * policy.brightness).to(x.dtype).view(b, 1, 1, 1)
            contr = torch.from_numpy(1 + (2 * u[:, 3] - 1) * policy.contrast).to(x.dtype).view(b, 1, 1, 1)
            sat = torch.from_numpy(1 + (2 * u[:, 4] - 1) * policy.saturation).to(x.dtype).view(b, 1, 1, 1)
            y = (out * bright).clamp(0, 1)
            mean = _gray(y).mean(dim=(2, 3), keepdim=True)
            y = ((y - mean) * contr + mean).clamp(0, 1)
            g = _gray(y)
            y = ((y - g) * sat + g).clamp(0, 1)
            if policy.hue > 0:
                hm = _hue_matrices((2 * u[:, 5] - 1) * policy.hue * 2 * math.pi).to(x.dtype)
                y = torch.einsum("bij,bjhw->bihw", hm, y).clamp(0, 1)
            out = torch.where(jm, y, out)

        gray = torch.from_numpy(u[:, 6] < policy.grayscale_prob).view(b, 1, 1, 1)
        if gray.any():
            out = torch.where(gray, _gray(out).expand_as(out), out)

    blur = u[:, 7] < policy.blur_prob
    if blur.any():
        lo, hi = policy.blur_sigma
        sig = lo + u[:, 8] * (hi - lo)
        out = torch.where(torch.from_numpy(blur).view(b, 1, 1, 1), _gaussian_blur(out, sig), out)

    out = out.clamp(0, 1)
    return out[0] if single else out


def make_view_pair(x: torch.Tensor,
                   photometric: PhotometricPolicy | tuple[PhotometricPolicy, PhotometricPolicy],
                   affine: AffinePolicy | None,
                   rng: np.random.Generator):
    """Two independently augmented views of ``x`` plus their affine transforms.

    Photometric operations run first; the sampled affine warp (fill 0) is
    applied last. Returns ``(view1, view2, t1, t2)`` where ``t1``/``t2`` are
    lists with one transform per sample (identity when ``affine`` is None).
    Draw order: photometric view 1, photometric view 2, affines view 1, view 2.
    """
    if isinstance(photometric, PhotometricPolicy):
        photometric = (photometric, photometric)
    b = x.shape[0]
    p1 = apply_photometric(x, photometric[0], rng)
    p2 = apply_photometric(x, photometric[1], rng)
    if affine is None:
        ident = [AffineTransform.identity()] * b
        return p1, p2, ident, list(ident)
    t1 = [sample_affine(affine, rng) for _ in range(b)]
    t2 = [sample_affine(affine, rng) for _ in range(b)]
    return warp(p1, t1).image, warp(p2, t2).image, t1, t2


# FixMatch-style weak/strong augmentation.

def weak_augment(x: torch.Tensor, rng: np.random.Generator, max_shift: float = 0.125) -> torch.Tensor:
    """Horizontal flip plus a random translation of up to ``max_shift`` of the size."""
    b = x.shape[0]
    u = rng.random((b, 3))
    flip = torch.from_numpy(u[:, 0] < 0.5).view(b, 1, 1, 1)
    out = torch.where(flip, x.flip(-1), x)
    m = np.zeros((b, 2, 3))
    m[:, 0, 0] = m[:, 1, 1] = 1.0
    m[:, 0, 2] = 2 * max_shift * (2 * u[:, 1] - 1)
    m[:, 1, 2] = 2 * max_shift * (2 * u[:, 2] - 1)
    return warp(out, m, padding="border").image


STRONG_PHOTOMETRIC = PhotometricPolicy(flip_prob=0.0, jitter_prob=1.0, brightness=0.5,
                                       contrast=0.5, saturation=0.5, hue=0.15,
                                       grayscale_prob=0.2, blur_prob=0.2, crop_scale=None)


def strong_augment(x: torch.Tensor, rng: np.random.Generator,
                   photometric: PhotometricPolicy = STRONG_PHOTOMETRIC,
                   affine: AffinePolicy | None = AffinePolicy()) -> torch.Tensor:
    """Weak augmentation, full photometric jitter, then a sampled affine warp."""
    out = weak_augment(x, rng)
    out = apply_photometric(out, photometric, rng)
    if affine is not None:
        out = warp(out, [sample_affine(affine, rng) for _ in range(x.shape[0])]).image
    return out
