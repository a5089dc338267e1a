"""Procedural datasets, PNG directory ingestion and labeled/unlabeled splits."""

from __future__ import annotations

import colorsys
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigurationError

SHAPES = ("circle", "square", "triangle", "cross", "diamond", "ring", "hexagon", "bar")
KINDS = ("shapes_classification", "blobs_segmentation", "external_directory")



@dataclass(frozen=True)
class Appearance:
    """Ranges for the rendered look of a dataset (hue/saturation/value in [0, 1])."""

    fg_hue: tuple[float, float] = (0.0, 1.0)
    fg_sat: tuple[float, float] = (0.3, 1.0)
    fg_val: tuple[float, float] = (0.3, 1.0)
    bg_hue: tuple[float, float] = (0.0, 1.0)
    bg_sat: tuple[float, float] = (0.0, 0.6)
    bg_val: tuple[float, float] = (0.0, 1.0)
    min_contrast: float = 0.25
    scale: tuple[float, float] = (0.35, 0.8)
    max_rotation: float = 20.0
    noise: tuple[float, float] = (0.0, 0.08)
    textures: tuple[str, ...] = ("none", "gradient", "stripes", "checker")
    texture_amp: tuple[float, float] = (0.05, 0.25)


APPEARANCES = {
    # Broad distribution for the generic pretraining stand-in.
    "generic": Appearance(),
    # Bright warm shapes on dark noisy gradients.
    "warm_on_dark": Appearance(fg_hue=(0.0, 0.15), fg_sat=(0.6, 1.0), fg_val=(0.75, 1.0),
                               bg_hue=(0.55, 0.7), bg_sat=(0.2, 0.6), bg_val=(0.05, 0.3),
                               noise=(0.03, 0.08), textures=("gradient",),
                               texture_amp=(0.05, 0.2)),
    # Dark cool shapes on light striped backgrounds.
    "cool_on_light": Appearance(fg_hue=(0.45, 0.6), fg_sat=(0.5, 1.0), fg_val=(0.1, 0.35),
                                bg_hue=(0.1, 0.2), bg_sat=(0.0, 0.3), bg_val=(0.7, 0.95),
                                noise=(0.0, 0.03), textures=("stripes", "checker"),
                                texture_amp=(0.1, 0.25)),
}


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "shapes_classification"
    image_size: tuple[int, int] = (32, 32)
    n_classes: int = 4
    n_samples: int = 2000
    n_test: int = 1000
    seed: int = 0
    appearance: str | Appearance = "warm_on_dark"
    shapes_per_image: tuple[int, int] = (1, 2)
    path: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "shapes_classification":
            if self.n_classes < 2:
                raise ConfigurationError("classification needs K >= 2")
            if self.n_classes > len(SHAPES):
                raise ConfigurationError(
                    f"K={self.n_classes} exceeds the {len(SHAPES)}-shape vocabulary")
        if self.kind == "blobs_segmentation" and not 2 <= self.n_classes <= len(SHAPES) + 1:
            raise ConfigurationError("segmentation needs 2 <= K <= vocabulary + 1")
        if self.kind == "external_directory" and not self.path:
            raise ConfigurationError("external_directory datasets need a path")
        if isinstance(self.appearance, str) and self.appearance not in APPEARANCES:
            raise ConfigurationError(f"unknown appearance preset {self.appearance!r}")

    @property
    def look(self) -> Appearance:
        return APPEARANCES[self.appearance] if isinstance(self.appearance, str) else self.appearance

    def to_dict(self) -> dict:
        d = asdict(self)
        if not isinstance(self.appearance, str):
            d["appearance"] = asdict(self.appearance)
        return d


@dataclass
class Dataset:
    """Train/test images as uint8 HWC arrays; labels are class ids or per-pixel masks."""

    spec: DatasetSpec
    images: np.ndarray
    labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    class_names: tuple[str, ...] = ()

    @property
    def task(self) -> str:
        return "segmentation" if self.labels.ndim == 3 else "classification"

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def tensor(self, test: bool = False) -> torch.Tensor:
        return to_tensor(self.test_images if test else self.images)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        import json
        np.savez_compressed(path, images=self.images, labels=self.labels,
                            test_images=self.test_images, test_labels=self.test_labels,
                            spec=np.array(json.dumps(self.spec.to_dict())),
                            class_names=np.array(list(self.class_names)))
        return path

    @classmethod
    def load(cls, path) -> "Dataset":
        import json
        with np.load(Path(path), allow_pickle=False) as z:
            raw = json.loads(str(z["spec"]))
            if isinstance(raw.get("appearance"), dict):
                raw["appearance"] = Appearance(**{k: tuple(v) if isinstance(v, list) else v
                                                  for k, v in raw["appearance"].items()})
            for k in ("image_size", "shapes_per_image"):
                raw[k] = tuple(raw[k])
            return cls(DatasetSpec(**raw), z["images"], z["labels"], z["test_images"],
                       z["test_labels"], tuple(str(s) for s in z["class_names"]))


def to_tensor(images_u8: np.ndarray) -> torch.Tensor:
    """uint8 [N, H, W, C] -> float32 [N, C, H, W] in [0, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images_u8)).permute(0, 3, 1, 2)
    return x.to(torch.float32) / 255.0


# Rendering

def _polygon_sdf(x, y, n_sides: int, radius: float):
    ang = math.pi / n_sides
    d = None
    for i in range(n_sides):
        th = 2 * math.pi * i / n_sides + ang - math.pi / 2
        e = x * math.cos(th) + y * math.sin(th) - radius * math.cos(ang)
        d = e if d is None else np.maximum(d, e)
    return d


def _box_sdf(x, y, hx, hy):
    return np.maximum(np.abs(x) - hx, np.abs(y) - hy)


def shape_sdf(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Approximate signed distance (in units of the shape radius) for a vocabulary shape."""
    if name == "circle":
        return np.hypot(x, y) - 0.9
    if name == "square":
        return _box_sdf(x, y, 0.75, 0.75)
    if name == "triangle":
        return _polygon_sdf(x, y + 0.15, 3, 1.0)
    if name == "cross":
        return np.minimum(_box_sdf(x, y, 1.0, 0.3), _box_sdf(x, y, 0.3, 1.0))
    if name == "diamond":
        return (np.abs(x) + np.abs(y)) / math.sqrt(2) - 0.7
    if name == "ring":
        return np.abs(np.hypot(x, y) - 0.7) - 0.25
    if name == "hexagon":
        return _polygon_sdf(x, y, 6, 0.9)
    if name == "bar":
        return _box_sdf(x, y, 1.0, 0.35)
    raise ConfigurationError(f"unknown shape {name!r}")


def render_shape_alpha(name: str, size: tuple[int, int], center, radius: float,
                       rotation_deg: float) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of one shape on an H x W grid."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    c, s = math.cos(math.radians(rotation_deg)), math.sin(math.radians(rotation_deg))
    dx, dy = xx - center[0], yy - center[1]
    u = (c * dx + s * dy) / radius
    v = (-s * dx + c * dy) / radius
    d = shape_sdf(name, u, v) * radius
    return np.clip(0.5 - d, 0.0, 1.0)


def _hsv(rng, hue, sat, val) -> np.ndarray:
    hsv = [rng.uniform(*hue) % 1.0, rng.uniform(*sat), rng.uniform(*val)]
    return np.array(colorsys.hsv_to_rgb(*hsv))


def _background(rng, look: Appearance, size) -> tuple[np.ndarray, np.ndarray]:
    h, w = size
    base = _hsv(rng, look.bg_hue, look.bg_sat, look.bg_val)
    tex = look.textures[rng.integers(len(look.textures))]
    amp = rng.uniform(*look.texture_amp)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    th = rng.uniform(0, 2 * math.pi)
    proj = xx * math.cos(th) + yy * math.sin(th)
    if tex == "gradient":
        pattern = proj - proj.mean()
    elif tex == "stripes":
        pattern = 0.5 * np.sign(np.sin(2 * math.pi * proj * rng.uniform(3, 6)))
    elif tex == "checker":
        k = rng.integers(3, 7)
        pattern = ((np.floor(xx * k) + np.floor(yy * k)) % 2) - 0.5
    else:
        pattern = np.zeros((h, w))
    bg = np.clip(base[None, None] + amp * pattern[..., None], 0, 1)
    return bg, base


def _foreground_color(rng, look: Appearance, bg_base: np.ndarray) -> np.ndarray:
    # Redraw until the shape is distinguishable from the background.
    for _ in range(20):
        fg = _hsv(rng, look.fg_hue, look.fg_sat, look.fg_val)
        if np.abs(fg - bg_base).max() >= look.min_contrast:
            return fg
    return fg


def _place(rng, look: Appearance, size):
    h, w = size
    r = rng.uniform(*look.scale) * min(h, w) / 2
    r = min(r, min(h, w) / 2 - 1)
    cx = rng.uniform(r, w - r)
    cy = rng.uniform(r, h - r)
    rot = rng.uniform(-look.max_rotation, look.max_rotation)
    return (cx, cy), r, rot


def _finish(rng, look: Appearance, img: np.ndarray) -> np.ndarray:
    sigma = rng.uniform(*look.noise)
    img = img + sigma * rng.standard_normal(img.shape)
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _render_classification(n: int, spec: DatasetSpec, rng: np.random.Generator):
    k = spec.n_classes
    look = spec.look
    labels = np.arange(n) % k
    labels = labels[rng.permutation(n)]
    images = np.empty((n, *spec.image_size, 3), dtype=np.uint8)
    for i, lab in enumerate(labels):
        bg, base = _background(rng, look, spec.image_size)
        fg = _foreground_color(rng, look, base)
        center, r, rot = _place(rng, look, spec.image_size)
        a = render_shape_alpha(SHAPES[lab], spec.image_size, center, r, rot)[..., None]
        images[i] = _finish(rng, look, bg * (1 - a) + fg * a)
    return images, labels.astype(np.int64)


def render_scene(spec: DatasetSpec, rng: np.random.Generator):
    """One segmentation scene: (uint8 image, int mask, list of rendered alphas with classes)."""
    look = spec.look
    bg, base = _background(rng, look, spec.image_size)
    img = bg.copy()
    mask = np.zeros(spec.image_size, dtype=np.int64)
    layers = []
    lo, hi = spec.shapes_per_image
    for _ in range(int(rng.integers(max(lo, 1), hi + 1))):
        cls = int(rng.integers(1, spec.n_classes))
        fg = _foreground_color(rng, look, base)
        center, r, rot = _place(rng, look, spec.image_size)
        a = render_shape_alpha(SHAPES[cls - 1], spec.image_size, center, r, rot)
        img = img * (1 - a[..., None]) + fg * a[..., None]
        mask[a >= 0.5] = cls
        layers.append((cls, a))
    return _finish(rng, look, img), mask, layers


def _render_segmentation(n: int, spec: DatasetSpec, rng: np.random.Generator):
    images = np.empty((n, *spec.image_size, 3), dtype=np.uint8)
    masks = np.empty((n, *spec.image_size), dtype=np.int64)
    for i in range(n):
        images[i], masks[i], _ = render_scene(spec, rng)
    return images, masks


def _stream(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng([seed, {"train": 0, "test": 1}[split]])


def generate_shapes_dataset(spec: DatasetSpec, seed: int | None = None) -> Dataset:
    """Render a class-balanced shapes classification dataset (train and test)."""
    seed = spec.seed if seed is None else seed
    spec = replace(spec, seed=seed)
    if spec.kind != "shapes_classification":
        raise ConfigurationError("generate_shapes_dataset needs kind=shapes_classification")
    x, y = _render_classification(spec.n_samples, spec, _stream(seed, "train"))
    xt, yt = _render_classification(spec.n_test, spec, _stream(seed, "test"))
    return Dataset(spec, x, y, xt, yt, SHAPES[:spec.n_classes])


def generate_blobs_segmentation(spec: DatasetSpec, seed: int | None = None) -> Dataset:
    """Render scenes of 1-2 shapes; masks hold shape class ids with 0 for background."""
    seed = spec.seed if seed is None else seed
    spec = replace(spec, seed=seed)
    if spec.kind != "blobs_segmentation":
        raise ConfigurationError("generate_blobs_segmentation needs kind=blobs_segmentation")
    x, y = _render_segmentation(spec.n_samples, spec, _stream(seed, "train"))
    xt, yt = _render_segmentation(spec.n_test, spec, _stream(seed, "test"))
    return Dataset(spec, x, y, xt, yt, ("background",) + SHAPES[:spec.n_classes - 1])


def load_image_directory(spec: DatasetSpec) -> Dataset:
    """Read ``<path>/{train,test}/<class>/*.png`` (8-bit PNG, intensities mapped to [0, 1])."""
    from PIL import Image

    root = Path(spec.path)
    classes = sorted(p.name for p in (root / "train").iterdir() if p.is_dir())
    if len(classes) < 2:
        raise ConfigurationError(f"{root}/train must contain at least two class directories")

    def read(split):
        xs, ys = [], []
        for k, name in enumerate(classes):
            for f in sorted((root / split / name).glob("*.png")):
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB").resize(spec.image_size[::-1]))
                xs.append(arr)
                ys.append(k)
        if not xs:
            return np.zeros((0, *spec.image_size, 3), np.uint8), np.zeros(0, np.int64)
        return np.stack(xs).astype(np.uint8), np.array(ys, dtype=np.int64)

    x, y = read("train")
    xt, yt = read("test") if (root / "test").is_dir() else (x[:0], y[:0])
    spec = replace(spec, n_classes=len(classes), n_samples=len(x), n_test=len(xt))
    return Dataset(spec, x, y, xt, yt, tuple(classes))


def make_dataset(spec: DatasetSpec, seed: int | None = None) -> Dataset:
    if spec.kind == "shapes_classification":
        return generate_shapes_dataset(spec, seed)
    if spec.kind == "blobs_segmentation":
        return generate_blobs_segmentation(spec, seed)
    return load_image_directory(spec)


# Splits

class UnlabeledPool:
    """Training images with labels withheld; counts how often it is indexed."""

    def __init__(self, images: torch.Tensor):
        self._images = images
        self.access_count = 0

    def __len__(self) -> int:
        return self._images.shape[0]

    def __getitem__(self, idx) -> torch.Tensor:
        self.access_count += 1
        return self._images[idx]


@dataclass
class DatasetSplit:
    labeled_index: np.ndarray
    labeled_images: torch.Tensor
    labeled_targets: torch.Tensor
    unlabeled: UnlabeledPool
    seed: int
    per_class: dict[int, int] = field(default_factory=dict)

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_index.size)


def image_classes(labels: np.ndarray) -> np.ndarray:
    if labels.ndim == 1:
        return labels
    # Segmentation: balance on the dominant foreground class of each image.
    flat = labels.reshape(labels.shape[0], -1)
    k = int(flat.max()) + 1
    counts = np.stack([(flat == c).sum(1) for c in range(1, max(k, 2))], 1)
    return counts.argmax(1) + 1


def select_labeled(labels: np.ndarray, n_labeled: int, seed: int) -> np.ndarray:
    """Indices of a class-balanced labeled subset (counts differ by at most one)."""
    n = labels.shape[0]
    if n_labeled > n:
        raise ConfigurationError(f"n_labeled={n_labeled} exceeds dataset size {n}")
    if n_labeled < 0:
        raise ConfigurationError("n_labeled must be nonnegative")
    if n_labeled == n:
        return np.arange(n)
    rng = np.random.default_rng([seed, 7])
    cls = image_classes(labels)
    classes = np.unique(cls)
    k = len(classes)
    base, extra = divmod(n_labeled, k)
    order = rng.permutation(k)
    want = {int(classes[c]): base + (1 if r < extra else 0) for r, c in enumerate(order)}
    chosen = []
    leftovers = []
    for c in classes:
        pool = rng.permutation(np.flatnonzero(cls == c))
        take = min(want[int(c)], pool.size)
        chosen.append(pool[:take])
        leftovers.append(pool[take:])
    picked = np.concatenate(chosen)
    short = n_labeled - picked.size
    if short > 0:
        rest = rng.permutation(np.concatenate(leftovers))
        picked = np.concatenate([picked, rest[:short]])
    return np.sort(picked)


def split_dataset(dataset: Dataset, n_labeled: int, seed: int,
                  images: torch.Tensor | None = None) -> DatasetSplit:
    """Labeled subset D_L plus the unlabeled pool D_U (all training images)."""
    idx = select_labeled(dataset.labels, n_labeled, seed)
    x = dataset.tensor() if images is None else images
    targets = torch.from_numpy(dataset.labels[idx])
    cls = image_classes(dataset.labels)[idx]
    per_class = {int(c): int((cls == c).sum()) for c in np.unique(cls)}
    return DatasetSplit(idx, x[torch.from_numpy(idx)], targets, UnlabeledPool(x), seed, per_class)
