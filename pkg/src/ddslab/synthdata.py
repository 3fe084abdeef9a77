"""Procedural captioned shapes: renderer, dataset sampler, masks and PNG/JSON export."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ddslab.seeding import derive_seed

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
BACKGROUNDS = ("white", "black", "gray")
ATTRIBUTES = ("shape", "shape_color", "background")
VOCAB = {"shape": SHAPES, "shape_color": COLORS, "background": BACKGROUNDS}

RGB = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (-1.0, -1.0, -1.0),
    "gray": (0.0, 0.0, 0.0),
}

DEFAULT_CANVAS = (16, 16, 3)
SUPERSAMPLE = 4
# radius range as a fraction of the canvas side
RADIUS_FRACTION = (0.22, 0.375)
SQUARE_HALF_SIDE = 0.85  # relative to radius; corners stay inside the bounding disc


class SceneError(ValueError):
    """Raised for scene specs that cannot be rendered."""


@dataclass(frozen=True)
class Caption:
    """Attribute tuple used as a condition. ``None`` marks a null attribute."""

    shape: str | None = None
    shape_color: str | None = None
    background: str | None = None

    def __post_init__(self):
        for name in ATTRIBUTES:
            value = getattr(self, name)
            if value is not None and value not in VOCAB[name]:
                raise SceneError(f"unknown {name} {value!r}; expected one of {VOCAB[name]}")

    @property
    def is_null(self) -> bool:
        return all(getattr(self, a) is None for a in ATTRIBUTES)

    def indices(self) -> tuple[int, int, int]:
        """Vocabulary indices; the null entry of every attribute is ``len(vocab)``."""
        return tuple(
            len(VOCAB[a]) if getattr(self, a) is None else VOCAB[a].index(getattr(self, a))
            for a in ATTRIBUTES
        )

    def override(self, **attrs) -> "Caption":
        return replace(self, **{k: v for k, v in attrs.items() if v is not None})

    def as_dict(self) -> dict:
        return asdict(self)

    def __str__(self) -> str:
        if self.is_null:
            return "<null>"
        parts = [self.shape_color or "*", self.shape or "*", "on", self.background or "*"]
        return " ".join(parts)


NULL = Caption()


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    shape_color: str
    background: str
    center: tuple[float, float]  # (row, col) in pixels
    radius: float
    jitter_seed: int = 0

    @property
    def caption(self) -> Caption:
        return Caption(self.shape, self.shape_color, self.background)

    def with_attrs(self, **attrs) -> "SceneSpec":
        return replace(self, **attrs)

    def to_json(self) -> dict:
        d = asdict(self)
        d["center"] = list(self.center)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["center"] = tuple(float(c) for c in d["center"])
        d["radius"] = float(d["radius"])
        d["jitter_seed"] = int(d["jitter_seed"])
        return cls(**d)


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float32 in [-1, 1]
    specs: list[SceneSpec]
    canvas: tuple[int, int, int]
    generator_seed: int

    def __len__(self) -> int:
        return len(self.specs)

    def __getitem__(self, i):
        return self.images[i], self.specs[i]

    @property
    def items(self) -> list[tuple[np.ndarray, SceneSpec]]:
        return [(self.images[i], s) for i, s in enumerate(self.specs)]

    def captions(self) -> list[Caption]:
        return [s.caption for s in self.specs]


@dataclass(frozen=True)
class EditMask:
    mask: np.ndarray = field(repr=False)  # (H, W) bool, True on the shape

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def _check_spec(spec: SceneSpec, canvas: Sequence[int]) -> None:
    h, w = canvas[0], canvas[1]
    for name in ATTRIBUTES:
        if getattr(spec, name) not in VOCAB[name]:
            raise SceneError(f"unknown {name} {getattr(spec, name)!r}")
    if not spec.radius > 0:
        raise SceneError(f"radius must be positive, got {spec.radius}")
    r0, c0 = spec.center
    if r0 - spec.radius < 0 or c0 - spec.radius < 0 or r0 + spec.radius > h or c0 + spec.radius > w:
        raise SceneError(f"shape at center {spec.center} with radius {spec.radius} leaves the {h}x{w} canvas")


def _inside(spec: SceneSpec, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    r0, c0 = spec.center
    dy, dx = np.broadcast_arrays(rows - r0, cols - c0)
    if spec.shape == "circle":
        return dy * dy + dx * dx <= spec.radius**2
    if spec.shape == "square":
        half = SQUARE_HALF_SIDE * spec.radius
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    # upward equilateral triangle inscribed in the bounding disc
    r = spec.radius
    apex = np.array([-r, 0.0])
    left = np.array([r / 2, -r * np.sqrt(3) / 2])
    right = np.array([r / 2, r * np.sqrt(3) / 2])
    pts = np.stack([dy, dx], axis=-1)

    def side(a, b):
        return (b[1] - a[1]) * (pts[..., 0] - a[0]) - (b[0] - a[0]) * (pts[..., 1] - a[1])

    s1, s2, s3 = side(apex, left), side(left, right), side(right, apex)
    neg = (s1 < 0) | (s2 < 0) | (s3 < 0)
    pos = (s1 > 0) | (s2 > 0) | (s3 > 0)
    return ~(neg & pos)


def coverage(spec: SceneSpec, canvas: Sequence[int] = DEFAULT_CANVAS) -> np.ndarray:
    """Fraction of each pixel covered by the shape (4x4 supersampling, box filter)."""
    _check_spec(spec, canvas)
    h, w = canvas[0], canvas[1]
    k = SUPERSAMPLE
    offs = (np.arange(k) + 0.5) / k
    rows = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    cols = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    hit = _inside(spec, rows[:, None], cols[None, :]).astype(np.float64)
    return hit.reshape(h, k, w, k).mean(axis=(1, 3))


def gen_image(spec: SceneSpec, canvas: Sequence[int] = DEFAULT_CANVAS) -> np.ndarray:
    """Render ``spec`` as an (H, W, C) float32 image in [-1, 1]."""
    cov = coverage(spec, canvas)[..., None]
    c = canvas[2]
    bg = np.asarray(RGB[spec.background][:c])
    fg = np.asarray(RGB[spec.shape_color][:c])
    img = bg * (1.0 - cov) + fg * cov
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def background_image(background: str, canvas: Sequence[int] = DEFAULT_CANVAS) -> np.ndarray:
    h, w, c = canvas
    return np.broadcast_to(np.asarray(RGB[background][:c], dtype=np.float32), (h, w, c)).copy()


def mask_of(spec: SceneSpec, canvas: Sequence[int] = DEFAULT_CANVAS) -> EditMask:
    """On-target region: every pixel the rasterised shape touches, so the rest is pure background."""
    return EditMask(coverage(spec, canvas) > 0)


def random_spec(rng: np.random.Generator, canvas: Sequence[int] = DEFAULT_CANVAS, jitter_seed: int = 0,
                **fixed) -> SceneSpec:
    """Draw attributes uniformly (unless fixed) and jitter geometry from ``jitter_seed``."""
    attrs = {a: fixed.get(a) or VOCAB[a][int(rng.integers(len(VOCAB[a])))] for a in ATTRIBUTES}
    return place(jitter_seed, canvas, **attrs)


def place(jitter_seed: int, canvas: Sequence[int] = DEFAULT_CANVAS, **attrs) -> SceneSpec:
    """Deterministic geometry (center, radius) for the given jitter seed."""
    jr = np.random.default_rng(jitter_seed)
    side = min(canvas[0], canvas[1])
    radius = float(jr.uniform(*RADIUS_FRACTION) * side)
    row = float(jr.uniform(radius, canvas[0] - radius))
    col = float(jr.uniform(radius, canvas[1] - radius))
    return SceneSpec(attrs["shape"], attrs["shape_color"], attrs["background"], (row, col), radius, jitter_seed)


def sample_specs(seed: int, n: int, canvas: Sequence[int] = DEFAULT_CANVAS) -> list[SceneSpec]:
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    specs = []
    for i in range(n):
        item_seed = derive_seed(seed, "item", i)
        rng = np.random.default_rng(item_seed)
        specs.append(random_spec(rng, canvas, jitter_seed=derive_seed(item_seed, "jitter")))
    return specs


def render_all(specs: Iterable[SceneSpec], canvas: Sequence[int] = DEFAULT_CANVAS) -> np.ndarray:
    imgs = [gen_image(s, canvas) for s in specs]
    h, w, c = canvas
    return np.stack(imgs) if imgs else np.zeros((0, h, w, c), np.float32)


def sample_dataset(seed: int, n: int, canvas: Sequence[int] = DEFAULT_CANVAS) -> Dataset:
    """``n`` uniformly drawn scenes. Every item depends only on (seed, index)."""
    canvas = tuple(int(c) for c in canvas)
    specs = sample_specs(seed, n, canvas)
    return Dataset(render_all(specs, canvas), specs, canvas, int(seed))


def permute_captions(dataset: Dataset, seed: int) -> list[tuple[np.ndarray, SceneSpec]]:
    """Pair every image with the spec of a different item (a random derangement)."""
    n = len(dataset)
    if n < 2:
        raise ValueError("caption permutation needs at least two items")
    rng = np.random.default_rng(seed)
    # Sattolo's algorithm: a uniformly random single cycle, hence no fixed points
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(i))
        perm[i], perm[j] = perm[j], perm[i]
    return [(dataset.images[i], dataset.specs[int(perm[i])]) for i in range(n)]


# ---------------------------------------------------------------------------
# export / import

MANIFEST = "manifest.json"


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round((np.asarray(img, np.float64) + 1.0) * 127.5).clip(0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def save_png(img: np.ndarray, path: str | Path) -> None:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[..., None]
    return from_uint8(arr)


def manifest_of(ds: Dataset) -> dict:
    return {
        "format": "ddslab-dataset/1",
        "canvas": list(ds.canvas),
        "seed": ds.generator_seed,
        "count": len(ds),
        "items": [dict(s.to_json(), file=f"{i:06d}.png") for i, s in enumerate(ds.specs)],
    }


def save_dataset(ds: Dataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = manifest_of(ds)
    for item, img in zip(manifest["items"], ds.images):
        save_png(img, out / item["file"])
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    canvas = tuple(manifest["canvas"])
    specs, images = [], []
    for item in manifest["items"]:
        item = dict(item)
        fname = item.pop("file")
        specs.append(SceneSpec.from_json(item))
        images.append(load_png(path / fname))
    if len(specs) != manifest["count"]:
        raise ValueError(f"manifest lists {len(specs)} items but declares count={manifest['count']}")
    return Dataset(np.stack(images), specs, canvas, int(manifest["seed"]))
