"""Datasets: image folders and a procedural shapes set with exact attribute ground truth.

Synthetic records are split into content attributes (shape class, position,
size) and style attributes (foreground / background hue buckets). The
attribute oracle recovers them from pixels without any learned model.
"""

import colorsys
import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import InvalidInputError

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
NUM_HUES = 6
CENTER_RANGE = (0.2, 0.8)
SIZE_RANGE = (0.15, 0.35)
CONTENT_KEYS = ("shape_class", "cx", "cy", "size")
STYLE_KEYS = ("fg_hue", "bg_hue")

# fixed saturation / value per layer; hue buckets are 60 degrees apart
FG_SV = (0.9, 0.95)
BG_SV = (0.5, 0.6)
SUPERSAMPLE = 4

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass(frozen=True)
class AttributeRecord:
    """``size`` is the shape's circumradius as a fraction of the image side;
    (cx, cy) are column/row centre fractions. ``rotation`` is None when unknown."""

    shape_class: str
    cx: float
    cy: float
    size: float
    rotation: Optional[float]
    fg_hue: int
    bg_hue: int


def sample_attributes(rng_seed: int, index: int) -> AttributeRecord:
    rng = np.random.default_rng([int(rng_seed), int(index)])
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    size = float(rng.uniform(*SIZE_RANGE))
    # centre range shrinks with the radius so the shape stays inside the frame
    lo, hi = max(CENTER_RANGE[0], size), min(CENTER_RANGE[1], 1.0 - size)
    cx = float(rng.uniform(lo, hi))
    cy = float(rng.uniform(lo, hi))
    rotation = float(rng.uniform(0.0, 2.0 * math.pi))
    bg = int(rng.integers(NUM_HUES))
    fg = (bg + int(rng.integers(1, NUM_HUES))) % NUM_HUES
    return AttributeRecord(shape, cx, cy, size, rotation, fg, bg)


def hue_color(bucket: int, sv) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb((bucket % NUM_HUES) / NUM_HUES, *sv))


def _inside(shape: str, px, py, cx, cy, r, rotation):
    dx, dy = px - cx, py - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    n = 3 if shape == "triangle" else 4
    apothem = r * math.cos(math.pi / n)
    inside = np.ones(np.broadcast(dx, dy).shape, dtype=bool)
    for k in range(n):
        # edge normals sit halfway between consecutive vertices
        a = rotation + math.pi / n + 2 * math.pi * k / n
        inside &= dx * math.cos(a) + dy * math.sin(a) <= apothem
    return inside


def coverage(attrs: AttributeRecord, image_size: int) -> np.ndarray:
    """Fraction of each pixel covered by the shape (SUPERSAMPLE^2 point samples)."""
    n = image_size * SUPERSAMPLE
    t = (np.arange(n) + 0.5) / n
    px, py = t[None, :], t[:, None]
    hit = _inside(attrs.shape_class, px, py, attrs.cx, attrs.cy, attrs.size, attrs.rotation or 0.0)
    return hit.reshape(image_size, SUPERSAMPLE, image_size, SUPERSAMPLE).mean(axis=(1, 3))


def render_synthetic(attrs: AttributeRecord, image_size: int) -> np.ndarray:
    """(H, W, 3) float64 image in [0, 1]."""
    if attrs.shape_class not in SHAPES:
        raise InvalidInputError(f"unknown shape class {attrs.shape_class!r}")
    alpha = coverage(attrs, image_size)[..., None]
    bg = hue_color(attrs.bg_hue, BG_SV)
    fg = hue_color(attrs.fg_hue, FG_SV)
    return bg * (1.0 - alpha) + fg * alpha


# ---------------------------------------------------------------------------
# attribute oracle


def rgb_to_hue(rgb: np.ndarray) -> np.ndarray:
    """Vectorized hue in [0, 1) for (..., 3) arrays."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx, mn = rgb.max(-1), rgb.min(-1)
    delta = np.where(mx - mn > 0, mx - mn, 1.0)
    h = np.where(mx == r, (g - b) / delta % 6.0,
                 np.where(mx == g, (b - r) / delta + 2.0, (r - g) / delta + 4.0))
    return np.where(mx - mn > 0, h / 6.0 % 1.0, 0.0)


def hue_bucket(rgb: np.ndarray) -> np.ndarray:
    return np.round(rgb_to_hue(rgb) * NUM_HUES).astype(int) % NUM_HUES


# circles stay below ~0.02 and polygons above ~0.4 on 32 px renders
MIN_CONTRAST = 0.15
ALPHA_FLOOR = 0.1
SYMMETRY_THRESHOLD = 0.15
AREA_PER_R2 = {"circle": math.pi, "square": 2.0, "triangle": 3.0 * math.sqrt(3.0) / 4.0}


def shape_moments(alpha: np.ndarray, cx: float, cy: float):
    """Normalized |sum alpha * z^k| / sum alpha * |z|^k for k = 3, 4 (z = offset from centroid).

    Three-fold symmetric shapes only excite k = 3, four-fold only k = 4, discs neither.
    """
    h, w = alpha.shape
    ys, xs = np.mgrid[0:h, 0:w]
    z = (xs + 0.5 - cx) + 1j * (ys + 0.5 - cy)
    out = []
    for k in (3, 4):
        num = abs((alpha * z ** k).sum())
        den = (alpha * np.abs(z) ** k).sum()
        out.append(num / den if den > 0 else 0.0)
    return tuple(out)


def extract_attributes_oracle(img: np.ndarray) -> Optional[AttributeRecord]:
    """Recover attributes from an (H, W, 3) image in [0, 1]; None when no foreground is found."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise InvalidInputError(f"expected an (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    border = np.concatenate([img[0], img[-1], img[1:-1, 0], img[1:-1, -1]])
    buckets = hue_bucket(border)
    bg_hue = int(np.bincount(buckets, minlength=NUM_HUES).argmax())
    bg = np.median(border[buckets == bg_hue], axis=0)

    dist = np.linalg.norm(img - bg, axis=-1)
    if dist.max() < MIN_CONTRAST:
        return None
    fg = np.median(img[dist >= 0.75 * dist.max()], axis=0)
    axis = fg - bg
    alpha = np.clip(((img - bg) @ axis) / (axis @ axis), 0.0, 1.0)
    alpha[alpha < ALPHA_FLOOR] = 0.0
    area = alpha.sum()
    if area < 1.0:
        return None

    ys, xs = np.mgrid[0:h, 0:w]
    cxp = (alpha * (xs + 0.5)).sum() / area
    cyp = (alpha * (ys + 0.5)).sum() / area
    m3, m4 = shape_moments(alpha, cxp, cyp)
    if max(m3, m4) < SYMMETRY_THRESHOLD:
        shape = "circle"
    else:
        shape = "triangle" if m3 > m4 else "square"
    radius = math.sqrt(area / AREA_PER_R2[shape])
    fg_hue = int(hue_bucket(fg))
    return AttributeRecord(shape, cxp / w, cyp / h, radius / w, None, fg_hue, bg_hue)


# ---------------------------------------------------------------------------
# datasets


def to_model_range(images01: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) in [0, 1] -> (N, 3, H, W) float32 tensor in [-1, 1]."""
    arr = np.transpose(np.asarray(images01, dtype=np.float32), (0, 3, 1, 2))
    return torch.from_numpy(arr * 2.0 - 1.0)


def to_unit_range(images: torch.Tensor) -> np.ndarray:
    """(N, 3, H, W) tensor in [-1, 1] -> (N, H, W, 3) float64 array clipped to [0, 1]."""
    arr = images.detach().to("cpu", torch.float64).numpy()
    return np.clip((np.transpose(arr, (0, 2, 3, 1)) + 1.0) * 0.5, 0.0, 1.0)


def to_uint8(images01: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images01, 0.0, 1.0) * 255.0).astype(np.uint8)


class ImageDataset:
    """In-memory image tensor with seeded epoch shuffling."""

    def __init__(self, images: torch.Tensor, attributes: Optional[List[AttributeRecord]] = None,
                 names: Optional[List[str]] = None):
        if images.ndim != 4 or images.shape[1] != 3 or len(images) == 0:
            raise InvalidInputError(f"dataset must be a nonempty (N, 3, H, W) tensor, got {tuple(images.shape)}")
        self.images = images
        self.attributes = attributes
        self.names = names

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def epoch_order(self, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if generator is None:
            return torch.arange(len(self))
        return torch.randperm(len(self), generator=generator)

    def batches(self, batch_size: int, generator: Optional[torch.Generator] = None) -> Iterator[torch.Tensor]:
        """One pass; the final batch may be short. Shuffled only when a generator is given."""
        order = self.epoch_order(generator)
        for start in range(0, len(order), batch_size):
            yield self.images[order[start:start + batch_size]]

    def infinite(self, batch_size: int, generator: torch.Generator) -> Iterator[torch.Tensor]:
        """Endless full-size batches drawn from consecutive seeded permutations."""
        buf = []
        while True:
            for idx in self.epoch_order(generator).tolist():
                buf.append(idx)
                if len(buf) == batch_size:
                    yield self.images[torch.tensor(buf)]
                    buf = []


def synthetic_dataset(count: int, seed: int, image_size: int) -> ImageDataset:
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    records = [sample_attributes(seed, i) for i in range(count)]
    images = np.stack([render_synthetic(r, image_size) for r in records])
    return ImageDataset(to_model_range(images), records)


def _center_crop_resize(im: Image.Image, size: int) -> Image.Image:
    w, h = im.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    im = im.crop((left, top, left + side, top + side))
    if side != size:
        im = im.resize((size, size), Image.BICUBIC)
    return im


def load_image(path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = _center_crop_resize(im.convert("RGB"), size)
        return np.asarray(im, dtype=np.float64) / 255.0


def load_image_folder(path, image_size: int) -> ImageDataset:
    """Decodable PNG/JPEG files in filename order, centre-cropped and resized; unreadable files are skipped."""
    root = Path(path)
    if not root.is_dir():
        raise InvalidInputError(f"image folder {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    images, names = [], []
    for f in files:
        try:
            images.append(load_image(f, image_size))
            names.append(f.name)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", f, exc)
    if not images:
        raise InvalidInputError(f"no decodable images in {root}")
    return ImageDataset(to_model_range(np.stack(images)), names=names)


def load_dataset(spec) -> ImageDataset:
    """Build the dataset described by a ``DatasetSpec``."""
    if spec.source == "synthetic":
        if spec.path:
            return load_image_folder(spec.path, spec.image_size)
        return synthetic_dataset(spec.count, spec.seed, spec.image_size)
    if spec.source == "folder":
        return load_image_folder(spec.path, spec.image_size)
    raise InvalidInputError(f"unknown dataset source {spec.source!r}")


# ---------------------------------------------------------------------------
# persistence

ATTRIBUTE_FIELDS = ("index", "file") + tuple(AttributeRecord.__dataclass_fields__)


def save_png(path, image01: np.ndarray) -> None:
    # fixed encoder settings keep reruns byte-identical
    Image.fromarray(to_uint8(image01)).save(path, format="PNG", optimize=False, compress_level=6)


def image_grid(images01: np.ndarray, cols: int, pad: int = 1) -> np.ndarray:
    """Tile (N, H, W, 3) images row-major into one image with ``pad`` white pixels between tiles."""
    n, h, w, c = images01.shape
    rows = -(-n // cols)
    grid = np.ones((rows * (h + pad) + pad, cols * (w + pad) + pad, c))
    for i, img in enumerate(images01):
        r, k = divmod(i, cols)
        top, left = pad + r * (h + pad), pad + k * (w + pad)
        grid[top:top + h, left:left + w] = img
    return grid


def write_synthetic_dataset(out_dir, count: int, seed: int, image_size: int) -> List[AttributeRecord]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    with open(out / "attributes.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ATTRIBUTE_FIELDS)
        writer.writeheader()
        for i in range(count):
            rec = sample_attributes(seed, i)
            name = f"{i:06d}.png"
            save_png(out / name, render_synthetic(rec, image_size))
            writer.writerow({"index": i, "file": name, **asdict(rec)})
            records.append(rec)
    return records


def read_attributes_csv(path) -> List[AttributeRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rotation = row["rotation"]
            records.append(AttributeRecord(row["shape_class"], float(row["cx"]), float(row["cy"]),
                                           float(row["size"]), float(rotation) if rotation else None,
                                           int(row["fg_hue"]), int(row["bg_hue"])))
    return records


def attribute_table(records: Sequence[Optional[AttributeRecord]]):
    """Records as dicts; failed extractions become rows of None."""
    out = []
    for r in records:
        out.append(asdict(r) if r is not None else {k: None for k in AttributeRecord.__dataclass_fields__})
    return out
