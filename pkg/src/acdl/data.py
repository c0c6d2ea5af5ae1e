"""Dataset layout, PPM image codec, preprocessing and the synthetic desk dataset.

On-disk layout::

    <root>/{train,val,test}/{<class0>,<class1>}/*.ppm
    <root>/manifest.json          (synthetic datasets only)

Class 0 is "Non Accident", class 1 is "Accident" unless overridden.
"""

import hashlib
import json
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DatasetError, ImageFormatError, UnsupportedFormatError

DEFAULT_CLASSES = ("Non Accident", "Accident")
SPLITS = ("train", "val", "test")
GENERATOR_VERSION = "synthetic-v1"
GAN_PREFIX = "gan_"


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

@dataclass
class ImageBuffer:
    """``pixels`` is ``[H, W, 3]``: uint8 before normalization, float in [0, 1] after."""

    pixels: np.ndarray
    provenance: str = "real"

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] == 0 or self.pixels.shape[1] == 0:
            raise ImageFormatError(f"image must be [H>0, W>0, C], got {self.pixels.shape}")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @property
    def normalized(self):
        return self.pixels.dtype != np.uint8


_WS = b" \t\n\r\x0b\x0c"


def _header_tokens(data):
    """Yield (token, end_offset) for the 4 PPM header fields, skipping comments."""
    pos, n = 0, len(data)
    for _ in range(4):
        while pos < n and (data[pos] in _WS or data[pos] == ord("#")):
            if data[pos] == ord("#"):
                while pos < n and data[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        yield data[start:pos], pos


def decode_image(data):
    """Decode a binary PPM (P6, maxval 255)."""
    data = bytes(data)
    if data[:2] != b"P6":
        if data[:1] == b"P" and data[1:2] in b"123457":
            raise UnsupportedFormatError(f"only binary PPM (P6) is supported, got {data[:2]!r}")
        raise ImageFormatError("not a PPM image (bad magic)")
    fields = list(_header_tokens(data))
    try:
        width, height, maxval = (int(tok) for tok, _ in fields[1:])
    except ValueError as exc:
        raise ImageFormatError(f"malformed PPM header: {exc}") from None
    end = fields[-1][1]
    if end >= len(data) or data[end] not in _WS:
        raise ImageFormatError("PPM header must end with a single whitespace byte")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"PPM extents must be positive, got {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"PPM maxval {maxval} unsupported (need 255)")
    payload = data[end + 1:]
    need = width * height * 3
    if len(payload) < need:
        raise ImageFormatError(f"truncated PPM payload: {len(payload)} of {need} bytes")
    pixels = np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width, 3).copy()
    return ImageBuffer(pixels)


def to_uint8(pixels):
    """Quantize [0, 1] floats to bytes with round-half-up."""
    return np.clip(np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_image(img):
    """Encode as binary PPM; normalized images are quantized first."""
    pixels = img.pixels if isinstance(img, ImageBuffer) else np.asarray(img)
    if pixels.dtype != np.uint8:
        pixels = to_uint8(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageFormatError(f"PPM needs [H, W, 3] pixels, got {pixels.shape}")
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


def read_image(path):
    return decode_image(Path(path).read_bytes())


def write_image(path, img):
    Path(path).write_bytes(encode_image(img))


# ---------------------------------------------------------------------------
# preprocessing: resize -> normalize -> enhance
# ---------------------------------------------------------------------------

def resize(img, height, width):
    """Bilinear resize with half-pixel centres; 8-bit input is re-quantized round-half-up."""
    if height <= 0 or width <= 0:
        raise ValueError(f"target size must be positive, got {height}x{width}")
    pixels = img.pixels
    if pixels.shape[:2] == (height, width):
        return ImageBuffer(pixels.copy(), img.provenance)
    out = _kernels.resize(np.ascontiguousarray(pixels, dtype=np.float64), height, width)
    if pixels.dtype == np.uint8:
        out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    else:
        out = out.astype(pixels.dtype)
    return ImageBuffer(out, img.provenance)


def normalize(img):
    """8-bit -> float32 via ``x / 255``."""
    if img.pixels.dtype != np.uint8:
        raise ValueError("normalize expects an 8-bit image")
    return ImageBuffer((img.pixels.astype(np.float64) / 255.0).astype(np.float32), img.provenance)


@dataclass
class EnhanceParams:
    saturation_gain: float = 1.3
    contrast_gain: float = 1.2
    brightness_offset: float = 0.05

    def __post_init__(self):
        if self.saturation_gain <= 0 or self.contrast_gain <= 0:
            raise ValueError("enhancement gains must be positive")


LUMA = np.array([0.299, 0.587, 0.114])


def enhance(img, params=None):
    """Saturation about per-pixel luma, then contrast about 0.5, then brightness; clamp to [0, 1]."""
    params = params or EnhanceParams()
    if not img.normalized:
        raise ValueError("enhance expects a normalized image")
    x = img.pixels.astype(np.float64)
    if params.saturation_gain != 1.0:
        luma = (x @ LUMA)[..., None]
        x = luma + params.saturation_gain * (x - luma)
    if params.contrast_gain != 1.0:
        x = (x - 0.5) * params.contrast_gain + 0.5
    if params.brightness_offset != 0.0:
        x = x + params.brightness_offset
    x = np.clip(x, 0.0, 1.0)
    return ImageBuffer(x.astype(img.pixels.dtype), img.provenance)


def preprocess(img, size, params=None):
    """Full chain for an 8-bit image: resize -> normalize -> enhance (skipped when ``params`` is None)."""
    h, w = (size, size) if np.isscalar(size) else size
    out = normalize(resize(img, h, w))
    if params is not None:
        out = enhance(out, params)
    return out


# ---------------------------------------------------------------------------
# dataset index
# ---------------------------------------------------------------------------

@dataclass
class DatasetIndex:
    root: Path
    split: str
    files: dict
    class_names: tuple = DEFAULT_CLASSES

    @property
    def class_to_label(self):
        return {name: i for i, name in enumerate(self.class_names)}

    def items(self):
        """``(path, label)`` pairs, ordered by label then file name."""
        return [(p, label) for label, name in enumerate(self.class_names) for p in self.files[name]]

    def counts(self):
        return {name: len(self.files[name]) for name in self.class_names}

    def __len__(self):
        return sum(self.counts().values())

    def digest(self):
        """SHA-256 over relative paths and file bytes."""
        h = hashlib.sha256()
        for path, label in self.items():
            h.update(f"{label}:{path.relative_to(self.root).as_posix()}\n".encode())
            h.update(path.read_bytes())
        return h.hexdigest()


def _index_split(root, split, class_names):
    split_dir = root / split
    if not split_dir.is_dir():
        raise DatasetError(f"missing split directory: {split_dir}")
    files, owner = {}, {}
    for name in class_names:
        cdir = split_dir / name
        if not cdir.is_dir():
            raise DatasetError(f"missing class directory: {cdir}")
        paths = sorted((p for p in cdir.iterdir() if p.suffix.lower() == ".ppm"), key=lambda p: p.name)
        if not paths:
            raise DatasetError(f"empty class directory: {cdir}")
        for p in paths:
            blob = p.read_bytes()
            try:
                decode_image(blob)
            except ImageFormatError as exc:
                raise DatasetError(f"{p}: {exc}") from None
            key = hashlib.sha256(blob).hexdigest()
            if key in owner and owner[key][0] != name:
                raise DatasetError(f"ambiguous label: {p} duplicates {owner[key][1]} in another class")
            owner.setdefault(key, (name, p))
        files[name] = paths
    return DatasetIndex(root, split, files, tuple(class_names))


def index_dataset(root, class_names=DEFAULT_CLASSES, splits=SPLITS):
    """Index every split under ``root``; returns ``{split: DatasetIndex}``."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    return {s: _index_split(root, s, tuple(class_names)) for s in splits}


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray
    paths: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


def load_split(index, size, params=None):
    """Decode and preprocess every file of ``index`` into a :class:`LabeledBatch`."""
    items = index.items()
    if not items:
        raise DatasetError(f"empty split: {index.root / index.split}")
    images = np.stack([preprocess(read_image(p), size, params).pixels for p, _ in items])
    labels = np.array([label for _, label in items], dtype=np.int64)
    return LabeledBatch(images, labels, [p for p, _ in items])


# ---------------------------------------------------------------------------
# synthetic desk-scale dataset
# ---------------------------------------------------------------------------

def _road_texture(rng, size):
    x = np.linspace(0.0, 1.0, size)
    base = rng.uniform(0.30, 0.45)
    slope = rng.uniform(0.10, 0.20) * rng.choice((-1.0, 1.0))
    tint = rng.uniform(-0.03, 0.03, size=3)
    img = base + slope * x[None, :, None] + tint[None, None, :]
    img = np.broadcast_to(img, (size, size, 3)) + rng.normal(0.0, 0.03, size=(size, size, 3))
    return img


def _blob_cluster(rng, img):
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    for _ in range(int(rng.integers(3, 6))):
        by = cy + rng.normal(0.0, 0.08 * size)
        bx = cx + rng.normal(0.0, 0.08 * size)
        r = rng.uniform(0.05, 0.09) * size
        w = np.exp(-(((yy - by) ** 2 + (xx - bx) ** 2) / (r * r)) ** 2)[..., None]
        color = rng.uniform(0.85, 1.0, size=3)
        img = img * (1 - w) + color * w
    # dark debris next to the bright cluster for contrast
    dy, dx = cy + 0.12 * size, cx - 0.12 * size
    w = np.exp(-(((yy - dy) ** 2 + (xx - dx) ** 2) / (0.05 * size) ** 2) ** 2)[..., None]
    return img * (1 - 0.8 * w)


def synthetic_image(rng, size, label):
    img = _road_texture(rng, size)
    if label == 1:
        img = _blob_cluster(rng, img)
    return to_uint8(np.clip(img, 0.0, 1.0))


def make_synthetic_dataset(root, seed=0, n_per_class=32, size=64,
                           class_names=DEFAULT_CLASSES, force=False):
    """Write a separable two-class dataset in the standard layout plus ``manifest.json``.

    Class 0 is a low-contrast road texture; class 1 adds a bright, high
    contrast blob cluster.  Output is byte-identical for a given seed.
    """
    if size < 16:
        raise ValueError(f"synthetic images need size >= 16, got {size}")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise DatasetError(f"refusing to write into non-empty directory {root} (use force)")
        for s in SPLITS:
            shutil.rmtree(root / s, ignore_errors=True)
        (root / "manifest.json").unlink(missing_ok=True)
    counts = {}
    for si, split in enumerate(SPLITS):
        counts[split] = {}
        for label, name in enumerate(class_names):
            cdir = root / split / name
            cdir.mkdir(parents=True, exist_ok=True)
            rng = np.random.default_rng([seed, si, label])
            for i in range(n_per_class):
                write_image(cdir / f"img_{i:04d}.ppm", ImageBuffer(synthetic_image(rng, size, label)))
            counts[split][name] = n_per_class
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": seed,
        "size": size,
        "n_per_class": n_per_class,
        "classes": list(class_names),
        "counts": counts,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# GAN augmentation
# ---------------------------------------------------------------------------

def merge_augmented(index, images, labels, batch_id="0"):
    """Write generated images into the train split as ``gan_<batch_id>_<k>.ppm`` and re-index.

    Re-running with the same ``batch_id`` replaces that batch, so the merge is
    idempotent per batch.  ``images`` are ``[M, H, W, 3]`` floats in [0, 1]
    (or :class:`ImageBuffer` objects).
    """
    if index.split != "train":
        raise DatasetError(f"augmented images go into the train split, not {index.split!r}")
    if not re.fullmatch(r"[A-Za-z0-9-]+", str(batch_id)):
        raise ValueError(f"batch_id must be alphanumeric, got {batch_id!r}")
    pixels = [im.pixels if isinstance(im, ImageBuffer) else np.asarray(im) for im in images]
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(pixels) != len(labels):
        raise ValueError(f"{len(pixels)} images vs {len(labels)} labels")
    ref = read_image(index.items()[0][0])
    for p in pixels:
        if p.shape != ref.pixels.shape:
            raise DatasetError(f"generated image shape {p.shape} does not match dataset {ref.pixels.shape}")
        if p.dtype != np.uint8 and (p.min() < 0.0 or p.max() > 1.0):
            raise ValueError("generated images must lie in [0, 1]")
    prefix = f"{GAN_PREFIX}{batch_id}_"
    for name in index.class_names:
        for old in (index.root / index.split / name).glob(f"{prefix}*.ppm"):
            old.unlink()
    counters = {}
    for p, label in zip(pixels, labels):
        name = index.class_names[int(label)]
        k = counters.get(name, 0)
        counters[name] = k + 1
        write_image(index.root / index.split / name / f"{prefix}{k:05d}.ppm", ImageBuffer(p, "synthetic"))
    return _index_split(index.root, index.split, index.class_names)
