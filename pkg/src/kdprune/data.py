"""Image-folder ingestion, stratified splits, preprocessing and a synthetic corpus.

Layout on disk is ``root/<class_name>/<image files>``; class indices follow
lexicographic order of the directory names.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".ppm", ".pnm", ".png", ".jpg", ".jpeg"}
MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


# -- codecs ----------------------------------------------------------------------------


def _ppm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos


def read_ppm(path) -> np.ndarray:
    """Decode a binary (P6) or ASCII (P3) PPM into uint8 [H, W, 3]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P6", b"P3"):
        raise DataError(f"{path}: not a PPM file")
    (width, height, maxval), pos = _ppm_tokens(buf, 3, 2)
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise DataError(f"{path}: bad PPM header")
    count = width * height * 3
    if magic == b"P6":
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        raw = np.frombuffer(buf, dtype=dtype, count=count, offset=pos) if len(buf) - pos >= count * dtype.itemsize else None
        if raw is None:
            raise DataError(f"{path}: truncated PPM payload")
        values = raw.astype(np.float64)
    else:
        values, _ = _ppm_tokens(buf, count, pos)
        values = np.asarray(values, dtype=np.float64)
    if maxval != 255:
        values = np.round(values * (255.0 / maxval))
    return values.reshape(height, width, 3).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] uint8 image, got {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def decode_image(path) -> np.ndarray:
    """uint8 [H, W, 3]. PPM is decoded natively; PNG/JPEG go through Pillow."""
    ext = Path(path).suffix.lower()
    if ext in (".ppm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is a declared dependency
        raise DataError(f"{path}: no decoder for {ext}") from exc
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as exc:
        raise DataError(f"{path}: {exc}") from exc


# -- folder datasets ----------------------------------------------------------------------


@dataclass
class RawDataset:
    samples: list[tuple[str, int]]
    classes: list[str]
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def load_image_folder(root, validate: bool = True) -> RawDataset:
    """Index ``root/<class>/**/<image>``; undecodable images are skipped and counted."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    classes = sorted(d.name for d in root.iterdir() if d.is_dir() and not d.name.startswith("."))
    samples, skipped = [], []
    for idx, name in enumerate(classes):
        for dirpath, dirnames, filenames in os.walk(root / name):
            dirnames.sort()
            for fname in sorted(filenames):
                path = os.path.join(dirpath, fname)
                if Path(fname).suffix.lower() not in IMAGE_EXTENSIONS:
                    continue
                if validate:
                    try:
                        decode_image(path)
                    except (DataError, OSError, ValueError):
                        skipped.append(path)
                        continue
                samples.append((path, idx))
    if skipped:
        log.warning("skipped %d unreadable image(s) under %s", len(skipped), root)
    if not samples:
        raise DataError(f"{root}: no decodable images in class subdirectories")
    used = sorted({c for _, c in samples})
    classes = [classes[i] for i in used]
    remap = {old: new for new, old in enumerate(used)}
    samples = [(p, remap[c]) for p, c in samples]
    return RawDataset(samples, classes, skipped)


@dataclass
class DatasetSplit:
    train: list[tuple[str, int]]
    val: list[tuple[str, int]]
    test: list[tuple[str, int]]
    classes: list[str]
    fractions: tuple[float, float, float]
    seed: int

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def partitions(self) -> dict[str, list[tuple[str, int]]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def export_manifest(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["path", "class_index", "partition"])
            for part, items in self.partitions().items():
                for p, c in items:
                    writer.writerow([p, c, part])


def split_dataset(raw: RawDataset, fractions: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0) -> DatasetSplit:
    """Stratified train/val/test split.

    Per class, ``floor(f * n)`` samples go to val and test and the remainder to
    train, so rounding leftovers always land in train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) == 2:
        fractions = (fractions[0], 0.0, fractions[1])
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    by_class: dict[int, list[tuple[str, int]]] = {}
    for item in raw.samples:
        by_class.setdefault(item[1], []).append(item)
    parts_needed = sum(f > 0 for f in fractions)
    train, val, test = [], [], []
    for c in sorted(by_class):
        items = by_class[c]
        order = np.random.default_rng([seed, c]).permutation(len(items))
        items = [items[i] for i in order]
        n = len(items)
        if n < parts_needed:
            log.warning("class %s has %d sample(s), fewer than %d split parts; all go to train",
                        raw.classes[c], n, parts_needed)
            train.extend(items)
            continue
        n_val = math.floor(fractions[1] * n + 1e-9)
        n_test = math.floor(fractions[2] * n + 1e-9)
        val.extend(items[:n_val])
        test.extend(items[n_val : n_val + n_test])
        train.extend(items[n_val + n_test :])
    return DatasetSplit(train, val, test, list(raw.classes), fractions, seed)


# -- preprocessing -----------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [H, W, C] with half-pixel centres and edge clamping."""
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(np.float32)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = image[y0][:, x0] * (1 - fx)[None, :, None] + image[y0][:, x1] * fx[None, :, None]
    bottom = image[y1][:, x0] * (1 - fx)[None, :, None] + image[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bottom * fy[:, None, None]


def preprocess(image: np.ndarray, size: int) -> np.ndarray:
    """uint8 [H, W, 3] -> normalised float32 [3, S, S]."""
    x = resize_bilinear(image, size, size) / 255.0
    x = (x - MEAN) / STD
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


@dataclass
class LabeledArrays:
    images: np.ndarray  # [N, 3, S, S] float32, normalised
    labels: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledArrays":
        return LabeledArrays(self.images[idx], self.labels[idx])


def load_arrays(samples: Sequence[tuple[str, int]], size: int) -> LabeledArrays:
    images, labels = [], []
    for path, label in samples:
        try:
            images.append(preprocess(decode_image(path), size))
        except DataError as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        labels.append(label)
    if images:
        return LabeledArrays(np.stack(images), np.asarray(labels, dtype=np.int64))
    return LabeledArrays(np.zeros((0, 3, size, size), np.float32), np.zeros(0, np.int64))


def load_split_arrays(split: DatasetSplit, size: int) -> dict[str, LabeledArrays]:
    return {name: load_arrays(items, size) for name, items in split.partitions().items()}


def iterate_batches(
    data: LabeledArrays, batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches; shuffled when ``rng`` is given."""
    n = len(data)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield data.images[idx], data.labels[idx]


# -- synthetic corpus ------------------------------------------------------------------------


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def synthetic_image(class_index: int, num_classes: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One procedurally generated uint8 [S, S, 3] image of the given class.

    Class signature: base hue, stripe frequency/orientation and blob count.
    Per-image variation: hue jitter, stripe phase, blob placement and pixel noise.
    """
    c = class_index
    hue = (c / num_classes + 0.04 * rng.standard_normal()) % 1.0
    freq = 2.0 + 2.5 * (c % 4)
    angle = np.pi * c / num_classes + 0.15 * rng.standard_normal()
    blobs = 1 + (c * 2) % 5

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = rng.uniform(0, 2 * np.pi)
    stripes = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    val = 0.55 + 0.25 * stripes
    sat = np.full_like(val, 0.65)
    for _ in range(blobs):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (0.08**2)
        spot = np.exp(-r2)
        val = val * (1 - spot) + 0.95 * spot
        sat = sat * (1 - spot) + 0.15 * spot
    rgb = _hsv_to_rgb(np.full_like(val, hue), sat, val)
    rgb = rgb + 0.03 * rng.standard_normal(rgb.shape)
    return np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)


def generate_synthetic(num_classes: int, per_class: int, size: int, seed: int, out) -> Path:
    """Write a learnable PPM image-folder corpus under ``out``."""
    if num_classes < 2:
        raise ConfigError("synthetic corpus needs at least 2 classes")
    if size < 32:
        raise ConfigError("synthetic image size must be >= 32")
    out = Path(out)
    try:
        for c in range(num_classes):
            d = out / f"class_{c:02d}"
            d.mkdir(parents=True, exist_ok=True)
            for i in range(per_class):
                rng = np.random.default_rng([seed, c, i])
                write_ppm(d / f"img_{i:05d}.ppm", synthetic_image(c, num_classes, size, rng))
    except OSError as exc:
        raise DataError(f"cannot write synthetic corpus to {out}: {exc}") from exc
    return out
