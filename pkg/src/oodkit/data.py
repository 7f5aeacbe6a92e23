"""Dataset ingestion, corruption-based OOD generation, synthetic data.

Manifests are CSV files with header ``path,label,split`` where split is
one of train/calibrate/test and paths are relative to the manifest.
Images load as grayscale, resize bilinearly and scale to [0,1].

The corruption pipeline mimics degraded ultrasound captures: dark
rectangular occlusions, then Gaussian blur, then additive Gaussian
noise, clamped back to [0,1]. All randomness derives from
(config seed, per-image seed).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, UnidentifiedImageError

from .errors import DataError, FormatError, InputError
from .seeding import derived_rng

__all__ = [
    "SPLITS",
    "ManifestRow",
    "LoadedDataset",
    "CorruptionConfig",
    "read_manifest",
    "write_manifest",
    "load_dataset",
    "load_idx",
    "corrupt",
    "gaussian_kernel",
    "gaussian_blur",
    "bilinear_resize",
    "make_synthetic",
    "make_noise_images",
    "read_grayscale",
    "write_png",
]

SPLITS = ("train", "calibrate", "test")

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: str
    split: str


@dataclass
class LoadedDataset:
    """Images [N,1,H,W] in [0,1], integer labels, and row metadata."""

    images: np.ndarray
    labels: np.ndarray
    sample_ids: list[str]
    splits: list[str]
    class_names: list[str]

    def subset(self, split: str) -> "LoadedDataset":
        keep = [i for i, s in enumerate(self.splits) if s == split]
        return LoadedDataset(
            images=self.images[keep],
            labels=self.labels[keep],
            sample_ids=[self.sample_ids[i] for i in keep],
            splits=[split] * len(keep),
            class_names=self.class_names,
        )

    def __len__(self) -> int:
        return len(self.sample_ids)


# ---------------------------------------------------------------------------
# manifests


def read_manifest(path: str | Path) -> list[ManifestRow]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"manifest not found: {path}")
    rows: list[ManifestRow] = []
    seen: dict[str, str] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise FormatError(f"{path}: expected header path,label,split, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise FormatError(f"{path} row {lineno}: expected 3 fields, got {len(row)}")
            rel, label, split = (v.strip() for v in row)
            if split not in SPLITS:
                raise FormatError(f"{path} row {lineno}: unknown split {split!r}")
            if rel in seen and seen[rel] != split:
                raise DataError(
                    f"{path} row {lineno}: {rel!r} appears in splits "
                    f"{seen[rel]!r} and {split!r}; splits must be disjoint"
                )
            seen[rel] = split
            rows.append(ManifestRow(rel, label, split))
    return rows


def write_manifest(path: str | Path, rows: list[ManifestRow]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for r in rows:
            writer.writerow([r.path, r.label, r.split])


def read_grayscale(path: str | Path) -> np.ndarray:
    """Decode an image file to a uint8 [H,W] grayscale array."""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc


def write_png(path: str | Path, image01: np.ndarray) -> None:
    """Write a [H,W] or [1,H,W] float image in [0,1] as 8-bit PNG."""
    arr = np.asarray(image01, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    data = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear interpolation of a [H,W] float array."""
    h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.astype(np.float64).copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    img = image.astype(np.float64)
    top = (1.0 - fx) * img[np.ix_(y0, x0)] + fx * img[np.ix_(y0, x1)]
    bottom = (1.0 - fx) * img[np.ix_(y1, x0)] + fx * img[np.ix_(y1, x1)]
    return (1.0 - fy) * top + fy * bottom


def load_dataset(
    manifest_path: str | Path, size: int, class_names: list[str] | None = None
) -> LoadedDataset:
    """Load every manifest row, resized to size x size, in manifest order.

    Labels may be names or integer strings; without an explicit
    ``class_names`` list, names map to indices by sorted order.
    Row-level failures report the offending row number.
    """
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    base = manifest_path.parent

    labels_raw = [r.label for r in rows]
    if class_names is not None:
        label_of = {name: i for i, name in enumerate(class_names)}
    elif all(lab.isdigit() for lab in labels_raw):
        class_names = [str(v) for v in sorted({int(lab) for lab in labels_raw})]
        label_of = {name: int(name) for name in class_names}
    else:
        class_names = sorted(set(labels_raw))
        label_of = {name: i for i, name in enumerate(class_names)}

    images = np.empty((len(rows), 1, size, size))
    labels = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        rowno = i + 2  # header is row 1
        full = base / row.path
        if not full.exists():
            raise DataError(f"{manifest_path} row {rowno}: missing file {full}")
        try:
            raw = read_grayscale(full)
        except FormatError as exc:
            raise DataError(f"{manifest_path} row {rowno}: {exc}") from exc
        if row.label not in label_of:
            raise DataError(f"{manifest_path} row {rowno}: unknown label {row.label!r}")
        images[i, 0] = bilinear_resize(raw / 255.0, size, size)
        labels[i] = label_of[row.label]
    return LoadedDataset(
        images=images,
        labels=labels,
        sample_ids=[r.path for r in rows],
        splits=[r.split for r in rows],
        class_names=class_names,
    )


# ---------------------------------------------------------------------------
# IDX digit files


def _idx_header(data: bytes, path: str | Path, words: int) -> list[int]:
    need = 4 * words
    if len(data) < need:
        raise FormatError(f"{path}: truncated IDX header ({len(data)} bytes)")
    return [int.from_bytes(data[4 * i : 4 * i + 4], "big") for i in range(words)]


def load_idx(images_path: str | Path, labels_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read paired IDX image/label files; pixels scale to [0,1]."""
    img_bytes = Path(images_path).read_bytes()
    magic, count, rows, cols = _idx_header(img_bytes, images_path, 4)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{images_path}: bad IDX image magic 0x{magic:08x}")
    expected = 16 + count * rows * cols
    if len(img_bytes) < expected:
        raise FormatError(f"{images_path}: truncated payload ({len(img_bytes)} of {expected} bytes)")
    if len(img_bytes) > expected:
        raise FormatError(f"{images_path}: {len(img_bytes) - expected} trailing bytes")

    lab_bytes = Path(labels_path).read_bytes()
    lmagic, lcount = _idx_header(lab_bytes, labels_path, 2)
    if lmagic != IDX_LABEL_MAGIC:
        raise FormatError(f"{labels_path}: bad IDX label magic 0x{lmagic:08x}")
    if lcount != count:
        raise FormatError(f"label count {lcount} does not match image count {count}")
    if len(lab_bytes) != 8 + count:
        raise FormatError(f"{labels_path}: truncated payload")

    pixels = np.frombuffer(img_bytes, dtype=np.uint8, offset=16)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_bytes, dtype=np.uint8, offset=8).astype(np.int64)
    return images, labels


# ---------------------------------------------------------------------------
# corruption


@dataclass(frozen=True)
class CorruptionConfig:
    """Which degradations to apply and how severe they may get.

    Sizes are fractions of the image dimensions; sigma ranges are in
    pixels (blur) and intensity units (noise). Defaults target the
    look of a badly captured ultrasound frame.
    """

    seed: int = 0
    operations: tuple[str, ...] = ("dark_region", "blur", "noise")
    dark_region_count: tuple[int, int] = (1, 3)
    dark_region_size: tuple[float, float] = (0.10, 0.30)
    blur_sigma: tuple[float, float] = (1.0, 3.0)
    noise_sigma: tuple[float, float] = (0.05, 0.15)

    def __post_init__(self):
        known = {"dark_region", "blur", "noise"}
        if not self.operations:
            raise InputError("corruption config must enable at least one operation")
        unknown = set(self.operations) - known
        if unknown:
            raise InputError(f"unknown corruption operations: {sorted(unknown)}")
        for name in ("dark_region_size", "blur_sigma", "noise_sigma"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise InputError(f"{name} range ({lo}, {hi}) must be non-negative and ordered")
        lo, hi = self.dark_region_count
        if lo < 0 or hi < lo:
            raise InputError(f"dark_region_count range ({lo}, {hi}) invalid")


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian taps out to 3 sigma, normalized to sum exactly 1."""
    if sigma <= 0:
        return np.array([1.0])
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding ([H,W] float input)."""
    k = gaussian_kernel(sigma)
    if k.size == 1:
        return image.copy()
    r = k.size // 2
    padded = np.pad(image, ((r, r), (0, 0)), mode="reflect")
    image = sliding_window_view(padded, k.size, axis=0) @ k
    padded = np.pad(image, ((0, 0), (r, r)), mode="reflect")
    return sliding_window_view(padded, k.size, axis=1) @ k


def corrupt(image: np.ndarray, config: CorruptionConfig, sample_seed: int) -> np.ndarray:
    """Degrade one image deterministically; output stays in [0,1].

    Enabled operations always run in the order dark regions, blur,
    noise.
    """
    arr = np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 3
    if squeeze:
        if arr.shape[0] != 1:
            raise InputError(f"expected a single-channel image, got shape {arr.shape}")
        arr = arr[0]
    if arr.min() < 0 or arr.max() > 1:
        raise InputError("corrupt() expects pixel values in [0, 1]")
    h, w = arr.shape
    rng = derived_rng(config.seed, "corrupt", int(sample_seed))
    out = arr.copy()

    if "dark_region" in config.operations:
        lo, hi = config.dark_region_count
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            fh = rng.uniform(*config.dark_region_size)
            fw = rng.uniform(*config.dark_region_size)
            rh = min(h, max(1, int(round(fh * h))))
            rw = min(w, max(1, int(round(fw * w))))
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            out[top : top + rh, left : left + rw] = 0.0

    if "blur" in config.operations:
        sigma = rng.uniform(*config.blur_sigma)
        out = gaussian_blur(out, sigma)

    if "noise" in config.operations:
        sigma = rng.uniform(*config.noise_sigma)
        out = out + rng.normal(0.0, sigma, size=out.shape) if sigma > 0 else out

    out = np.clip(out, 0.0, 1.0)
    return out[None, :, :] if squeeze else out


# ---------------------------------------------------------------------------
# synthetic data


GRATING_PERIOD_PX = 4.0
GRATING_AMPLITUDE = 0.5


def make_synthetic(
    n_classes: int = 3,
    per_class: int = 20,
    size: int = 32,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Generate class-distinguishable blob textures.

    Each class has its own blob radius, brightness, and grating
    orientation riding on the blob, plus center jitter and speckle.
    The redundant coarse (brightness/size) and fine (grating) cues
    matter: blur and occlusion destroy them selectively, which is what
    makes corrupted copies of these images genuinely ambiguous.
    Returns (images [N,1,size,size], labels [N]) with classes
    interleaved 0,1,...,K-1,0,1,...
    """
    if per_class < 1:
        raise InputError("per_class must be >= 1")
    rng = derived_rng(seed, "synth")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n_classes * per_class, 1, size, size))
    labels = np.empty(n_classes * per_class, dtype=np.int64)
    for i in range(per_class):
        for c in range(n_classes):
            radius = (0.10 + 0.09 * c) * size
            brightness = 0.45 + 0.50 * c / max(1, n_classes - 1)
            cy = size / 2 + rng.uniform(-0.08, 0.08) * size
            cx = size / 2 + rng.uniform(-0.08, 0.08) * size
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            blob = np.exp(-0.5 * d2 / radius**2)
            angle = np.pi * c / n_classes
            phase = rng.uniform(0.0, 2.0 * np.pi)
            wave = np.sin(
                2.0 * np.pi * (np.cos(angle) * yy + np.sin(angle) * xx) / GRATING_PERIOD_PX
                + phase
            )
            img = 0.05 + brightness * blob * (1.0 + GRATING_AMPLITUDE * wave)
            img *= 1.0 + 0.06 * rng.standard_normal((size, size))
            idx = i * n_classes + c
            images[idx, 0] = np.clip(img, 0.0, 1.0)
            labels[idx] = c
    return images, labels


def make_noise_images(count: int, size: int, seed: int = 0) -> np.ndarray:
    """Uniform-noise images in [0,1]; a far-OOD stand-in."""
    rng = derived_rng(seed, "synth", 1)
    return rng.uniform(0.0, 1.0, size=(count, 1, size, size))
