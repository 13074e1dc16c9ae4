"""Image corpus loading: CSV manifests, decoding, resizing and batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


class DatasetError(ValueError):
    pass


class ManifestNotFoundError(DatasetError, FileNotFoundError):
    pass


class ManifestFormatError(DatasetError):
    pass


class LabelContiguityError(DatasetError):
    pass


class ImageDecodeError(DatasetError):
    pass


MANIFEST_HEADER = ("path", "label", "group")


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    label: int | None = None
    group: str | None = None


@dataclass
class Dataset:
    entries: list[ManifestEntry]
    tensors: np.ndarray
    image_size: int

    def __post_init__(self):
        if len(self.entries) != self.tensors.shape[0]:
            raise DatasetError("entry count does not match tensor count")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray | None:
        if not self.entries or any(e.label is None for e in self.entries):
            return None
        return np.array([e.label for e in self.entries], dtype=np.int64)


def _check_labels(entries: list[ManifestEntry]) -> None:
    labels = {e.label for e in entries if e.label is not None}
    if labels and labels != set(range(max(labels) + 1)):
        missing = sorted(set(range(max(labels) + 1)) - labels)
        raise LabelContiguityError(f"labels must be contiguous from 0; missing {missing}")


def load_manifest(path) -> list[ManifestEntry]:
    """Parse a ``path,label,group`` CSV. Relative paths stay as written."""
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {path}")
    entries = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestFormatError(f"{path}: empty file, expected header {','.join(MANIFEST_HEADER)}")
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestFormatError(f"{path}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestFormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            img, label, group = (v.strip() for v in row)
            if not img:
                raise ManifestFormatError(f"{path}:{lineno}: empty image path")
            if label:
                try:
                    label = int(label)
                except ValueError:
                    raise ManifestFormatError(f"{path}:{lineno}: label {label!r} is not an integer") from None
                if label < 0:
                    raise ManifestFormatError(f"{path}:{lineno}: negative label {label}")
            entries.append(ManifestEntry(img, label if label != "" else None, group or None))
    _check_labels(entries)
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            w.writerow([e.image_path, "" if e.label is None else e.label, e.group or ""])


def _bilinear_axis(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres; identity when src == dst
    pos = (np.arange(dst) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize an [H,W,C] float array with bilinear interpolation."""
    y0, y1, fy = _bilinear_axis(img.shape[0], height)
    x0, x1, fx = _bilinear_axis(img.shape[1], width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def preprocess(raw: np.ndarray, target_size: int) -> np.ndarray:
    """Turn a decoded 0..255 pixel grid into a [S,S,3] float32 tensor in [0, 1]."""
    img = np.asarray(raw, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise DatasetError(f"cannot preprocess image of shape {np.shape(raw)}")
    channels = img.shape[2]
    if channels == 1:
        img = np.repeat(img, 3, axis=2)
    elif channels == 4:
        img = img[:, :, :3]
    elif channels != 3:
        raise DatasetError(f"unsupported channel count {channels}")
    if img.shape[:2] != (target_size, target_size):
        img = bilinear_resize(img, target_size, target_size)
    return np.clip(img / 255.0, 0.0, 1.0).astype(np.float32)


def decode_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGBA" if "A" in im.getbands() else "RGB")
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc


def load_dataset(manifest_path, image_size: int = 128) -> Dataset:
    """Load and preprocess every image a manifest lists.

    Relative image paths are resolved against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    entries = load_manifest(manifest_path)
    base = manifest_path.parent
    tensors = np.empty((len(entries), image_size, image_size, 3), dtype=np.float32)
    for i, e in enumerate(entries):
        p = Path(e.image_path)
        tensors[i] = preprocess(decode_image(p if p.is_absolute() else base / p), image_size)
    return Dataset(entries, tensors, image_size)


def batch_iter(n, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0) -> list[np.ndarray]:
    """Index batches covering ``range(n)`` once.

    ``n`` may be a count or anything with a length. The shuffled order is a
    function of ``(seed, epoch)`` only.
    """
    if not isinstance(n, (int, np.integer)):
        n = len(n)
    if n < 1:
        raise DatasetError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(n)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
