"""Datasets: a builtin synthetic blob set and directories of PGM/PPM images."""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BUILTIN = ("two-gaussians-8x8",)
INDEX_FILE = "index.csv"


class DatasetError(ValueError):
    """Unreadable or inconsistent dataset."""


@dataclass
class Dataset:
    images: np.ndarray            # [N, H, W, C] float32 in [-1, 1]
    labels: np.ndarray | None     # [N] int64, or None when unlabelled
    num_classes: int = 0

    def __len__(self) -> int:
        return self.images.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield self.images[i], (int(self.labels[i]) if self.labels is not None else None)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# ---------------------------------------------------------------------------
# synthetic blobs

BLOB_CENTERS = {0: (1.5, 1.5), 1: (5.5, 5.5)}
BLOB_SIGMA = 1.2


def blob_profile(center: tuple[float, float], size: int = 8, sigma: float = BLOB_SIGMA) -> np.ndarray:
    """Unit-height isotropic Gaussian bump sampled on the pixel grid."""
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return np.exp(-((ii - center[0]) ** 2 + (jj - center[1]) ** 2) / (2.0 * sigma ** 2))


def two_gaussians(n: int = 2048, seed: int = 0) -> Dataset:
    """8x8x1 images: class 0 has a bright blob in the top-left quadrant, class 1 bottom-right.

    ``image = -1 + 2 * a * g`` with ``g`` the class's blob profile and
    ``a ~ U[0.5, 1]`` per image, so pixels stay in ``[-1, 1]`` and the
    per-class mean is ``-1 + 1.5 g`` with variance ``g^2 / 12``.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % 2
    rng.shuffle(labels)
    amps = rng.uniform(0.5, 1.0, size=n)
    profiles = np.stack([blob_profile(BLOB_CENTERS[k]) for k in (0, 1)])
    imgs = -1.0 + 2.0 * amps[:, None, None] * profiles[labels]
    return Dataset(imgs[..., None].astype(np.float32), labels, num_classes=2)


def quadrant_slices(center: tuple[float, float], size: int = 8) -> tuple[slice, slice]:
    """Row and column slices of the image quadrant containing ``center``."""
    half = size // 2
    rows = slice(0, half) if center[0] < half else slice(half, size)
    cols = slice(0, half) if center[1] < half else slice(half, size)
    return rows, cols


def quadrant_energy(img: np.ndarray, center: tuple[float, float]) -> float:
    """Brightness above the ``-1`` background summed over the quadrant holding ``center``."""
    img = np.asarray(img, dtype=np.float64)
    rows, cols = quadrant_slices(center, img.shape[0])
    return float(np.sum(img[rows, cols] + 1.0))


def blob_quadrant_ratio(img: np.ndarray, cls: int) -> float:
    """Energy in class ``cls``'s blob quadrant over the energy in the other class's quadrant."""
    own = quadrant_energy(img, BLOB_CENTERS[cls])
    other = quadrant_energy(img, BLOB_CENTERS[1 - cls])
    return own / max(other, 1e-12)


# ---------------------------------------------------------------------------
# netpbm


def _tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    vals: list[int] = []
    pos = 2
    while len(vals) < count:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\d+)").match(buf, pos)
        if not m:
            raise DatasetError("malformed PNM header")
        vals.append(int(m.group(2)))
        pos = m.end()
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DatasetError("malformed PNM header")
    return vals, pos + 1


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM (P5) or PPM (P6) with maxval 255 into ``uint8 [H, W, C]``."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: not a binary PGM/PPM file")
    (w, h, maxval), off = _tokens(buf, 3)
    if maxval != 255:
        raise DatasetError(f"{path}: only maxval 255 is supported")
    c = 1 if magic == b"P5" else 3
    data = buf[off:off + w * h * c]
    if len(data) != w * h * c:
        raise DatasetError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, c)


def write_pnm(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write ``uint8 [H, W, 1|3]`` as P5/P6."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] not in (1, 3):
        raise DatasetError("write_pnm expects uint8 [H, W, 1|3]")
    h, w, c = img.shape
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def to_uint8(x: np.ndarray) -> np.ndarray:
    """[-1, 1] floats to bytes."""
    return np.clip(np.round((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def load_directory(path: str | os.PathLike) -> Dataset:
    """Images listed in ``index.csv`` (columns ``filename,class``; class may be empty)."""
    root = Path(path)
    index = root / INDEX_FILE
    if not index.is_file():
        raise DatasetError(f"{root}: missing {INDEX_FILE}")
    with index.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DatasetError(f"{index}: no entries")
    if set(rows[0]) != {"filename", "class"}:
        raise DatasetError(f"{index}: header must be filename,class")
    imgs, labels = [], []
    for row in rows:
        imgs.append(from_uint8(read_pnm(root / row["filename"])))
        labels.append(row["class"].strip())
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise DatasetError(f"{root}: images have differing shapes {sorted(shapes)}")
    if all(lab == "" for lab in labels):
        return Dataset(np.stack(imgs), None, 0)
    if any(lab == "" for lab in labels):
        raise DatasetError(f"{index}: class column is partially empty")
    lab = np.array([int(v) for v in labels], dtype=np.int64)
    if lab.min() < 0:
        raise DatasetError(f"{index}: negative class id")
    return Dataset(np.stack(imgs), lab, int(lab.max()) + 1)


def save_directory(path: str | os.PathLike, data: Dataset) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with (root / INDEX_FILE).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "class"])
        for i, (img, lab) in enumerate(data):
            ext = "pgm" if img.shape[2] == 1 else "ppm"
            name = f"img_{i:05d}.{ext}"
            write_pnm(root / name, to_uint8(img))
            w.writerow([name, "" if lab is None else lab])


def load_dataset(source: str | os.PathLike, seed: int = 0, size: int = 2048) -> Dataset:
    """A builtin dataset by name, or a directory of PGM/PPM files."""
    if str(source) == "two-gaussians-8x8":
        return two_gaussians(size, seed)
    if Path(source).is_dir():
        return load_directory(source)
    raise DatasetError(f"unknown dataset {source!r}; builtins: {', '.join(BUILTIN)}")


def check_geometry(data: Dataset, H: int, W: int, C: int, num_classes: int) -> None:
    if data.shape != (H, W, C):
        raise DatasetError(f"dataset images are {data.shape}, model expects {(H, W, C)}")
    if num_classes and data.labels is None:
        raise DatasetError("class-conditional model needs a labelled dataset")
    if data.labels is not None and num_classes and data.labels.max() >= num_classes:
        raise DatasetError(f"dataset has class ids >= num_classes={num_classes}")


class BatchSampler:
    """Epoch-wise shuffled batches; optional horizontal flips; fully seeded."""

    def __init__(self, data: Dataset, batch_size: int, rng: np.random.Generator, flip: bool = False):
        if len(data) == 0:
            raise DatasetError("dataset is empty")
        self.data, self.batch_size, self.rng, self.flip = data, batch_size, rng, flip
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_indices(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self._pos >= self._order.size:
                self._order = self.rng.permutation(len(self.data))
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            self._pos += take.size
            need -= take.size
            out.append(take)
        return np.concatenate(out)

    def next(self) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
        idx = self.next_indices()
        x = self.data.images[idx].copy()
        if self.flip:
            mask = self.rng.random(idx.size) < 0.5
            x[mask] = x[mask][:, :, ::-1]
        labels = self.data.labels[idx] if self.data.labels is not None else None
        return x, labels, idx
