"""Dataset ingestion: IDX image files, numeric CSV, and a synthetic generator.

All loaders return float32 feature arrays plus int64 labels. IDX images are
scaled from [0, 255] bytes to [0, 1] floats and given an explicit channel
axis; CSV rows keep their raw values. The synthetic generator draws one
Gaussian template per class and adds seeded Gaussian noise, so the same
descriptor always produces the same dataset.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """A dataset file does not match its declared format."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataFormatError(
                f"feature/label count mismatch: {len(self.x)} vs {len(self.y)}"
            )

    def __len__(self) -> int:
        return len(self.x)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.x.shape[1:]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def load_idx_images(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise DataFormatError(f"{path}: IDX image header needs 16 bytes, file has {len(raw)}")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(
            f"{path}: bad IDX image magic 0x{magic:08x} at byte 0 "
            f"(expected 0x{IDX_IMAGES_MAGIC:08x})"
        )
    need = 16 + count * rows * cols
    if len(raw) != need:
        raise DataFormatError(
            f"{path}: payload truncated at byte {len(raw)} (expected {need} bytes "
            f"for {count} images of {rows}x{cols})"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    images = pixels.reshape(count, 1, rows, cols).astype(np.float32) / 255.0
    return images


def load_idx_labels(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: IDX label header needs 8 bytes, file has {len(raw)}")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(
            f"{path}: bad IDX label magic 0x{magic:08x} at byte 0 "
            f"(expected 0x{IDX_LABELS_MAGIC:08x})"
        )
    need = 8 + count
    if len(raw) != need:
        raise DataFormatError(
            f"{path}: payload truncated at byte {len(raw)} (expected {need} bytes "
            f"for {count} labels)"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DataFormatError(
            f"{images_path} has {len(images)} images but {labels_path} has "
            f"{len(labels)} labels"
        )
    return Dataset(images, labels)


def load_csv(path: str | Path, label_column: str | None = None) -> Dataset:
    """Numeric CSV with an integer label column (named 'label', or the last one).

    A non-numeric first row is treated as a header.
    """
    rows: list[list[str]] = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append(row)
    if not rows:
        raise DataFormatError(f"{path}: file is empty")

    header: list[str] | None = None
    first = rows[0]
    if any(not _is_number(c) for c in first):
        header = [c.strip() for c in first]
        rows = rows[1:]
        if not rows:
            raise DataFormatError(f"{path}: header only, no data rows")

    if label_column is None and header is not None and "label" in header:
        label_column = "label"
    if label_column is not None:
        if header is None or label_column not in header:
            raise DataFormatError(f"{path}: no column named {label_column!r}")
        label_idx = header.index(label_column)
    else:
        label_idx = len(rows[0]) - 1

    width = len(rows[0])
    feats, labels = [], []
    for lineno, row in enumerate(rows, start=2 if header else 1):
        if len(row) != width:
            raise DataFormatError(
                f"{path}:{lineno}: expected {width} cells, got {len(row)}"
            )
        vals = []
        for col, cell in enumerate(row):
            if not _is_number(cell):
                raise DataFormatError(
                    f"{path}:{lineno}: non-numeric cell {cell!r} in column {col}"
                )
            vals.append(float(cell))
        labels.append(int(round(vals[label_idx])))
        feats.append([v for i, v in enumerate(vals) if i != label_idx])
    return Dataset(np.asarray(feats, dtype=np.float32), np.asarray(labels, dtype=np.int64))


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def make_synthetic(
    classes: int,
    shape: tuple[int, ...],
    noise: float,
    count: int,
    seed: int,
    template_seed: int | None = None,
) -> Dataset:
    """Class-template Gaussian blobs: sample = template[class] + noise * N(0,1).

    ``template_seed`` pins the class templates independently of the sampling
    seed, so train and eval splits share geometry but not noise.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    tmpl_rng = np.random.default_rng(template_seed if template_seed is not None else seed)
    templates = tmpl_rng.normal(0.0, 1.0, size=(classes, *shape)).astype(np.float32)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=count)
    x = templates[labels] + noise * rng.normal(0.0, 1.0, size=(count, *shape))
    return Dataset(x.astype(np.float32), labels.astype(np.int64))


def _split(ds: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    n = len(ds)
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_frac * n))
    return ds.subset(order[:cut]), ds.subset(order[cut:])


_DESCRIPTOR_KEYS = {
    "idx": {"kind", "images", "labels", "eval_images", "eval_labels", "split", "seed"},
    "csv": {"kind", "path", "eval_path", "label_column", "split", "seed"},
    "synthetic": {"kind", "classes", "shape", "noise", "train_size", "eval_size", "seed"},
}


def ingest_dataset(descriptor: dict) -> tuple[Dataset, Dataset]:
    """Resolve a dataset descriptor into (train, eval) datasets."""
    kind = descriptor.get("kind")
    if kind not in _DESCRIPTOR_KEYS:
        raise DataFormatError(
            f"unknown dataset kind {kind!r}; expected one of {sorted(_DESCRIPTOR_KEYS)}"
        )
    extra = set(descriptor) - _DESCRIPTOR_KEYS[kind]
    if extra:
        raise DataFormatError(f"unknown dataset keys {sorted(extra)} for kind {kind!r}")
    seed = int(descriptor.get("seed", 0))

    if kind == "synthetic":
        classes = int(descriptor.get("classes", 10))
        shape = tuple(int(s) for s in descriptor.get("shape", (1, 12, 12)))
        noise = float(descriptor.get("noise", 1.0))
        train_size = int(descriptor.get("train_size", 4096))
        eval_size = int(descriptor.get("eval_size", 2048))
        train = make_synthetic(classes, shape, noise, train_size, seed=seed,
                               template_seed=seed)
        evl = make_synthetic(classes, shape, noise, eval_size, seed=seed + 1,
                             template_seed=seed)
        return train, evl

    if kind == "idx":
        train = load_idx(descriptor["images"], descriptor["labels"])
        if "eval_images" in descriptor:
            return train, load_idx(descriptor["eval_images"], descriptor["eval_labels"])
        return _split(train, float(descriptor.get("split", 0.8)), seed)

    train = load_csv(descriptor["path"], descriptor.get("label_column"))
    if "eval_path" in descriptor:
        return train, load_csv(descriptor["eval_path"], descriptor.get("label_column"))
    return _split(train, float(descriptor.get("split", 0.8)), seed)
