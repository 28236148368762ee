"""Dataset ingestion, image caching, and subject-disjoint fold splits.

The on-disk interchange format is a directory of 8-bit RGB images plus a
header-bearing labels CSV (file, subject, au_1..au_N). A meta.txt with
channel means is written by the generator; when absent, the means are
computed from the images in manifest order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class ImageEntry:
    file: str
    subject: str
    labels: tuple[int, ...]


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ImageEntry]
    image_size: int
    au_count: int
    channel_means: np.ndarray  # (3,) in [0, 1]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.labels for e in self.entries], dtype=np.int64)

    @property
    def subjects(self) -> list[str]:
        return [e.subject for e in self.entries]


def _read_meta(path: Path) -> dict[str, str]:
    meta = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    return meta


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    csv_path = root / "labels.csv"
    if not csv_path.exists():
        raise FileNotFoundError(f"no labels.csv under {root}")
    entries: list[ImageEntry] = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["file", "subject"]:
            raise ValueError("labels.csv must start with columns file,subject")
        n_au = len(header) - 2
        for row in reader:
            labels = tuple(int(v) for v in row[2:])
            if any(v not in (0, 1) for v in labels) or len(labels) != n_au:
                raise ValueError(f"bad label row for {row[0]}")
            if not row[1]:
                raise ValueError(f"empty subject id for {row[0]}")
            entries.append(ImageEntry(file=row[0], subject=row[1], labels=labels))
    if not entries:
        raise ValueError("dataset is empty")

    meta = _read_meta(root / "meta.txt")
    first = np.asarray(Image.open(root / "images" / entries[0].file))
    size = first.shape[0]
    if first.shape[0] != first.shape[1] or first.shape[2] != 3:
        raise ValueError("images must be square RGB")
    if "image_size" in meta and int(meta["image_size"]) != size:
        raise ValueError("meta image_size disagrees with images")
    if all(f"channel_mean_{c}" in meta for c in "rgb"):
        means = np.array([float(meta[f"channel_mean_{c}"]) for c in "rgb"])
    else:
        acc = np.zeros(3)
        for e in entries:
            arr = np.asarray(Image.open(root / "images" / e.file))
            acc += arr.reshape(-1, 3).mean(axis=0) / 255.0
        means = acc / len(entries)
    return DatasetManifest(root=root, entries=entries, image_size=size,
                           au_count=len(entries[0].labels), channel_means=means)


class ImageStore:
    """Whole-dataset uint8 cache; batches come out as float in [0, 1]."""

    def __init__(self, manifest: DatasetManifest, dtype=np.float64):
        self.manifest = manifest
        self.dtype = dtype
        n, s = len(manifest), manifest.image_size
        self._cache = np.zeros((n, s, s, 3), dtype=np.uint8)
        for i, e in enumerate(manifest.entries):
            arr = np.asarray(Image.open(manifest.root / "images" / e.file))
            if arr.shape != (s, s, 3):
                raise ValueError(f"image {e.file} has shape {arr.shape}, expected {(s, s, 3)}")
            self._cache[i] = arr

    def batch(self, indices, flip: np.ndarray | None = None) -> np.ndarray:
        imgs = (self._cache[np.asarray(indices)] / 255.0).astype(self.dtype)
        if flip is not None:
            imgs[flip] = imgs[flip, :, ::-1, :]
        return imgs


def kfold_split(manifest: DatasetManifest, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Subject-disjoint folds: no subject contributes to both sides.

    Subjects are shuffled once and split into k near-equal groups; fold i
    tests on group i and trains on the rest.
    """
    subjects = sorted(set(manifest.subjects))
    if len(subjects) < k:
        raise ValueError(f"need at least {k} subjects for {k} folds, have {len(subjects)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    groups = np.array_split(np.array(order), k)
    by_subject = np.array(manifest.subjects)
    folds = []
    for g in groups:
        test_mask = np.isin(by_subject, g)
        folds.append((np.where(~test_mask)[0], np.where(test_mask)[0]))
    return folds
