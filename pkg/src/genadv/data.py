"""Datasets: CIFAR-10 binary batches and procedural synthetic scenes.

Images are held per split either as uint8 (CIFAR-10, converted to [0, 1]
per batch) or as float32 already in [0, 1]. Labels are int64 class vectors
(classification) or (N, H, W) label maps (segmentation).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .core import GenAdvError, ShapeError, load_checkpoint

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
SYNTH_VERSION = "genadv-synth/1"

# Class colours for the segmentation scenes: background, red, green, blue, yellow.
SEG_COLORS = np.array(
    [
        [0.50, 0.50, 0.50],
        [0.85, 0.15, 0.15],
        [0.15, 0.75, 0.20],
        [0.15, 0.25, 0.85],
        [0.90, 0.85, 0.15],
    ],
    dtype=np.float32,
)
SEG_NOISE = 0.02

SHAPES10 = (
    "square", "disk", "triangle", "ring", "plus",
    "cross", "diamond", "hbars", "vbars", "frame",
)


class DatasetError(GenAdvError, ValueError):
    pass


@dataclass
class DatasetHandle:
    task: str
    num_classes: int
    input_shape: tuple[int, int, int]
    splits: dict[str, tuple[torch.Tensor, torch.Tensor]]
    source: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("classification", "segmentation"):
            raise DatasetError(f"unknown task {self.task!r}")
        for name, (images, labels) in self.splits.items():
            if images.shape[0] != labels.shape[0]:
                raise DatasetError(f"split {name!r}: {images.shape[0]} images vs {labels.shape[0]} labels")
            if tuple(images.shape[1:]) != tuple(self.input_shape):
                raise ShapeError(f"split {name!r} has sample shape {tuple(images.shape[1:])}")
            if labels.numel() and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise DatasetError(f"split {name!r} has labels outside [0, {self.num_classes})")

    def size(self, split: str) -> int:
        return self._split(split)[0].shape[0]

    def _split(self, split: str):
        if split not in self.splits:
            raise DatasetError(f"unknown split {split!r}; have {sorted(self.splits)}")
        return self.splits[split]

    def arrays(self, split: str, limit: Optional[int] = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Whole split (or its first ``limit`` samples) as float images + labels."""
        images, labels = self._split(split)
        if limit is not None:
            images, labels = images[:limit], labels[:limit]
        return to_float(images), labels

    def subset(self, split: str, indices, as_split: str = "train") -> "DatasetHandle":
        images, labels = self._split(split)
        idx = torch.as_tensor(indices, dtype=torch.long)
        return DatasetHandle(
            self.task, self.num_classes, self.input_shape,
            {as_split: (images[idx], labels[idx])},
            f"{self.source}[{split}:{len(idx)}]", dict(self.meta),
        )


def to_float(images: torch.Tensor) -> torch.Tensor:
    if images.dtype == torch.uint8:
        return images.to(torch.float32) / 255.0
    return images.to(torch.float32)


def batch_iterator(
    handle: DatasetHandle, split: str, batch_size: int, shuffle_seed: Optional[int] = None
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(images, labels)`` batches; the final partial batch is kept."""
    images, labels = handle._split(split)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = images.shape[0]
    if shuffle_seed is None:
        order = torch.arange(n)
    else:
        order = torch.randperm(n, generator=torch.Generator().manual_seed(int(shuffle_seed)))
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield to_float(images[idx]), labels[idx]


# -- CIFAR-10 -----------------------------------------------------------------

def parse_cifar10_batch(raw: bytes) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode 3073-byte records into (N, 3, 32, 32) uint8 images and labels."""
    if len(raw) % CIFAR_RECORD:
        raise DatasetError(f"CIFAR-10 batch size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DatasetError(f"label byte {labels.max()} > 9")
    images = records[:, 1:].reshape(-1, *CIFAR_SHAPE).copy()
    return torch.from_numpy(images), torch.from_numpy(labels)


def encode_cifar10_batch(images: torch.Tensor, labels: torch.Tensor) -> bytes:
    if images.dtype != torch.uint8 or tuple(images.shape[1:]) != CIFAR_SHAPE:
        raise ShapeError("expected (N, 3, 32, 32) uint8 images")
    records = np.empty((images.shape[0], CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = labels.numpy().astype(np.uint8)
    records[:, 1:] = images.reshape(images.shape[0], CIFAR_RECORD - 1).numpy()
    return records.tobytes()


def write_cifar10_batch(images: torch.Tensor, labels: torch.Tensor, path: str | Path) -> None:
    Path(path).write_bytes(encode_cifar10_batch(images, labels))


def load_cifar10(dir_path: str | Path) -> DatasetHandle:
    """Load the standard binary batches from ``dir_path``.

    ``data_batch_1..4`` form the train split, ``data_batch_5`` validation and
    ``test_batch`` the test split. Missing files simply leave a split out,
    but at least one train and the test batch must be present.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise DatasetError(f"CIFAR-10 directory not found: {root}")
    groups: dict[str, list[Path]] = {"train": [], "val": [], "test": []}
    for f in sorted(root.glob("*.bin")):
        m = re.fullmatch(r"data_batch_(\d+)\.bin", f.name)
        if m:
            groups["val" if m.group(1) == "5" else "train"].append(f)
        elif f.name == "test_batch.bin":
            groups["test"].append(f)
    if not groups["train"] or not groups["test"]:
        raise DatasetError(f"{root} lacks data_batch_*.bin or test_batch.bin")
    splits = {}
    for name, files in groups.items():
        if not files:
            continue
        parts = [parse_cifar10_batch(f.read_bytes()) for f in files]
        splits[name] = (torch.cat([p[0] for p in parts]), torch.cat([p[1] for p in parts]))
    return DatasetHandle("classification", 10, CIFAR_SHAPE, splits, f"cifar10:{root}")


# -- synthetic scenes -----------------------------------------------------------

def _split_counts(n: int, val_fraction: float, test_fraction: float) -> dict[str, int]:
    n_val, n_test = int(round(n * val_fraction)), int(round(n * test_fraction))
    counts = {"train": n - n_val - n_test, "val": n_val, "test": n_test}
    return {k: v for k, v in counts.items() if v > 0}


def _assemble(images, labels, counts) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
    splits, start = {}, 0
    for name, count in counts.items():
        splits[name] = (images[start:start + count], labels[start:start + count])
        start += count
    return splits


def render_scene(rng: np.random.Generator, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """One segmentation scene: grey background plus 1-3 coloured rectangles/disks."""
    label = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(1, 4)):
        cls = int(rng.integers(1, 5))
        if rng.random() < 0.5:
            h, w = rng.integers(6, 17, size=2)
            top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
            mask = (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
        else:
            r = rng.uniform(3.5, 8.0)
            cy, cx = rng.uniform(r, size - r, size=2)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        label[mask] = cls
    image = SEG_COLORS[label].transpose(2, 0, 1)
    image = image + rng.normal(0.0, SEG_NOISE, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32), label


def synthesize_segmentation_dataset(
    n: int, seed: int, val_fraction: float = 0.1, test_fraction: float = 0.1
) -> DatasetHandle:
    """``n`` seeded 32x32 scenes with pixel-exact label maps over 5 classes."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    scenes = [render_scene(rng) for _ in range(n)]
    images = torch.from_numpy(np.stack([s[0] for s in scenes]))
    labels = torch.from_numpy(np.stack([s[1] for s in scenes]))
    return DatasetHandle(
        "segmentation", len(SEG_COLORS), (3, 32, 32),
        _assemble(images, labels, _split_counts(n, val_fraction, test_fraction)),
        f"synthetic-seg:seed={seed}:n={n}",
        {"seed": seed, "n": n, "version": SYNTH_VERSION},
    )


def _shape_mask(kind: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    box = np.maximum(np.abs(u), np.abs(v))
    inside = box <= 1
    rad = np.sqrt(u * u + v * v)
    name = SHAPES10[kind]
    if name == "square":
        return inside
    if name == "disk":
        return rad <= 1
    if name == "triangle":
        return (v <= 1) & (np.abs(u) <= (v + 1) / 2)
    if name == "ring":
        return (rad <= 1) & (rad >= 0.55)
    if name == "plus":
        return inside & ((np.abs(u) <= 0.3) | (np.abs(v) <= 0.3))
    if name == "cross":
        return inside & ((np.abs(u - v) <= 0.4) | (np.abs(u + v) <= 0.4))
    if name == "diamond":
        return np.abs(u) + np.abs(v) <= 1
    if name == "hbars":
        return inside & (np.floor((v + 1) * 2.5) % 2 == 0)
    if name == "vbars":
        return inside & (np.floor((u + 1) * 2.5) % 2 == 0)
    return inside & (box >= 0.6)  # frame


def render_shape(rng: np.random.Generator, kind: int, size: int = 32) -> np.ndarray:
    """One stand-in classification image: a randomly coloured shape on a textured background."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    base = rng.uniform(0.15, 0.85, size=3)
    grad = rng.uniform(-0.15, 0.15, size=(3, 2))
    bg = base[:, None, None] + (grad[:, :1, None] * (yy - size / 2) + grad[:, 1:, None] * (xx - size / 2)) / size
    while True:
        fg = rng.uniform(0.0, 1.0, size=3)
        if np.abs(fg - base).mean() >= 0.25:
            break
    r = rng.uniform(7.0, 12.0)
    cy, cx = rng.uniform(r, size - r, size=2)
    mask = _shape_mask(kind, (xx - cx) / r, (yy - cy) / r)
    image = np.where(mask[None], fg[:, None, None], bg)
    image = image + rng.normal(0.0, 0.03, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def synthesize_classification_dataset(
    n: int, seed: int, val_fraction: float = 0.1, test_fraction: float = 0.1
) -> DatasetHandle:
    """Ten-class 32x32 shapes dataset, a local stand-in where CIFAR-10 is unavailable."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(SHAPES10), size=n)
    images = np.stack([render_shape(rng, int(k)) for k in labels])
    return DatasetHandle(
        "classification", len(SHAPES10), (3, 32, 32),
        _assemble(torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)),
                  _split_counts(n, val_fraction, test_fraction)),
        f"synthetic-shapes10:seed={seed}:n={n}",
        {"seed": seed, "n": n, "version": SYNTH_VERSION},
    )


def save_dataset(handle: DatasetHandle, path: str | Path) -> None:
    """Archive a dataset (tensors plus seed and generator version tag)."""
    payload = {
        "task": handle.task,
        "num_classes": handle.num_classes,
        "input_shape": list(handle.input_shape),
        "splits": {k: [v[0], v[1]] for k, v in handle.splits.items()},
        "source": handle.source,
        "meta": handle.meta,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_dataset(path: str | Path) -> DatasetHandle:
    p = load_checkpoint(path)
    return DatasetHandle(
        p["task"], p["num_classes"], tuple(p["input_shape"]),
        {k: (v[0], v[1]) for k, v in p["splits"].items()}, p["source"], p["meta"],
    )
