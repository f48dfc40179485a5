"""CIFAR binary ingestion, a synthetic multi-context image generator, and splits."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .seeding import stream

CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE
CIFAR10_RECORD = 1 + CIFAR_PIXELS
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILE = "test_batch.bin"


class DataError(Exception):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    classes: int = 10
    mean: np.ndarray | None = None  # per-channel, from the train split
    std: np.ndarray | None = None
    contexts: np.ndarray | None = None
    ids: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DataError(f"labels outside [0, {self.classes})")
        if self.ids is None:
            self.ids = np.arange(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self,
            images=self.images[idx],
            labels=self.labels[idx],
            split=split or self.split,
            contexts=None if self.contexts is None else self.contexts[idx],
            ids=self.ids[idx],
        )

    def with_stats(self, mean, std) -> "Dataset":
        return replace(self, mean=np.asarray(mean, np.float64), std=np.asarray(std, np.float64))

    def normalize(self, images: np.ndarray) -> np.ndarray:
        if self.mean is None:
            raise DataError("dataset has no normalization stats; compute them on the train split first")
        mean = self.mean.astype(np.float32)[None, :, None, None]
        std = self.std.astype(np.float32)[None, :, None, None]
        return ((images - mean) / std).astype(np.float32)

    def normalized(self, idx=None) -> np.ndarray:
        return self.normalize(self.images if idx is None else self.images[idx])


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


# --- CIFAR --------------------------------------------------------------------

def parse_cifar_file(path, label_bytes: int = 1, label_index: int = 0, classes: int = 10):
    """Parse one CIFAR binary batch: ``label_bytes`` label bytes, then 3x1024
    channel-planar row-major pixel bytes per record."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing CIFAR file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    rec = label_bytes + CIFAR_PIXELS
    if raw.size == 0 or raw.size % rec:
        raise DataError(f"{path}: size {raw.size} is not a positive multiple of the {rec}-byte record")
    recs = raw.reshape(-1, rec)
    labels = recs[:, label_index].astype(np.int64)
    if labels.max() >= classes:
        raise DataError(f"{path}: label byte {labels.max()} > {classes - 1}")
    pixels = recs[:, label_bytes:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return pixels, labels


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Read the five train batches and the test batch (50,000 / 10,000 images)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"CIFAR-10 directory not found: {directory}")
    parts = [parse_cifar_file(directory / name) for name in CIFAR10_TRAIN_FILES]
    train_px = np.concatenate([p for p, _ in parts])
    train_lb = np.concatenate([lb for _, lb in parts])
    test_px, test_lb = parse_cifar_file(directory / CIFAR10_TEST_FILE)
    train = Dataset(_to_unit(train_px), train_lb, "train", 10)
    mean, std = channel_stats(train.images)
    test = Dataset(_to_unit(test_px), test_lb, "test", 10)
    return train.with_stats(mean, std), test.with_stats(mean, std)


def load_cifar100(directory, coarse: bool = False) -> tuple[Dataset, Dataset]:
    """CIFAR-100 binaries: two label bytes (coarse, fine) per record."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"CIFAR-100 directory not found: {directory}")
    classes = 20 if coarse else 100
    idx = 0 if coarse else 1
    tr_px, tr_lb = parse_cifar_file(directory / "train.bin", 2, idx, classes)
    te_px, te_lb = parse_cifar_file(directory / "test.bin", 2, idx, classes)
    train = Dataset(_to_unit(tr_px), tr_lb, "train", classes)
    mean, std = channel_stats(train.images)
    test = Dataset(_to_unit(te_px), te_lb, "test", classes)
    return train.with_stats(mean, std), test.with_stats(mean, std)


# --- synthetic multi-context shapes ---------------------------------------------

SHAPES = ("hbar", "vbar", "disc", "cross", "ring", "square")

# (background, foreground) RGB per context family; context 0 is bluish with a
# light figure, context 1 reddish with a dark figure, and so on.
CONTEXT_PALETTES = (
    ((0.15, 0.25, 0.75), (0.95, 0.90, 0.45)),
    ((0.80, 0.25, 0.15), (0.10, 0.25, 0.30)),
    ((0.20, 0.70, 0.25), (0.60, 0.10, 0.60)),
    ((0.85, 0.80, 0.30), (0.20, 0.15, 0.55)),
)


@dataclass(frozen=True)
class SyntheticContextSpec:
    contexts: int = 2
    classes: int = 4
    per_cell: int = 100
    size: int = 16
    noise: float = 0.35
    color_jitter: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.contexts < 1 or self.classes < 1:
            raise DataError("synthetic spec needs at least one context and one class")
        if self.contexts > len(CONTEXT_PALETTES):
            raise DataError(f"at most {len(CONTEXT_PALETTES)} contexts are defined")
        if self.classes > len(SHAPES):
            raise DataError(f"at most {len(SHAPES)} shape classes are defined")
        if self.per_cell < 1:
            raise DataError("per_cell must be >= 1")
        if self.size < 8:
            raise DataError("image size must be >= 8")
        if self.noise < 0 or self.color_jitter < 0:
            raise DataError("noise and color_jitter must be non-negative")


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    t = max(r * 0.35, 0.8)  # stroke half-width
    if kind == "hbar":
        return (np.abs(dy) <= t) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= t) & (np.abs(dy) <= r)
    if kind == "disc":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "cross":
        return ((np.abs(dy) <= t) & (np.abs(dx) <= r)) | ((np.abs(dx) <= t) & (np.abs(dy) <= r))
    if kind == "ring":
        d = np.sqrt(dy ** 2 + dx ** 2)
        return (d <= r) & (d >= r - 2 * t)
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r) & ~((np.abs(dy) <= r - 2 * t) & (np.abs(dx) <= r - 2 * t))
    raise DataError(f"unknown shape {kind!r}")


def generate_synthetic(spec: SyntheticContextSpec) -> Dataset:
    """Shapes (the class) drawn on context-coloured backgrounds (the context).

    Every (context, class) cell gets exactly ``per_cell`` images; pixels are
    quantised to bytes so the dataset round-trips through ``save_synthetic``.
    """
    spec.validate()
    rng = stream(spec.seed, "synthetic")
    s = spec.size
    n = spec.contexts * spec.classes * spec.per_cell
    images = np.empty((n, 3, s, s), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    contexts = np.empty(n, dtype=np.int64)
    k = 0
    for ctx in range(spec.contexts):
        bg, fg = (np.asarray(c) for c in CONTEXT_PALETTES[ctx])
        for cls in range(spec.classes):
            for _ in range(spec.per_cell):
                r = rng.uniform(0.22, 0.36) * s
                cy, cx = rng.uniform(r, s - 1 - r, size=2)
                mask = _shape_mask(SHAPES[cls], s, cy, cx, r)
                b = np.clip(bg + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
                f = np.clip(fg + rng.uniform(-spec.color_jitter, spec.color_jitter, 3), 0, 1)
                img = np.where(mask[None], f[:, None, None], b[:, None, None])
                if spec.noise:
                    img = img + rng.normal(0, spec.noise, img.shape)
                images[k] = img
                labels[k] = cls
                contexts[k] = ctx
                k += 1
    order = rng.permutation(n)
    pixels = np.round(np.clip(images[order], 0, 1) * 255).astype(np.uint8)
    return Dataset(_to_unit(pixels), labels[order], "all", spec.classes, contexts=contexts[order])


# --- splitting ------------------------------------------------------------------

def split(ds: Dataset, fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified (by label) train/val split; stats are computed on the train part."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = stream(seed, "split")
    train_idx, val_idx = [], []
    for cls in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == cls)
        if len(members) < 2:
            raise DataError(f"class {cls} has {len(members)} sample(s); need at least 2 to split")
        members = members[rng.permutation(len(members))]
        cut = min(max(int(round(fraction * len(members))), 1), len(members) - 1)
        train_idx.append(members[:cut])
        val_idx.append(members[cut:])
    tr = np.sort(np.concatenate(train_idx))
    va = np.sort(np.concatenate(val_idx))
    train = ds.subset(tr, "train")
    mean, std = channel_stats(train.images)
    return train.with_stats(mean, std), ds.subset(va, "val").with_stats(mean, std)


# --- synthetic dataset file -------------------------------------------------------

SYN_MAGIC = b"XPATHDS\0"
SYN_VERSION = 1


def save_synthetic(ds: Dataset, path) -> None:
    """Header, label bytes, context bytes, then uint8 pixels (N, C, H, W)."""
    n, c, h, w = ds.images.shape
    pixels = np.round(ds.images * 255).astype(np.uint8)
    contexts = np.zeros(n, np.uint8) if ds.contexts is None else ds.contexts.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(SYN_MAGIC)
        fh.write(struct.pack("<6I", SYN_VERSION, n, c, h, w, ds.classes))
        fh.write(ds.labels.astype(np.uint8).tobytes())
        fh.write(contexts.tobytes())
        fh.write(pixels.tobytes())


def load_synthetic(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    head = len(SYN_MAGIC) + 24
    if len(raw) < head or raw[:len(SYN_MAGIC)] != SYN_MAGIC:
        raise DataError(f"{path}: not a synthetic dataset file")
    version, n, c, h, w, classes = struct.unpack_from("<6I", raw, len(SYN_MAGIC))
    if version != SYN_VERSION:
        raise DataError(f"{path}: version {version}, expected {SYN_VERSION}")
    if len(raw) != head + 2 * n + n * c * h * w:
        raise DataError(f"{path}: size {len(raw)} does not match header")
    buf = np.frombuffer(raw, np.uint8, offset=head)
    labels = buf[:n].astype(np.int64)
    contexts = buf[n:2 * n].astype(np.int64)
    pixels = buf[2 * n:].reshape(n, c, h, w)
    return Dataset(_to_unit(pixels), labels, "all", classes, contexts=contexts)
