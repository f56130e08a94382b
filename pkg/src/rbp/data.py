"""Dataset ingestion, augmentation, and seeded batching.

Reads the standard public binary layouts: IDX for MNIST-style corpora and
the CIFAR-10 batch format.  A deterministic synthetic digit corpus in the
same IDX layout is provided for desk-scale runs where the real files are
not on disk; it renders jittered 5x7 glyph bitmaps, which a small CNN
learns to high accuracy within a few epochs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng


class DataError(RuntimeError):
    """Missing or corrupt dataset files; message carries byte-level context."""


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
_CIFAR_RECORD = 3073
_CIFAR_RECORDS_PER_FILE = 10000

# community-standard normalization constants
MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class Dataset:
    name: str
    split: str
    images: np.ndarray  # uint8, NCHW
    labels: np.ndarray  # int64
    num_classes: int
    mean: tuple
    std: tuple

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DataError(f"images must be uint8 NCHW, got {self.images.dtype} "
                            f"{self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"labels shape {self.labels.shape} does not match "
                            f"{self.images.shape[0]} images")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise DataError(f"label out of range [0, {self.num_classes}): "
                            f"[{self.labels.min()}, {self.labels.max()}]")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]


# ---------------------------------------------------------------------------
# IDX (MNIST layout).


def _read_exact(f, count: int, path: Path, what: str) -> bytes:
    offset = f.tell()
    buf = f.read(count)
    if len(buf) != count:
        raise DataError(f"{path}: truncated while reading {what}: wanted {count} bytes "
                        f"at offset {offset}, got {len(buf)}")
    return buf


def read_idx_images(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    with open(path, "rb") as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, path, "header"))
        if magic != 2051:
            raise DataError(f"{path}: bad magic {magic:#x} at offset 0, expected 2051 "
                            f"(IDX image file)")
        raw = _read_exact(f, count * rows * cols, path, f"{count} images")
        if f.read(1):
            raise DataError(f"{path}: trailing bytes after {count} images")
    return np.frombuffer(raw, dtype=np.uint8).reshape(count, 1, rows, cols)


def read_idx_labels(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    with open(path, "rb") as f:
        magic, count = struct.unpack(">II", _read_exact(f, 8, path, "header"))
        if magic != 2049:
            raise DataError(f"{path}: bad magic {magic:#x} at offset 0, expected 2049 "
                            f"(IDX label file)")
        raw = _read_exact(f, count, path, f"{count} labels")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def write_idx_images(path: Path, images: np.ndarray) -> None:
    n, _, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, n, rows, cols))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def _load_mnist(root: Path, split: str) -> Dataset:
    image_file, label_file = MNIST_FILES[split]
    images = read_idx_images(root / image_file)
    labels = read_idx_labels(root / label_file)
    if len(images) != len(labels):
        raise DataError(f"{root}: {len(images)} images but {len(labels)} labels")
    return Dataset("mnist", split, images, labels, 10, MNIST_MEAN, MNIST_STD)


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches.


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    size = path.stat().st_size
    expected = _CIFAR_RECORD * _CIFAR_RECORDS_PER_FILE
    if size != expected:
        whole = size // _CIFAR_RECORD
        raise DataError(f"{path}: expected {expected} bytes "
                        f"({_CIFAR_RECORDS_PER_FILE} records of {_CIFAR_RECORD}), got "
                        f"{size}: truncated at record {whole}, byte offset "
                        f"{whole * _CIFAR_RECORD}")
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    records = raw.reshape(_CIFAR_RECORDS_PER_FILE, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    images = records[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def _load_cifar10(root: Path, split: str) -> Dataset:
    files = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    parts = [_read_cifar_file(root / name) for name in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset("cifar10", split, np.ascontiguousarray(images), labels, 10,
                   CIFAR_MEAN, CIFAR_STD)


def load_dataset(name: str, root, split: str = "train") -> Dataset:
    """Load a supported corpus from its standard binary files."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(root)
    if name == "mnist":
        return _load_mnist(root, split)
    if name == "cifar10":
        return _load_cifar10(root, split)
    raise ValueError(f"unknown dataset {name!r}; choices: mnist, cifar10")


def expected_files(name: str, split: str = "train") -> list[str]:
    if name == "mnist":
        return list(MNIST_FILES[split])
    if name == "cifar10":
        return list(CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES)
    raise ValueError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------------------
# Synthetic digit corpus (IDX layout, deterministic).

_GLYPHS = [
    ".###. #...# #..## #.#.# ##..# #...# .###.",
    "..#.. .##.. ..#.. ..#.. ..#.. ..#.. .###.",
    ".###. #...# ....# ...#. ..#.. .#... #####",
    ".###. #...# ....# ..##. ....# #...# .###.",
    "...#. ..##. .#.#. #..#. ##### ...#. ...#.",
    "##### #.... ####. ....# ....# #...# .###.",
    "..##. .#... #.... ####. #...# #...# .###.",
    "##### ....# ...#. ..#.. ..#.. ..#.. ..#..",
    ".###. #...# #...# .###. #...# #...# .###.",
    ".###. #...# #...# .#### ....# ...#. .##..",
]


def _glyph_mask(digit: int, scale: int = 3) -> np.ndarray:
    rows = _GLYPHS[digit].split()
    bits = np.array([[ch == "#" for ch in row] for row in rows], dtype=np.float32)
    return np.kron(bits, np.ones((scale, scale), dtype=np.float32))


def render_digits(n: int, seed: int, image_size: int = 28,
                  noise: float = 40.0) -> tuple[np.ndarray, np.ndarray]:
    """n jittered noisy digit images (uint8 NCHW) with balanced labels."""
    gen = rng.stream("digits", seed, n, image_size)
    labels = gen.permutation(np.arange(n) % 10).astype(np.int64)
    masks = [_glyph_mask(d) for d in range(10)]
    gh, gw = masks[0].shape
    images = np.zeros((n, 1, image_size, image_size), dtype=np.uint8)
    max_dy, max_dx = image_size - gh, image_size - gw
    for i, label in enumerate(labels):
        dy = int(gen.integers(0, max_dy + 1))
        dx = int(gen.integers(0, max_dx + 1))
        intensity = float(gen.uniform(120, 255))
        canvas = np.zeros((image_size, image_size), dtype=np.float32)
        canvas[dy:dy + gh, dx:dx + gw] = masks[label] * intensity
        canvas += gen.normal(0.0, noise, canvas.shape)
        images[i, 0] = np.clip(canvas, 0, 255).astype(np.uint8)
    return images, labels


def synthesize_digits_corpus(root, n_train: int = 8000, n_test: int = 2000,
                             seed: int = 0) -> None:
    """Write a synthetic MNIST-layout corpus under root (idempotent per args)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, count, split_seed in (("train", n_train, seed), ("test", n_test, seed + 1)):
        image_file, label_file = MNIST_FILES[split]
        if (root / image_file).exists() and (root / label_file).exists():
            continue
        images, labels = render_digits(count, split_seed)
        write_idx_images(root / image_file, images)
        write_idx_labels(root / label_file, labels)


# ---------------------------------------------------------------------------
# Augmentation.


@dataclass(frozen=True)
class AugmentPolicy:
    """How raw uint8 images become network inputs; normalization always last."""

    kind: str  # "none" | "pad_crop_flip" | "resize_crop_flip"
    train: bool = True
    pad: int = 4
    resize_to: int = 36
    crop: int = 32
    mean: tuple = (0.0,)
    std: tuple = (1.0,)


def hflip(image: np.ndarray) -> np.ndarray:
    """Horizontal flip of a CHW image (an involution)."""
    return image[:, :, ::-1]


def _normalize(image: np.ndarray, mean, std) -> np.ndarray:
    x = image.astype(np.float32) / 255.0
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return (x - m) / s


def denormalize(x: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return (x * s + m) * 255.0


def _resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.astype(np.float32)
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    img = image.astype(np.float32)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def augment(image: np.ndarray, policy: AugmentPolicy, gen: np.random.Generator) -> np.ndarray:
    """Transform one CHW uint8 image into a normalized float32 input."""
    c, h, w = image.shape
    if len(policy.mean) != c:
        raise ValueError(f"policy for {len(policy.mean)}-channel images applied to "
                         f"{c}-channel input")
    out = image
    if policy.kind == "none":
        pass
    elif policy.kind == "pad_crop_flip":
        if policy.train:
            p = policy.pad
            padded = np.pad(out, ((0, 0), (p, p), (p, p)))
            dy = int(gen.integers(0, 2 * p + 1))
            dx = int(gen.integers(0, 2 * p + 1))
            out = padded[:, dy:dy + h, dx:dx + w]
            if gen.random() < 0.5:
                out = hflip(out)
    elif policy.kind == "resize_crop_flip":
        resized = _resize_bilinear(out, policy.resize_to, policy.resize_to)
        k = policy.crop
        if policy.train:
            dy = int(gen.integers(0, policy.resize_to - k + 1))
            dx = int(gen.integers(0, policy.resize_to - k + 1))
            out = resized[:, dy:dy + k, dx:dx + k]
            if gen.random() < 0.5:
                out = hflip(out)
        else:
            off = (policy.resize_to - k) // 2
            out = resized[:, off:off + k, off:off + k]
        return _normalize(np.clip(out, 0, 255).astype(np.uint8), policy.mean, policy.std)
    else:
        raise ValueError(f"unknown augmentation kind {policy.kind!r}")
    return _normalize(np.ascontiguousarray(out), policy.mean, policy.std)


def augment_batch(images: np.ndarray, policy: AugmentPolicy,
                  gen: np.random.Generator) -> np.ndarray:
    if policy.kind == "none":
        # vectorized fast path; identical result to per-image application
        return _normalize_batch(images, policy.mean, policy.std)
    return np.stack([augment(img, policy, gen) for img in images])


def _normalize_batch(images: np.ndarray, mean, std) -> np.ndarray:
    x = images.astype(np.float32) / 255.0
    m = np.asarray(mean, dtype=np.float32)[None, :, None, None]
    s = np.asarray(std, dtype=np.float32)[None, :, None, None]
    return (x - m) / s


def policy_for(dataset: Dataset, kind: str, train: bool) -> AugmentPolicy:
    return AugmentPolicy(kind=kind, train=train, mean=dataset.mean, std=dataset.std)


# ---------------------------------------------------------------------------
# Seeded batching.


@dataclass
class Batch:
    images: np.ndarray  # uint8 NCHW
    labels: np.ndarray
    epoch: int
    index: int

    @property
    def size(self) -> int:
        return self.images.shape[0]


def batches(dataset: Dataset, batch_size: int, epoch: int, seed: int):
    """Shuffled batch stream; the permutation depends only on (seed, epoch).

    The last partial batch is kept, so every example appears exactly once
    per epoch.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    perm = rng.stream("shuffle", seed, epoch).permutation(len(dataset))
    for index, start in enumerate(range(0, len(dataset), batch_size)):
        sel = perm[start:start + batch_size]
        yield Batch(dataset.images[sel], dataset.labels[sel], epoch, index)
