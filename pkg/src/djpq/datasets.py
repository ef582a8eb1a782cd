"""Dataset ingestion: MNIST IDX and CIFAR-10 binary formats.

Raw u8 archives are normalized to [0,1], standardized per channel, and
uniformly quantized to 8 bits. Standardization constants default to the
loaded split's own statistics; pass the training split's stats when
loading a test split. Batch iteration is deterministic for a fixed seed,
with an optional single prefetcher thread that preserves batch order.

Also ships a deterministic synthetic digit-glyph generator that writes
genuine IDX files, for running the desk-scale benchmark without a
downloaded corpus.
"""

from __future__ import annotations

import hashlib
import os
import queue
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError

FORMATS = ("mnist-idx", "cifar10-bin")

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixels


def parse_idx_images(buf, path="<bytes>"):
    """IDX image payload -> u8 array [N, H, W]."""
    if len(buf) < 16:
        raise FormatError(f"{path}: truncated IDX header, file ends at "
                          f"byte offset {len(buf)}, need 16")
    magic, n, h, w = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{path}: bad image magic 0x{magic:08x} at byte "
                          f"offset 0, expected 0x{IDX_IMAGE_MAGIC:08x}")
    expected = 16 + n * h * w
    if len(buf) != expected:
        raise FormatError(f"{path}: payload ends at byte offset {len(buf)}, "
                          f"expected {expected} for {n}x{h}x{w} images")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, h, w)


def parse_idx_labels(buf, path="<bytes>"):
    """IDX label payload -> u8 array [N]."""
    if len(buf) < 8:
        raise FormatError(f"{path}: truncated IDX header, file ends at "
                          f"byte offset {len(buf)}, need 8")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"{path}: bad label magic 0x{magic:08x} at byte "
                          f"offset 0, expected 0x{IDX_LABEL_MAGIC:08x}")
    expected = 8 + n
    if len(buf) != expected:
        raise FormatError(f"{path}: payload ends at byte offset {len(buf)}, "
                          f"expected {expected} for {n} labels")
    labels = np.frombuffer(buf, dtype=np.uint8, offset=8)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range "
                          f"at byte offset {8 + int(bad[0])}")
    return labels


def parse_cifar10(buf, path="<bytes>"):
    """CIFAR-10 binary batch -> (u8 images [N, 3, 32, 32], u8 labels [N])."""
    if len(buf) % CIFAR_RECORD:
        raise FormatError(
            f"{path}: file size {len(buf)} is not a multiple of "
            f"{CIFAR_RECORD}; record truncated at byte offset "
            f"{len(buf) - len(buf) % CIFAR_RECORD}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} out of range "
                          f"at byte offset {int(bad[0]) * CIFAR_RECORD}")
    images = raw[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def write_idx_images(path, images):
    images = np.ascontiguousarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


@dataclass
class SplitStats:
    """Per-channel constants of the training split, kept for the manifest."""

    mean: np.ndarray        # of the [0,1]-normalized images
    std: np.ndarray
    quant_step: np.ndarray  # 8-bit grid pitch of the standardized images


@dataclass
class DataSplit:
    images: np.ndarray  # float32 [N, C, H, W], standardized and quantized
    labels: np.ndarray  # int64 [N]
    stats: SplitStats
    fingerprint: str    # sha256 over the raw files, in load order

    def __len__(self):
        return self.images.shape[0]


def _read_file(path, hasher):
    if not os.path.exists(path):
        raise DataError(f"dataset file not found: {path}")
    with open(path, "rb") as fh:
        buf = fh.read()
    hasher.update(buf)
    return buf


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

INPUT_BITS = 8
_QUANT_LEVELS = 2 ** (INPUT_BITS - 1) - 1  # signed symmetric grid


def _prepare(images_u8, labels_u8, stats, pad_to, fingerprint):
    images = images_u8.astype(np.float32) / np.float32(255.0)
    if pad_to is not None:
        n, c, h, w = images.shape
        th, tw = pad_to
        if th < h or tw < w:
            raise DataError(f"cannot pad {h}x{w} images down to {th}x{tw}")
        padded = np.zeros((n, c, th, tw), dtype=np.float32)
        top, left = (th - h) // 2, (tw - w) // 2
        padded[:, :, top:top + h, left:left + w] = images
        images = padded
    if stats is None:
        mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
        std = images.std(axis=(0, 2, 3), dtype=np.float64)
        std = np.maximum(std, 1e-6)
        stats = SplitStats(mean=mean, std=std, quant_step=None)
    shape = (1, -1, 1, 1)
    images = (images - stats.mean.reshape(shape).astype(np.float32)) \
        / stats.std.reshape(shape).astype(np.float32)
    if stats.quant_step is None:
        peak = np.abs(images).max(axis=(0, 2, 3)).astype(np.float64)
        stats.quant_step = np.maximum(peak, 1e-6) / _QUANT_LEVELS
    # symmetric uniform 8-bit grid, round half away from zero
    step = stats.quant_step.reshape(shape).astype(np.float32)
    ticks = np.floor(np.abs(images) / step + np.float32(0.5))
    ticks = np.minimum(ticks, np.float32(_QUANT_LEVELS))
    images = np.sign(images) * ticks * step
    return DataSplit(images=images.astype(np.float32),
                     labels=labels_u8.astype(np.int64),
                     stats=stats, fingerprint=fingerprint)


def load_dataset(path, format, split, pad_to=None, stats=None, limit=None):
    """Load one split from a dataset directory.

    path: directory holding the standard-named binary files.
    format: "mnist-idx" or "cifar10-bin".
    split: "train" or "test".
    pad_to: optional (H, W) zero-padding of the raw images.
    stats: SplitStats from the training split, for consistent test
        standardization. None computes stats from this split.
    limit: keep only the first `limit` samples.
    """
    if format not in FORMATS:
        raise DataError(f"unknown dataset format {format!r}; "
                        f"expected one of {', '.join(FORMATS)}")
    if split not in ("train", "test"):
        raise DataError(f"unknown split {split!r}; expected train or test")
    hasher = hashlib.sha256()
    if format == "mnist-idx":
        img_name, lab_name = _MNIST_FILES[split]
        images = parse_idx_images(
            _read_file(os.path.join(path, img_name), hasher), img_name)
        labels = parse_idx_labels(
            _read_file(os.path.join(path, lab_name), hasher), lab_name)
        images = images[:, None, :, :]  # one channel
    else:
        if split == "train":
            names = [f"data_batch_{i}.bin" for i in range(1, 6)]
            names = [n for n in names if os.path.exists(os.path.join(path, n))]
            if not names:
                raise DataError(f"no data_batch_*.bin files under {path}")
        else:
            names = ["test_batch.bin"]
        parts = [parse_cifar10(_read_file(os.path.join(path, n), hasher), n)
                 for n in names]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{path}: {images.shape[0]} images but "
                          f"{labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return _prepare(images, labels, stats, pad_to, hasher.hexdigest())


class BatchStream:
    """Deterministic mini-batch iterator.

    Each pass yields (images float32 [B,C,H,W], labels int64 [B]) with a
    fresh permutation drawn from the stream's own generator, so epoch
    order is a pure function of the seed. prefetch=True stages batches
    through a single worker thread without changing their order.
    """

    def __init__(self, split, batch_size, seed=0, shuffle=True,
                 flip=False, prefetch=False):
        if batch_size < 1:
            raise DataError(f"batch size must be >= 1, got {batch_size}")
        self.images = split.images
        self.labels = split.labels
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.flip = flip
        self.prefetch = prefetch
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return (self.images.shape[0] + self.batch_size - 1) \
            // self.batch_size

    def _batches(self):
        n = self.images.shape[0]
        order = self.rng.permutation(n) if self.shuffle else np.arange(n)
        flips = self.rng.random(n) < 0.5 if self.flip else None
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            x = self.images[idx]
            if flips is not None:
                x = x.copy()
                chosen = flips[start:start + self.batch_size]
                x[chosen] = x[chosen, :, :, ::-1]
            yield x, self.labels[idx]

    def __iter__(self):
        if not self.prefetch:
            yield from self._batches()
            return
        q = queue.Queue(maxsize=2)

        def worker():
            for item in self._batches():
                q.put(item)
            q.put(None)

        t = threading.Thread(target=worker, daemon=True)
        t.start()
        while True:
            item = q.get()
            if item is None:
                break
            yield item
        t.join()


# 5x7 digit glyphs for the synthetic corpus
_GLYPHS = (
    ".###. #...# #..## #.#.# ##..# #...# .###.",
    "..#.. .##.. ..#.. ..#.. ..#.. ..#.. .###.",
    ".###. #...# ....# ...#. ..#.. .#... #####",
    ".###. #...# ....# ..##. ....# #...# .###.",
    "...#. ..##. .#.#. #..#. ##### ...#. ...#.",
    "##### #.... ####. ....# ....# #...# .###.",
    ".###. #.... ####. #...# #...# #...# .###.",
    "##### ....# ...#. ..#.. ..#.. ..#.. ..#..",
    ".###. #...# #...# .###. #...# #...# .###.",
    ".###. #...# #...# .#### ....# ....# .###.",
)


def _glyph_masks():
    masks = []
    for spec in _GLYPHS:
        rows = spec.split()
        masks.append(np.array([[c == "#" for c in row] for row in rows],
                              dtype=np.uint8))
    return masks


def _box_blur(img):
    acc = np.zeros(img.shape, dtype=np.float32)
    padded = np.pad(img.astype(np.float32), 1)
    for dy in range(3):
        for dx in range(3):
            acc += padded[dy:dy + img.shape[0], dx:dx + img.shape[1]]
    return np.clip(acc / 9.0, 0, 255).astype(np.uint8)


def render_glyphs(n, rng, size=28):
    """n noisy digit images [n, size, size] u8 with labels [n]."""
    masks = _glyph_masks()
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = np.zeros((n, size, size), dtype=np.uint8)
    for i in range(n):
        mask = masks[labels[i]]
        sy = int(rng.integers(3, 5))
        sx = int(rng.integers(3, 5))
        big = np.repeat(np.repeat(mask, sy, axis=0), sx, axis=1)
        h, w = big.shape
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        fg = float(rng.integers(170, 256))
        canvas = rng.integers(0, 28, size=(size, size)).astype(np.float32)
        patch = big.astype(np.float32) * fg
        patch += rng.normal(0, 12, size=big.shape).astype(np.float32) * big
        canvas[top:top + h, left:left + w] += patch
        images[i] = _box_blur(np.clip(canvas, 0, 255))
    return images, labels


def make_synthetic_dataset(out_dir, train_n=3072, test_n=512, seed=0):
    """Write a synthetic glyph corpus in MNIST IDX layout. Returns out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split, n in (("train", train_n), ("test", test_n)):
        images, labels = render_glyphs(n, rng)
        img_name, lab_name = _MNIST_FILES[split]
        write_idx_images(os.path.join(out_dir, img_name), images)
        write_idx_labels(os.path.join(out_dir, lab_name), labels)
    return out_dir
