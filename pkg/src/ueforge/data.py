"""Procedural grayscale shape datasets and the UEDS file format.

Two disjoint shape families supply the finetuning task and the pretraining
source task; classes are balanced, positions and scales are jittered, and the
low foreground contrast plus Gaussian background noise keeps the task
learnable but far from instant: a scratch classifier needs tens of epochs to
converge, which is the regime where error-minimizing shortcuts can outrun
semantic feature learning.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError

_DATA_MAGIC = b"UEDS"
_DATA_VERSION = 1

BACKGROUND = 0.35
FOREGROUND = 0.65
NOISE_SIGMA = 0.05


@dataclass
class Dataset:
    """Images [N,C,H,W] in [0,1], integer labels in [0,K)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    seed: int = 0
    family: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InputError(f"images must be [N,C,H,W], got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise InputError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def batches(self, batch_size: int, order=None):
        """Yield (images, labels) slices; ``order`` permutes example indices."""
        idx = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(idx), batch_size):
            sel = idx[start : start + batch_size]
            yield self.images[sel], self.labels[sel]


# ---------------------------------------------------------------------------
# shape renderers: mask(yy, xx, cy, cx, r, rng) -> bool array


def _square(yy, xx, cy, cx, r, rng):
    return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)


def _disc(yy, xx, cy, cx, r, rng):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _plus(yy, xx, cy, cx, r, rng):
    t = 0.35 * r
    arm_y = (np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= r)
    arm_x = (np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= r)
    return arm_y | arm_x

def _diag_stripes(yy, xx, cy, cx, r, rng):
    period = int(rng.integers(4, 6))
    phase = int(rng.integers(0, period))
    return ((yy + xx + phase) % period) < period // 2


def _triangle(yy, xx, cy, cx, r, rng):
    rows = (yy >= cy - r) & (yy <= cy + r)
    return rows & (np.abs(xx - cx) <= (yy - (cy - r)) * 0.5)


def _saltire(yy, xx, cy, cx, r, rng):
    t = 0.35 * r
    box = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    d1 = np.abs((yy - cy) - (xx - cx)) <= t
    d2 = np.abs((yy - cy) + (xx - cx)) <= t
    return box & (d1 | d2)


def _h_bars(yy, xx, cy, cx, r, rng):
    period = int(rng.integers(4, 6))
    phase = int(rng.integers(0, period))
    return ((yy + phase) % period) < period // 2


def _corner_l(yy, xx, cy, cx, r, rng):
    t = 0.45 * r
    box = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    return box & ((yy >= cy + r - t) | (xx <= cx - r + t))


def _ring(yy, xx, cy, cx, r, rng):
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)


def _checker(yy, xx, cy, cx, r, rng):
    cell = int(rng.integers(3, 5))
    phase = int(rng.integers(0, 2))
    return ((yy // cell + xx // cell + phase) % 2) == 0


def _v_bars(yy, xx, cy, cx, r, rng):
    period = int(rng.integers(4, 6))
    phase = int(rng.integers(0, period))
    return ((xx + phase) % period) < period // 2


def _diamond(yy, xx, cy, cx, r, rng):
    return np.abs(yy - cy) + np.abs(xx - cx) <= r


def _frame(yy, xx, cy, cx, r, rng):
    cheb = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
    return (cheb <= r) & (cheb >= r - 0.4 * r)


def _dot_grid(yy, xx, cy, cx, r, rng):
    period = int(rng.integers(4, 6))
    py = int(rng.integers(0, period))
    px = int(rng.integers(0, period))
    return (((yy + py) % period) < 2) & (((xx + px) % period) < 2)


def _t_shape(yy, xx, cy, cx, r, rng):
    t = 0.4 * r
    bar = (np.abs(yy - (cy - r + t / 2)) <= t / 2 + 0.5) & (np.abs(xx - cx) <= r)
    stem = (np.abs(xx - cx) <= t / 2 + 0.5) & (yy >= cy - r) & (yy <= cy + r)
    return bar | stem


def _u_shape(yy, xx, cy, cx, r, rng):
    t = 0.4 * r
    left = (np.abs(xx - (cx - r + t / 2)) <= t / 2 + 0.5) & (np.abs(yy - cy) <= r)
    right = (np.abs(xx - (cx + r - t / 2)) <= t / 2 + 0.5) & (np.abs(yy - cy) <= r)
    bottom = (np.abs(yy - (cy + r - t / 2)) <= t / 2 + 0.5) & (np.abs(xx - cx) <= r)
    return left | right | bottom


SHAPE_FAMILIES = (
    (("square", _square), ("disc", _disc), ("plus", _plus), ("diag_stripes", _diag_stripes),
     ("triangle", _triangle), ("saltire", _saltire), ("h_bars", _h_bars), ("corner_l", _corner_l)),
    (("ring", _ring), ("checker", _checker), ("v_bars", _v_bars), ("diamond", _diamond),
     ("frame", _frame), ("dot_grid", _dot_grid), ("t_shape", _t_shape), ("u_shape", _u_shape)),
)


def family_class_names(family: int, num_classes: int):
    return tuple(name for name, _ in SHAPE_FAMILIES[family][:num_classes])


def _render_example(shape_fn, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    jitter = size / 5.0
    cy = (size - 1) / 2.0 + rng.uniform(-jitter, jitter)
    cx = (size - 1) / 2.0 + rng.uniform(-jitter, jitter)
    r = 0.20 * size * rng.uniform(0.75, 1.25)
    mask = shape_fn(yy, xx, cy, cx, r, rng)
    fg = FOREGROUND + rng.uniform(-0.1, 0.1)
    img = BACKGROUND + (fg - BACKGROUND) * mask.astype(np.float64)
    img = img + rng.normal(0.0, NOISE_SIGMA, img.shape)
    return np.clip(img, 0.0, 1.0)


def _draw_split(shapes, n, size, num_classes, rng, split, seed, family):
    labels = (np.arange(n) % num_classes).astype(np.int64)
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 1, size, size))
    for i, lab in enumerate(labels):
        images[i, 0] = _render_example(shapes[lab][1], size, rng)
    return Dataset(images, labels, num_classes, split=split, seed=seed, family=family,
                   meta={"classes": [shapes[k][0] for k in range(num_classes)]})


def gen_data(seed: int, num_classes: int = 4, n_train: int = 2048, n_test: int = 512,
             family: int = 0, image_size: int = 16):
    """Deterministically generate balanced (train, test) splits for one family."""
    if not 2 <= num_classes <= 16:
        raise InputError(f"num_classes must lie in [2, 16], got {num_classes}")
    if not 16 <= image_size <= 32:
        raise InputError(f"image_size must lie in [16, 32], got {image_size}")
    if family not in range(len(SHAPE_FAMILIES)):
        raise InputError(f"unknown family {family}")
    shapes = SHAPE_FAMILIES[family]
    if num_classes > len(shapes):
        raise InputError(
            f"num_classes {num_classes} exceeds the {len(shapes)} shapes of family {family}"
        )
    rng = np.random.default_rng([int(seed), int(family)])
    train = _draw_split(shapes, n_train, image_size, num_classes, rng, "train", seed, family)
    test = _draw_split(shapes, n_test, image_size, num_classes, rng, "test", seed, family)
    return train, test


def nearest_centroid_accuracy(train: Dataset, test: Dataset) -> float:
    """Raw-pixel nearest-centroid classifier; a floor on task learnability."""
    k = train.num_classes
    flat_train = train.images.reshape(len(train), -1)
    centroids = np.stack([flat_train[train.labels == c].mean(axis=0) for c in range(k)])
    flat_test = test.images.reshape(len(test), -1)
    d2 = ((flat_test[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return float((d2.argmin(axis=1) == test.labels).mean())


# ---------------------------------------------------------------------------
# UEDS serialization


def save_dataset(ds: Dataset, path: str) -> None:
    n, c, h, w = ds.images.shape
    buf = io.BytesIO()
    buf.write(_DATA_MAGIC)
    buf.write(struct.pack("<H", _DATA_VERSION))
    buf.write(struct.pack("<IIII", n, c, h, w))
    buf.write(struct.pack("<H", ds.num_classes))
    buf.write(ds.images.astype("<f8").tobytes(order="C"))
    buf.write(ds.labels.astype("<u2").tobytes(order="C"))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_dataset(path: str, split: str = "train") -> Dataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if len(raw) < 20 or bytes(view[:4]) != _DATA_MAGIC:
        raise FormatError(f"{path}: not a UEDS dataset file")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != _DATA_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    n, c, h, w = struct.unpack_from("<IIII", raw, 6)
    (k,) = struct.unpack_from("<H", raw, 22)
    offset = 24
    img_bytes = n * c * h * w * 8
    if len(raw) < offset + img_bytes + n * 2:
        raise FormatError(f"{path}: truncated dataset payload")
    images = np.frombuffer(raw, dtype="<f8", count=n * c * h * w, offset=offset).reshape(n, c, h, w).copy()
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=offset + img_bytes).astype(np.int64)
    return Dataset(images, labels, int(k), split=split)
