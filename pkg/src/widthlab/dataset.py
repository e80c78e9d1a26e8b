"""Task ingestion: IDX corpora, rotated task sequences, synthetic fixtures.

A "task" is one supervised classification dataset. Rotated sequences share
a single (seeded) subsample of base images rotated by per-task angles, so
every task has the same labels and sample count.
"""

import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, NamedTuple

import numpy as np

from .errors import ConfigError, ConsistencyError, FormatError, LengthError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class RawCorpus:
    """Unscaled byte images with labels, as read from IDX files."""

    images: np.ndarray  # (count, height, width) uint8
    labels: np.ndarray  # (count,) uint8

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f"{len(self.images)} images vs {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.images)


@dataclass
class TaskDataset:
    """One classification task: inputs in [0,1], integer labels."""

    inputs: np.ndarray  # (n, d) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, n_classes)
    task_id: int
    rotation_deg: float
    n_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) == 0:
            raise ValueError("inputs must be a non-empty (n, d) array")
        if len(self.labels) != len(self.inputs):
            raise ConsistencyError("label count differs from input count")
        if self.inputs.size and (self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ValueError("inputs must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels must lie in [0, n_classes)")

    @property
    def n(self) -> int:
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


class TaskSplit(NamedTuple):
    """Train/test halves of one task (same rotation, disjoint examples)."""

    train: TaskDataset
    test: TaskDataset


def _read_be32(stream: BinaryIO) -> int:
    data = stream.read(4)
    if len(data) < 4:
        raise LengthError("stream truncated inside header")
    return struct.unpack(">I", data)[0]


def _as_stream(source):
    if isinstance(source, (bytes, bytearray)):
        import io

        return io.BytesIO(source)
    return source


def parse_idx(image_bytes, label_bytes) -> RawCorpus:
    """Parse big-endian IDX image/label streams into a RawCorpus.

    Counts are cross-checked between the two streams; pixel bytes are kept
    unscaled.
    """
    img = _as_stream(image_bytes)
    magic = _read_be32(img)
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x}")
    count = _read_be32(img)
    height = _read_be32(img)
    width = _read_be32(img)
    payload = img.read(count * height * width)
    if len(payload) < count * height * width:
        raise LengthError(
            f"image payload holds {len(payload)} bytes, "
            f"expected {count * height * width}"
        )
    images = np.frombuffer(payload, dtype=np.uint8).reshape(count, height, width)

    lab = _as_stream(label_bytes)
    magic = _read_be32(lab)
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"bad label magic 0x{magic:08x}")
    label_count = _read_be32(lab)
    label_payload = lab.read(label_count)
    if len(label_payload) < label_count:
        raise LengthError(
            f"label payload holds {len(label_payload)} bytes, expected {label_count}"
        )
    labels = np.frombuffer(label_payload, dtype=np.uint8)

    if count != label_count:
        raise ConsistencyError(f"{count} images vs {label_count} labels")
    return RawCorpus(images=images.copy(), labels=labels.copy())


def write_idx(corpus: RawCorpus) -> tuple[bytes, bytes]:
    """Serialize a corpus back to (image_bytes, label_bytes) IDX streams."""
    n, h, w = corpus.images.shape
    image_bytes = struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w)
    image_bytes += corpus.images.astype(np.uint8).tobytes()
    label_bytes = struct.pack(">II", IDX_LABEL_MAGIC, n)
    label_bytes += corpus.labels.astype(np.uint8).tobytes()
    return image_bytes, label_bytes


def rotate_image(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate counterclockwise about the image center, bilinear, zero fill.

    The center is ((H-1)/2, (W-1)/2); source coordinates falling outside
    the image contribute 0, and the result is clamped to [0, 1]. A 0-degree
    rotation returns a bit-identical copy.
    """
    img = np.asarray(img, dtype=np.float64)
    if not math.isfinite(angle_deg):
        raise ValueError("angle must be finite")
    if angle_deg == 0.0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)

    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # math coords: x right, y up; visual CCW means sampling the source at
    # the clockwise-rotated point
    x = cols - cx
    y = cy - rows
    xs = cos_t * x + sin_t * y
    ys = -sin_t * x + cos_t * y
    src_col = cx + xs
    src_row = cy - ys

    r0 = np.floor(src_row).astype(np.int64)
    c0 = np.floor(src_col).astype(np.int64)
    fr = src_row - r0
    fc = src_col - c0

    out = np.zeros_like(img)
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        vals = np.where(inside, img[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)], 0.0)
        out += weight * vals
    return np.clip(out, 0.0, 1.0)


def build_task_sequence(
    corpus: RawCorpus,
    angles: list[float],
    subsample: int | None,
    seed: int,
) -> list[TaskDataset]:
    """One task per angle, all sharing the same seeded subsample of images.

    Pixels are scaled to [0,1] by /255 before rotation; task ids ascend in
    angle-list order and every task carries the same label set.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    if not angles:
        raise ConfigError("angle list is empty")
    n = len(corpus)
    if subsample is None:
        chosen = np.arange(n)
    else:
        if subsample > n:
            raise ConfigError(f"subsample {subsample} exceeds corpus size {n}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A]))
        chosen = np.sort(rng.choice(n, size=subsample, replace=False))

    base = corpus.images[chosen].astype(np.float64) / 255.0
    labels = corpus.labels[chosen].astype(np.int64)
    n_classes = int(corpus.labels.max()) + 1

    tasks = []
    for task_id, angle in enumerate(angles):
        if angle == 0.0:
            rotated = base.copy()
        else:
            rotated = np.stack([rotate_image(im, angle) for im in base])
        tasks.append(
            TaskDataset(
                inputs=rotated.reshape(len(rotated), -1),
                labels=labels.copy(),
                task_id=task_id,
                rotation_deg=float(angle),
                n_classes=n_classes,
            )
        )
    return tasks


def synthetic_tasks(
    n_tasks: int, n: int, dim: int, n_classes: int, seed: int
) -> list[TaskDataset]:
    """Seeded Gaussian class-cluster tasks, labels balanced within one.

    Cluster means sit inside [0.25, 0.75]^d and samples are clipped to
    [0, 1], so the tasks satisfy the same input-range invariant as image
    tasks while staying linearly separable enough for quick training.
    """
    if min(n_tasks, n, dim, n_classes) <= 0:
        raise ConfigError("all synthetic-task counts must be positive")
    if n_classes > n:
        raise ConfigError("more classes than examples")
    tasks = []
    for task_id in range(n_tasks):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x57A7, task_id]))
        means = rng.uniform(0.25, 0.75, size=(n_classes, dim))
        per_class = [n // n_classes] * n_classes
        for k in range(n % n_classes):
            per_class[k] += 1
        labels = np.repeat(np.arange(n_classes), per_class)
        points = means[labels] + rng.normal(0.0, 0.08, size=(n, dim))
        order = rng.permutation(n)
        tasks.append(
            TaskDataset(
                inputs=np.clip(points[order], 0.0, 1.0),
                labels=labels[order],
                task_id=task_id,
                rotation_deg=0.0,
                n_classes=n_classes,
            )
        )
    return tasks


def bundled_digits_corpus(
    upsample: int = 2, test_fraction: float = 0.2, seed: int = 0
) -> tuple[RawCorpus, RawCorpus]:
    """Train/test corpora built from scikit-learn's bundled digits.

    Fallback for environments without MNIST-style IDX files on disk: 1797
    real 8x8 handwritten digits, optionally upsampled by pixel replication
    so rotations have room to interpolate. Deterministic for a fixed seed.
    """
    from sklearn.datasets import load_digits  # deferred: only this path needs it

    digits = load_digits()
    images = np.round(digits.images / 16.0 * 255.0).astype(np.uint8)
    if upsample > 1:
        images = np.kron(images, np.ones((1, upsample, upsample), dtype=np.uint8))
    labels = digits.target.astype(np.uint8)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD161]))
    order = rng.permutation(len(images))
    n_test = int(round(len(images) * test_fraction))
    test_idx, train_idx = order[:n_test], order[n_test:]
    return (
        RawCorpus(images=images[train_idx], labels=labels[train_idx]),
        RawCorpus(images=images[test_idx], labels=labels[test_idx]),
    )
