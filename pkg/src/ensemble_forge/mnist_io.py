"""MNIST IDX parsing, zero-mean normalization and stratified subsetting.

IDX layout (all header integers are 32-bit big-endian)::

    images: 00 00 08 03 | count | rows | cols | count*rows*cols uint8
    labels: 00 00 08 01 | count | count uint8

Files may be stored plain or gzip-compressed; compression is detected from
the ``1f 8b`` prefix, not the file name.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ensemble_forge.errors import (
    CountMismatch,
    CountTooLarge,
    DataError,
    LabelOutOfRange,
    TrailingBytes,
    TruncatedPayload,
    WrongMagic,
)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_PIXELS = 784
N_CLASSES = 10

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _readonly(a, dtype) -> np.ndarray:
    """Read-only C-contiguous array. Already read-only arrays are used as-is;
    writable ones are copied so later caller mutations cannot leak in."""
    arr = np.ascontiguousarray(a, dtype=dtype)
    if arr.flags.writeable:
        if arr is a or np.shares_memory(arr, a):
            arr = arr.copy()
        arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RawImageSet:
    count: int
    rows: int
    cols: int
    pixels: np.ndarray  # uint8, shape (count, rows*cols)

    def __post_init__(self):
        pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if pixels.size != self.count * self.rows * self.cols:
            raise DataError(
                f"pixel payload has {pixels.size} entries, header implies "
                f"{self.count * self.rows * self.cols}"
            )
        object.__setattr__(
            self, "pixels", _frozen(pixels.reshape(self.count, self.rows * self.cols))
        )

    def __eq__(self, other):
        if not isinstance(other, RawImageSet):
            return NotImplemented
        return (
            (self.count, self.rows, self.cols) == (other.count, other.rows, other.cols)
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True, eq=False)
class LabelSet:
    count: int
    labels: np.ndarray  # int64, shape (count,)

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.size != self.count:
            raise DataError(f"{labels.size} labels for declared count {self.count}")
        if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
            raise LabelOutOfRange(f"labels must lie in 0..{N_CLASSES - 1}")
        object.__setattr__(self, "labels", _frozen(labels.copy()))

    def __eq__(self, other):
        if not isinstance(other, LabelSet):
            return NotImplemented
        return self.count == other.count and np.array_equal(self.labels, other.labels)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Normalized image vectors with labels.

    ``mean_offset`` is the scalar subtracted from the [0, 1]-scaled pixels;
    it always comes from the training split so train and test stay
    comparable.
    """

    inputs: np.ndarray  # float64, shape (count, 784)
    labels: np.ndarray  # int64, shape (count,)
    mean_offset: float

    def __post_init__(self):
        inputs = _readonly(self.inputs, np.float64)
        labels = _readonly(np.reshape(self.labels, -1), np.int64)
        if inputs.ndim != 2 or inputs.shape[1] != N_PIXELS:
            raise DataError(f"inputs must have shape (count, {N_PIXELS}), got {inputs.shape}")
        if inputs.shape[0] != labels.shape[0]:
            raise CountMismatch(f"{inputs.shape[0]} inputs vs {labels.shape[0]} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= N_CLASSES):
            raise LabelOutOfRange(f"labels must lie in 0..{N_CLASSES - 1}")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "mean_offset", float(self.mean_offset))

    @property
    def count(self) -> int:
        return self.inputs.shape[0]

    def __len__(self):
        return self.count

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.mean_offset == other.mean_offset
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
        )


def _read_header(buf: bytes, magic: int, n_dims: int) -> tuple[int, ...]:
    n_header = 4 * (1 + n_dims)
    if len(buf) < 4:
        raise TruncatedPayload(f"buffer of {len(buf)} bytes has no magic number")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise WrongMagic(f"expected magic 0x{magic:08x}, found 0x{got:08x}")
    if len(buf) < n_header:
        raise TruncatedPayload(f"header needs {n_header} bytes, buffer has {len(buf)}")
    return struct.unpack_from(">" + "I" * n_dims, buf, 4)


def _check_payload(buf: bytes, offset: int, expected: int) -> None:
    got = len(buf) - offset
    if got < expected:
        raise TruncatedPayload(f"payload has {got} bytes, header declares {expected}")
    if got > expected:
        raise TrailingBytes(f"{got - expected} bytes follow the declared payload")


def parse_idx_images(buf: bytes) -> RawImageSet:
    count, rows, cols = _read_header(buf, IMAGE_MAGIC, 3)
    n = count * rows * cols
    _check_payload(buf, 16, n)
    pixels = np.frombuffer(buf, dtype=np.uint8, count=n, offset=16)
    return RawImageSet(count, rows, cols, pixels)


def parse_idx_labels(buf: bytes) -> LabelSet:
    (count,) = _read_header(buf, LABEL_MAGIC, 1)
    _check_payload(buf, 8, count)
    labels = np.frombuffer(buf, dtype=np.uint8, count=count, offset=8)
    if count and labels.max() >= N_CLASSES:
        bad = int(labels[labels >= N_CLASSES][0])
        raise LabelOutOfRange(f"label byte {bad} outside 0..{N_CLASSES - 1}")
    return LabelSet(count, labels)


def encode_idx_images(images: RawImageSet) -> bytes:
    header = struct.pack(">IIII", IMAGE_MAGIC, images.count, images.rows, images.cols)
    return header + images.pixels.tobytes()


def encode_idx_labels(labels: LabelSet) -> bytes:
    header = struct.pack(">II", LABEL_MAGIC, labels.count)
    return header + labels.labels.astype(np.uint8).tobytes()


def read_maybe_gzip(path: str | Path) -> bytes:
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        try:
            data = gzip.decompress(data)
        except (OSError, EOFError) as exc:
            raise DataError(f"{path}: corrupt gzip stream ({exc})") from exc
    return data


def find_idx_file(data_dir: str | Path, name: str) -> Path:
    data_dir = Path(data_dir)
    for candidate in (data_dir / name, data_dir / f"{name}.gz"):
        if candidate.is_file():
            return candidate
    raise DataError(f"neither {name} nor {name}.gz found in {data_dir}")


def normalize(images: RawImageSet, labels: LabelSet, mean_offset: float | None = None) -> Dataset:
    """Scale pixels to [0, 1] and subtract a single global mean.

    Pass ``mean_offset=None`` for the training split (the mean is computed
    here); pass the training dataset's ``mean_offset`` for the test split.
    """
    if images.count != labels.count:
        raise CountMismatch(f"{images.count} images vs {labels.count} labels")
    if images.rows * images.cols != N_PIXELS:
        raise DataError(f"images are {images.rows}x{images.cols}, expected {N_PIXELS} pixels")
    scaled = images.pixels.astype(np.float64) / 255.0
    if mean_offset is None:
        mean_offset = float(scaled.mean()) if scaled.size else 0.0
    scaled -= mean_offset
    return Dataset(_frozen(scaled), labels.labels, mean_offset)


def load_mnist(data_dir: str | Path) -> tuple[Dataset, Dataset]:
    """Load and normalize (train, test); the test split reuses the train mean."""

    def load(img_name, lbl_name):
        images = parse_idx_images(read_maybe_gzip(find_idx_file(data_dir, img_name)))
        labels = parse_idx_labels(read_maybe_gzip(find_idx_file(data_dir, lbl_name)))
        return images, labels

    train = normalize(*load(TRAIN_IMAGES, TRAIN_LABELS))
    test = normalize(*load(TEST_IMAGES, TEST_LABELS), mean_offset=train.mean_offset)
    return train, test


def _stratified_quotas(class_sizes: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Split ``count`` across classes as evenly as class sizes allow.

    Classes too small for an equal share give everything they have; the
    shortfall is spread over the remaining classes. Leftover units after
    integer division go to randomly chosen classes.
    """
    quotas = np.zeros_like(class_sizes)
    remaining = count
    while remaining > 0:
        idx = np.flatnonzero(quotas < class_sizes)
        room = class_sizes[idx] - quotas[idx]
        share, extra = divmod(remaining, idx.size)
        if share > 0 and np.any(room < share):
            # saturate the small classes, then redistribute what is left
            small = idx[room < share]
            remaining -= int(room[room < share].sum())
            quotas[small] = class_sizes[small]
            continue
        quotas[idx] += share
        remaining -= share * idx.size
        eligible = idx[quotas[idx] < class_sizes[idx]]
        take = min(extra, eligible.size)
        if take:
            quotas[rng.choice(eligible, size=take, replace=False)] += 1
            remaining -= take
    return quotas


def subset(data: Dataset, count: int, seed: int) -> Dataset:
    """Deterministic label-stratified sample without replacement.

    Rows come back in a seeded random order; identical ``(data, count,
    seed)`` always gives an identical result.
    """
    if count > data.count:
        raise CountTooLarge(f"requested {count} rows from a dataset of {data.count}")
    if count < 0:
        raise CountTooLarge(f"negative subset size {count}")
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    class_sizes = np.bincount(data.labels, minlength=N_CLASSES)
    quotas = _stratified_quotas(class_sizes, count, rng)
    picks = []
    for k in range(N_CLASSES):
        if quotas[k]:
            members = np.flatnonzero(data.labels == k)
            picks.append(rng.choice(members, size=quotas[k], replace=False))
    rows = np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)
    rows = rng.permutation(rows)
    return Dataset(_frozen(data.inputs[rows]), _frozen(data.labels[rows]), data.mean_offset)
