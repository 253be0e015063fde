"""Per-model input masking ("convolutional bootstrapping").

For each local model one training image is drawn at random and every
training and test input of that model is multiplied element-wise by it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ensemble_forge.errors import ConfigError, EmptyDataset, ShapeMismatch
from ensemble_forge.mnist_io import N_PIXELS, Dataset

# Representation the mask values are taken from.
MASK_SOURCES = ("normalized", "scaled", "raw")


@dataclass(frozen=True, eq=False)
class MaskImage:
    values: np.ndarray
    source_index: int
    seed: int

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.shape != (N_PIXELS,):
            raise ShapeMismatch(f"mask must have shape ({N_PIXELS},), got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def checksum(self) -> str:
        return mask_checksum(self.values)

    def __eq__(self, other):
        if not isinstance(other, MaskImage):
            return NotImplemented
        return (
            self.source_index == other.source_index
            and self.seed == other.seed
            and np.array_equal(self.values, other.values)
        )


def mask_checksum(values: np.ndarray) -> str:
    """64-bit BLAKE2b digest of the little-endian float64 values, as 16 hex digits."""
    data = np.ascontiguousarray(values, dtype="<f8").tobytes()
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def draw_index(n: int, seed: int) -> int:
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    return int(rng.integers(0, n))


def select_mask(train: Dataset, seed: int, source: str = "normalized") -> MaskImage:
    """Pick one training row uniformly at random (keyed by ``seed``) as the mask.

    ``source`` picks the representation of the mask values: the zero-mean
    inputs as the model sees them (default), [0, 1] scaled intensities, or
    raw [0, 255] intensities.
    """
    if train.count == 0:
        raise EmptyDataset("cannot select a mask from an empty dataset")
    if source not in MASK_SOURCES:
        raise ConfigError(f"mask source must be one of {MASK_SOURCES}, got {source!r}")
    idx = draw_index(train.count, seed)
    values = train.inputs[idx]
    if source == "scaled":
        values = values + train.mean_offset
    elif source == "raw":
        values = (values + train.mean_offset) * 255.0
    return MaskImage(values, idx, int(seed))


def apply_mask(data: Dataset, mask: MaskImage) -> Dataset:
    if data.inputs.shape[1] != mask.values.shape[0]:
        raise ShapeMismatch(
            f"rows of length {data.inputs.shape[1]} vs mask of length {mask.values.shape[0]}"
        )
    masked = data.inputs * mask.values
    masked.setflags(write=False)
    return Dataset(masked, data.labels, data.mean_offset)
