"""Integrating local models by averaging their pre-softmax outputs.

Sums are always reduced in ascending ``model_id`` order so raw sums are
bit-reproducible for a fixed model set. Because softmax is monotone and
dividing by N > 0 preserves order, class decisions are taken as the argmax
of the (summed or averaged) logits; ``ensemble_probs`` still exposes the
averaged-then-softmaxed distribution.
"""

from __future__ import annotations

import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from ensemble_forge.errors import (
    DataError,
    EmptyEnsemble,
    LabelCountMismatch,
    MixedVariants,
    ShapeMismatch,
)

N_CLASSES = 10
VARIANTS = ("plain", "bootstrap")
VARIANT_CODES = {name: code for code, name in enumerate(VARIANTS)}

LOGIT_MAGIC = b"EFLOGIT1"
_LOGIT_HEADER = struct.Struct("<8sIIII")


@dataclass(frozen=True, eq=False)
class LogitMatrix:
    model_id: int
    values: np.ndarray  # (T, 10)
    iteration: int
    variant: str = "plain"

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, order="C")
        if v.ndim != 2 or v.shape[1] != N_CLASSES:
            raise ShapeMismatch(f"logit matrix must be (T, {N_CLASSES}), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"model {self.model_id}: non-finite logits")
        if self.variant not in VARIANT_CODES:
            raise ValueError(f"unknown variant {self.variant!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def to_bytes(self) -> bytes:
        header = _LOGIT_HEADER.pack(
            LOGIT_MAGIC, self.model_id, self.iteration, VARIANT_CODES[self.variant],
            self.values.shape[0],
        )
        return header + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> LogitMatrix:
        if len(buf) < _LOGIT_HEADER.size or buf[:8] != LOGIT_MAGIC:
            raise DataError("not an EFLOGIT1 record")
        _, model_id, iteration, code, t = _LOGIT_HEADER.unpack_from(buf)
        if len(buf) != _LOGIT_HEADER.size + 8 * N_CLASSES * t:
            raise DataError(f"EFLOGIT1 record length {len(buf)} does not match T={t}")
        if code >= len(VARIANTS):
            raise DataError(f"unknown variant code {code}")
        values = np.frombuffer(buf, dtype="<f8", offset=_LOGIT_HEADER.size).reshape(t, N_CLASSES)
        return cls(model_id, values, iteration, VARIANTS[code])

    def __eq__(self, other):
        if not isinstance(other, LogitMatrix):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


@dataclass(frozen=True)
class ErrorCurve:
    variant: str
    iteration: int
    points: list[tuple[int, float]] = field(default_factory=list)

    @property
    def ns(self) -> list[int]:
        return [n for n, _ in self.points]

    @property
    def errors(self) -> list[float]:
        return [e for _, e in self.points]


def _check_compatible(first: LogitMatrix, m: LogitMatrix) -> None:
    if m.values.shape != first.values.shape:
        raise ShapeMismatch(
            f"model {m.model_id} logits {m.values.shape} vs {first.values.shape}"
        )
    if m.variant != first.variant or m.iteration != first.iteration:
        raise MixedVariants(
            f"model {m.model_id} is ({m.variant}, iter {m.iteration}), "
            f"expected ({first.variant}, iter {first.iteration})"
        )


def aggregate(logits: Sequence[LogitMatrix]) -> np.ndarray:
    """Element-wise mean of the logit matrices, summed in ascending model_id order."""
    if not logits:
        raise EmptyEnsemble("no logit matrices to aggregate")
    ordered = sorted(logits, key=lambda m: m.model_id)
    first = ordered[0]
    total = np.zeros_like(first.values)
    for m in ordered:
        _check_compatible(first, m)
        total += m.values
    return total / len(ordered)


def predict(mean_logits: np.ndarray) -> np.ndarray:
    """Class per row; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(mean_logits), axis=1)


def ensemble_probs(mean_logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of averaged logits (the integrated predictive distribution)."""
    z = np.asarray(mean_logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class RunningEnsemble:
    """Running element-wise sum of logit matrices for one (variant, iteration).

    Models must be added in the order that defines N; the error for the
    first N models is available right after the N-th ``add``.
    """

    def __init__(self, labels):
        self.labels = np.asarray(labels)
        self.total: np.ndarray | None = None
        self.first: LogitMatrix | None = None
        self.n = 0

    def add(self, m: LogitMatrix) -> None:
        if self.first is None:
            if m.values.shape[0] != self.labels.shape[0]:
                raise LabelCountMismatch(
                    f"{m.values.shape[0]} logit rows vs {self.labels.shape[0]} labels"
                )
            self.first = m
            self.total = np.zeros_like(m.values)
        _check_compatible(self.first, m)
        self.total += m.values
        self.n += 1

    def error(self) -> float:
        if self.n == 0:
            raise EmptyEnsemble("no models added yet")
        return float(np.mean(predict(self.total) != self.labels))


def cumulative_error_curve(
    logits: Iterable[LogitMatrix], labels, n_grid: Sequence[int] | None = None
) -> ErrorCurve:
    """Ensemble error after each of the first N models, sampled at ``n_grid``.

    Consumes ``logits`` once, in the given order; only the running sum is
    kept in memory. ``n_grid=None`` samples every N.
    """
    acc = RunningEnsemble(labels)
    grid = None if n_grid is None else [int(n) for n in n_grid]
    if grid is not None and any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError(f"n_grid must be strictly increasing, got {grid}")
    wanted = None if grid is None else set(grid)
    points = []
    for m in logits:
        acc.add(m)
        if wanted is None or acc.n in wanted:
            points.append((acc.n, acc.error()))
        if grid is not None and acc.n >= grid[-1]:
            break
    if acc.first is None:
        raise EmptyEnsemble("no logit matrices supplied")
    if grid is not None and len(points) != len(grid):
        raise EmptyEnsemble(f"only {acc.n} models supplied for grid up to N={grid[-1]}")
    return ErrorCurve(acc.first.variant, acc.first.iteration, points)
