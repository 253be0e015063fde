"""The local model: a fully connected 784-100-10 network.

Hidden units use a sigmoid over the biased pre-activation ``W1 @ x + b1``;
the 10 outputs are logits fed to a softmax. Training minimizes softmax
cross-entropy. All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from ensemble_forge import _kernels as K
from ensemble_forge.errors import (
    DataError,
    LabelOutOfRange,
    NonPositiveLearningRate,
    NonPositiveScale,
    ShapeMismatch,
)

N_IN = 784
N_HIDDEN = 100
N_OUT = 10

SHAPES = {"W1": (N_HIDDEN, N_IN), "b1": (N_HIDDEN,), "W2": (N_OUT, N_HIDDEN), "b2": (N_OUT,)}
N_PARAMS = sum(math.prod(s) for s in SHAPES.values())

ACTIVATIONS = {"sigmoid": K.SIGMOID, "tanh": K.TANH}
DEFAULT_ACTIVATION = "sigmoid"

PARAM_MAGIC = b"EFPARAM1"


def activation_code(name: str) -> int:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


@dataclass(frozen=True, eq=False)
class _ParamArrays:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            a = np.array(getattr(self, f.name), dtype=np.float64, order="C")
            if a.shape != SHAPES[f.name]:
                raise ShapeMismatch(f"{f.name} has shape {a.shape}, expected {SHAPES[f.name]}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{f.name} contains non-finite entries")
            a.setflags(write=False)
            object.__setattr__(self, f.name, a)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.W1, self.b1, self.W2, self.b2

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


class ModelParams(_ParamArrays):
    """Weights and biases of one local model. Immutable."""

    def to_bytes(self) -> bytes:
        return PARAM_MAGIC + self.flat().astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> ModelParams:
        expected = len(PARAM_MAGIC) + 8 * N_PARAMS
        if buf[: len(PARAM_MAGIC)] != PARAM_MAGIC:
            raise DataError("not an EFPARAM1 record")
        if len(buf) != expected:
            raise DataError(f"EFPARAM1 record is {len(buf)} bytes, expected {expected}")
        flat = np.frombuffer(buf, dtype="<f8", offset=len(PARAM_MAGIC)).astype(np.float64)
        return cls(**_unflatten(flat))


class Gradients(_ParamArrays):
    pass


def _unflatten(flat: np.ndarray) -> dict[str, np.ndarray]:
    out, start = {}, 0
    for name, shape in SHAPES.items():
        n = math.prod(shape)
        out[name] = flat[start : start + n].reshape(shape)
        start += n
    return out


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    hidden: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def init_params(seed: int, scale: float = 0.05) -> ModelParams:
    """Weights uniform on [-scale, scale], biases zero, from a seeded Philox stream."""
    if not scale > 0:
        raise NonPositiveScale(f"init scale must be positive, got {scale}")
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    W1 = rng.uniform(-scale, scale, SHAPES["W1"])
    W2 = rng.uniform(-scale, scale, SHAPES["W2"])
    return ModelParams(W1=W1, b1=np.zeros(N_HIDDEN), W2=W2, b2=np.zeros(N_OUT))


def activation(x: float, kind: str = DEFAULT_ACTIVATION) -> float:
    return K.activate(float(x), activation_code(kind))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    p = np.empty_like(z)
    K.softmax_into(np.ascontiguousarray(z), p)
    return p


def _check_input(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (N_IN,):
        raise ShapeMismatch(f"input must have shape ({N_IN},), got {x.shape}")
    return x


def _check_label(label) -> int:
    if not 0 <= int(label) < N_OUT:
        raise LabelOutOfRange(f"label {label} outside 0..{N_OUT - 1}")
    return int(label)


def forward(params: ModelParams, x, kind: str = DEFAULT_ACTIVATION) -> ForwardTrace:
    x = _check_input(x)
    h, z, p = np.empty(N_HIDDEN), np.empty(N_OUT), np.empty(N_OUT)
    K.forward_into(*params.arrays(), x, activation_code(kind), h, z, p)
    return ForwardTrace(hidden=h, logits=z, probs=p)


def forward_batch(params: ModelParams, inputs, kind: str = DEFAULT_ACTIVATION) -> np.ndarray:
    """Logits for every row of ``inputs``; row n equals ``forward(params, inputs[n]).logits``."""
    X = np.ascontiguousarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != N_IN:
        raise ShapeMismatch(f"inputs must have shape (count, {N_IN}), got {X.shape}")
    return K.logits_batch(*params.arrays(), X, activation_code(kind))


def loss(probs, label: int) -> float:
    """Cross-entropy ``-ln probs[label]``, with probs floored at 1e-300."""
    label = _check_label(label)
    return -math.log(max(float(probs[label]), K.LOSS_FLOOR))


def backward(params: ModelParams, x, label: int, kind: str = DEFAULT_ACTIVATION) -> Gradients:
    x = _check_input(x)
    label = _check_label(label)
    act = activation_code(kind)
    W1, b1, W2, b2 = params.arrays()
    h, z, p = np.empty(N_HIDDEN), np.empty(N_OUT), np.empty(N_OUT)
    dz, dh = np.empty(N_OUT), np.empty(N_HIDDEN)
    K.forward_into(W1, b1, W2, b2, x, act, h, z, p)
    K.deltas_into(W2, h, p, label, act, dz, dh)
    return Gradients(W1=np.outer(dh, x), b1=dh, W2=np.outer(dz, h), b2=dz)


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    if not lr > 0:
        raise NonPositiveLearningRate(f"learning rate must be positive, got {lr}")
    return ModelParams(*(p - lr * g for p, g in zip(params.arrays(), grads.arrays())))
