"""Full-sweep SGD training of a single local model, and error evaluation.

One "iteration" is one complete pass over the training set, visiting every
example exactly once in an order drawn from a counter-based generator keyed
by ``(shuffle_seed, sweep_index)``. Updates use batch size 1.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from ensemble_forge import _kernels as K
from ensemble_forge import nnet
from ensemble_forge.errors import (
    ConfigError,
    EmptyDataset,
    IndexOutOfRange,
    NonPositiveLearningRate,
    NonPositiveScale,
    UnsortedIndices,
)
from ensemble_forge.mnist_io import Dataset


@dataclass(frozen=True)
class TrainConfig:
    init_seed: int = 0
    shuffle_seed: int = 1
    learning_rate: float = 0.1
    sweeps: int = 1
    init_scale: float = 0.05
    activation: str = nnet.DEFAULT_ACTIVATION
    checkpoints: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise NonPositiveLearningRate(f"learning_rate must be positive, got {self.learning_rate}")
        if not isinstance(self.sweeps, (int, np.integer)) or self.sweeps < 1:
            raise ConfigError(f"sweeps must be a positive integer, got {self.sweeps!r}")
        if not self.init_scale > 0:
            raise NonPositiveScale(f"init_scale must be positive, got {self.init_scale}")
        nnet.activation_code(self.activation)
        object.__setattr__(self, "checkpoints", tuple(int(c) for c in self.checkpoints))
        _validate_checkpoints(self.checkpoints, self.sweeps)


@dataclass(frozen=True, eq=False)
class TrainReport:
    params: nnet.ModelParams
    per_sweep_train_loss: list[float]
    # keyed by sweep index, in ascending order
    checkpoints: dict[int, nnet.ModelParams] = field(default_factory=dict)
    # cumulative wall-clock seconds after each sweep (informational only)
    sweep_seconds: list[float] = field(default_factory=list)

    @property
    def per_sweep_checkpoints(self) -> list[nnet.ModelParams]:
        return list(self.checkpoints.values())


def _validate_checkpoints(at, sweeps: int) -> None:
    at = list(at)
    if any(b <= a for a, b in zip(at, at[1:])):
        raise UnsortedIndices(f"checkpoint sweeps must be strictly increasing, got {at}")
    if at and (at[0] < 1 or at[-1] > sweeps):
        raise IndexOutOfRange(f"checkpoint sweeps {at} must lie in 1..{sweeps}")


def checkpoint_sweeps(cfg: TrainConfig, at) -> TrainConfig:
    """Return ``cfg`` asking for parameter snapshots after each sweep in ``at``."""
    at = [int(a) for a in at]
    _validate_checkpoints(at, cfg.sweeps)
    return replace(cfg, checkpoints=tuple(at))


def sweep_order(shuffle_seed: int, sweep: int, n: int) -> np.ndarray:
    """Visiting order for sweep ``sweep`` (1-based): a permutation of ``range(n)``."""
    key = np.array([int(shuffle_seed) & (2**64 - 1), int(sweep)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def train_local_model(data: Dataset, cfg: TrainConfig) -> TrainReport:
    if data.count == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    init = nnet.init_params(cfg.init_seed, cfg.init_scale)
    W1, b1, W2, b2 = (a.copy() for a in init.arrays())
    act = nnet.activation_code(cfg.activation)
    wanted = set(cfg.checkpoints)
    losses, snapshots, seconds = [], {}, []
    start = time.perf_counter()
    for sweep in range(1, cfg.sweeps + 1):
        order = sweep_order(cfg.shuffle_seed, sweep, data.count)
        losses.append(float(K.sgd_sweep(W1, b1, W2, b2, data.inputs, data.labels, order,
                                        float(cfg.learning_rate), act)))
        seconds.append(time.perf_counter() - start)
        if sweep in wanted:
            snapshots[sweep] = nnet.ModelParams(W1, b1, W2, b2)
    return TrainReport(nnet.ModelParams(W1, b1, W2, b2), losses, snapshots, seconds)


def error_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) != labels))


def evaluate(params: nnet.ModelParams, data: Dataset, kind: str = nnet.DEFAULT_ACTIVATION) -> float:
    """Fraction of rows whose argmax logit differs from the label."""
    if data.count == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    return error_from_logits(nnet.forward_batch(params, data.inputs, kind), data.labels)
