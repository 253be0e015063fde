"""Deterministic parallel execution of N local-model pipelines.

Each model id gets its own seeds from ``derive_seeds``, so any model can be
rebuilt in isolation and results do not depend on worker count or on the
order in which workers finish. Results are yielded in ascending model id.

Cache layout (optional)::

    <cache_dir>/model_<id>_<variant>_s<sweep>.logit   EFLOGIT1 records
    <cache_dir>/manifest.csv                          one row per (model, sweep)
    <cache_dir>/plan_<variant>.txt                    fingerprint of plan + data

The manifest is append-only; on reload the last row for a key wins and
malformed trailing lines from an interrupted write are ignored.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import multiprocessing
import os
import struct
from collections.abc import Iterable, Iterator
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ensemble_forge import bootstrap, nnet, trainer
from ensemble_forge.ensemble import VARIANTS, LogitMatrix
from ensemble_forge.errors import (
    ConfigError,
    DataError,
    EmptyDataset,
    MeanOffsetMismatch,
    UnknownModelId,
)
from ensemble_forge.mnist_io import Dataset

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = [
    "model_id", "variant", "init_seed", "shuffle_seed", "mask_seed",
    "mask_source_index", "mask_checksum", "sweep", "individual_error",
]

_TAGS = (b"ef/init", b"ef/shuffle", b"ef/mask")


class Seeds(NamedTuple):
    init_seed: int
    shuffle_seed: int
    mask_seed: int


def _mix(tag: bytes, master_seed: int, model_id: int) -> int:
    # the personalization string separates the three seed streams
    msg = struct.pack("<QQ", master_seed & (2**64 - 1), model_id)
    h = hashlib.blake2b(msg, digest_size=8, person=tag.ljust(16, b"\0"))
    return int.from_bytes(h.digest(), "little")


def derive_seeds(master_seed: int, model_id: int) -> Seeds:
    """Three independent 64-bit seeds for one model, hashed from (master, id, tag)."""
    if model_id < 0:
        raise UnknownModelId(f"model id must be non-negative, got {model_id}")
    return Seeds(*(_mix(tag, master_seed, model_id) for tag in _TAGS))


@dataclass(frozen=True)
class RunPlan:
    master_seed: int
    n_models: int
    checkpoint_sweeps: tuple[int, ...]
    variant: str = "plain"
    learning_rate: float = 0.1
    init_scale: float = 0.05
    activation: str = nnet.DEFAULT_ACTIVATION
    mask_source: str = "normalized"
    worker_count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "checkpoint_sweeps", tuple(int(c) for c in self.checkpoint_sweeps))
        if self.n_models < 1:
            raise ConfigError(f"n_models must be >= 1, got {self.n_models}")
        if self.worker_count < 1:
            raise ConfigError(f"worker_count must be >= 1, got {self.worker_count}")
        if not self.checkpoint_sweeps:
            raise ConfigError("at least one checkpoint sweep is required")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mask_source not in bootstrap.MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {bootstrap.MASK_SOURCES}")
        # validates checkpoints, lr, scale and activation in one place
        self.train_config(Seeds(0, 0, 0))

    def train_config(self, seeds: Seeds) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            init_seed=seeds.init_seed,
            shuffle_seed=seeds.shuffle_seed,
            learning_rate=self.learning_rate,
            sweeps=max(self.checkpoint_sweeps),
            init_scale=self.init_scale,
            activation=self.activation,
            checkpoints=self.checkpoint_sweeps,
        )

    def describe(self) -> str:
        """Stable text form of everything that affects results (not worker_count)."""
        keys = ["master_seed", "n_models", "checkpoint_sweeps", "variant", "learning_rate",
                "init_scale", "activation", "mask_source"]
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in keys)


@dataclass(frozen=True)
class MaskRecord:
    seed: int
    source_index: int
    checksum: str


@dataclass(frozen=True, eq=False)
class ModelResult:
    model_id: int
    variant: str
    seeds: Seeds
    logits: list[LogitMatrix]
    errors: list[float]
    mask: MaskRecord | None = None
    # cumulative training seconds at each checkpoint; excluded from equality
    train_seconds: list[float] = field(default_factory=list)

    @property
    def sweeps(self) -> list[int]:
        return [m.iteration for m in self.logits]

    def manifest_rows(self) -> list[dict]:
        rows = []
        for m, err in zip(self.logits, self.errors):
            rows.append({
                "model_id": self.model_id,
                "variant": self.variant,
                "init_seed": self.seeds.init_seed,
                "shuffle_seed": self.seeds.shuffle_seed,
                "mask_seed": self.mask.seed if self.mask else "",
                "mask_source_index": self.mask.source_index if self.mask else "",
                "mask_checksum": self.mask.checksum if self.mask else "",
                "sweep": m.iteration,
                "individual_error": format(err, ".17g"),
            })
        return rows

    def to_bytes(self) -> bytes:
        """Canonical serialization (logit records + manifest rows) for byte comparisons."""
        buf = io.StringIO()
        writer = csv.DictWriter(buf, MANIFEST_COLUMNS, lineterminator="\n")
        writer.writerows(self.manifest_rows())
        return b"".join(m.to_bytes() for m in self.logits) + buf.getvalue().encode()

    def __eq__(self, other):
        if not isinstance(other, ModelResult):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


def _check_datasets(train: Dataset, test: Dataset) -> None:
    if train.count == 0 or test.count == 0:
        raise EmptyDataset("train and test sets must be nonempty")
    if train.mean_offset != test.mean_offset:
        raise MeanOffsetMismatch(
            f"train mean_offset {train.mean_offset!r} != test mean_offset {test.mean_offset!r}"
        )


def run_model(plan: RunPlan, model_id: int, train: Dataset, test: Dataset) -> ModelResult:
    """The full pipeline for one local model: (mask) -> train -> test logits."""
    if not 0 <= model_id < plan.n_models:
        raise UnknownModelId(f"model id {model_id} outside 0..{plan.n_models - 1}")
    seeds = derive_seeds(plan.master_seed, model_id)
    mask = None
    if plan.variant == "bootstrap":
        image = bootstrap.select_mask(train, seeds.mask_seed, plan.mask_source)
        train = bootstrap.apply_mask(train, image)
        test = bootstrap.apply_mask(test, image)
        mask = MaskRecord(image.seed, image.source_index, image.checksum)

    report = trainer.train_local_model(train, plan.train_config(seeds))

    logits, errors = [], []
    for sweep, params in report.checkpoints.items():
        values = nnet.forward_batch(params, test.inputs, plan.activation)
        logits.append(LogitMatrix(model_id, values, sweep, plan.variant))
        errors.append(trainer.error_from_logits(values, test.labels))
    return ModelResult(
        model_id, plan.variant, seeds, logits, errors, mask,
        [report.sweep_seconds[s - 1] for s in report.checkpoints],
    )


# Worker-process state, installed by the pool initializer (inherited via fork).
_WORKER: dict = {}


def _init_worker(plan, train, test):
    _WORKER.update(plan=plan, train=train, test=test)


def _run_in_worker(model_id: int) -> ModelResult:
    return run_model(_WORKER["plan"], model_id, _WORKER["train"], _WORKER["test"])


def iter_plan(
    plan: RunPlan, train: Dataset, test: Dataset, model_ids: Iterable[int] | None = None
) -> Iterator[ModelResult]:
    """Yield results for ``model_ids`` (default: all) in ascending id order."""
    _check_datasets(train, test)
    ids = sorted(set(range(plan.n_models) if model_ids is None else model_ids))
    for i in ids:
        if not 0 <= i < plan.n_models:
            raise UnknownModelId(f"model id {i} outside 0..{plan.n_models - 1}")
    if not ids:
        return
    if plan.worker_count == 1 or len(ids) == 1:
        for i in ids:
            yield run_model(plan, i, train, test)
        return
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(
        max_workers=min(plan.worker_count, len(ids)), mp_context=ctx,
        initializer=_init_worker, initargs=(plan, train, test),
    ) as pool:
        # map() hands results back in submission order
        yield from pool.map(_run_in_worker, ids)


def run_plan(plan: RunPlan, train: Dataset, test: Dataset) -> list[ModelResult]:
    return list(iter_plan(plan, train, test))


def resume(plan: RunPlan, completed, train: Dataset, test: Dataset) -> list[ModelResult]:
    """Results for every model id of ``plan`` not in ``completed``."""
    completed = set(completed)
    unknown = sorted(i for i in completed if not 0 <= i < plan.n_models)
    if unknown:
        raise UnknownModelId(f"completed ids {unknown} outside 0..{plan.n_models - 1}")
    return list(iter_plan(plan, train, test, set(range(plan.n_models)) - completed))


def data_fingerprint(train: Dataset, test: Dataset) -> str:
    h = hashlib.blake2b(digest_size=16)
    for d in (train, test):
        h.update(np.ascontiguousarray(d.inputs).tobytes())
        h.update(np.ascontiguousarray(d.labels).tobytes())
    return h.hexdigest()


class ModelCache:
    """On-disk store of finished models, keyed by (model_id, variant, sweep)."""

    def __init__(self, cache_dir: str | Path):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = self.dir / "manifest.csv"

    def logit_path(self, model_id: int, variant: str, sweep: int) -> Path:
        return self.dir / f"model_{model_id}_{variant}_s{sweep}.logit"

    def _fingerprint_path(self, variant: str) -> Path:
        return self.dir / f"plan_{variant}.txt"

    @staticmethod
    def fingerprint(plan: RunPlan, train: Dataset, test: Dataset) -> str:
        return plan.describe() + f"data={data_fingerprint(train, test)}\n"

    def _read_rows(self) -> list[dict]:
        if not self.manifest.exists():
            return []
        with open(self.manifest, newline="") as f:
            rows = []
            for row in csv.DictReader(f):
                if None in row or any(row.get(c) is None for c in MANIFEST_COLUMNS):
                    continue  # torn write
                rows.append(row)
            return rows

    def _write_rows(self, rows: list[dict]) -> None:
        tmp = self.manifest.with_suffix(".csv.tmp")
        with open(tmp, "w", newline="") as f:
            writer = csv.DictWriter(f, MANIFEST_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
        os.replace(tmp, self.manifest)

    def reset(self, plan: RunPlan, train: Dataset, test: Dataset) -> None:
        """Drop cached models of ``plan.variant`` and record a new fingerprint."""
        keep = [r for r in self._read_rows() if r["variant"] != plan.variant]
        for r in self._read_rows():
            if r["variant"] == plan.variant:
                self.logit_path(int(r["model_id"]), plan.variant, int(r["sweep"])).unlink(
                    missing_ok=True
                )
        self._write_rows(keep)
        self._fingerprint_path(plan.variant).write_text(self.fingerprint(plan, train, test))

    def check(self, plan: RunPlan, train: Dataset, test: Dataset) -> None:
        path = self._fingerprint_path(plan.variant)
        if not path.exists():
            self.reset(plan, train, test)
            return
        if path.read_text() != self.fingerprint(plan, train, test):
            raise ConfigError(
                f"cache in {self.dir} was built for a different {plan.variant} plan or data; "
                "rerun without --resume to rebuild it"
            )

    def store(self, result: ModelResult) -> None:
        for m in result.logits:
            path = self.logit_path(result.model_id, result.variant, m.iteration)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(m.to_bytes())
            os.replace(tmp, path)
        new_file = not self.manifest.exists()
        with open(self.manifest, "a", newline="") as f:
            writer = csv.DictWriter(f, MANIFEST_COLUMNS, lineterminator="\n")
            if new_file:
                writer.writeheader()
            writer.writerows(result.manifest_rows())

    def load(self, plan: RunPlan) -> dict[int, ModelResult]:
        """Complete cached results for ``plan`` (every checkpoint present and seeds matching)."""
        latest: dict[tuple[int, int], dict] = {}
        for r in self._read_rows():
            if r["variant"] == plan.variant:
                latest[(int(r["model_id"]), int(r["sweep"]))] = r
        out = {}
        for model_id in range(plan.n_models):
            rows = [latest.get((model_id, s)) for s in plan.checkpoint_sweeps]
            if any(r is None for r in rows):
                continue
            seeds = derive_seeds(plan.master_seed, model_id)
            if (int(rows[0]["init_seed"]), int(rows[0]["shuffle_seed"])) != seeds[:2]:
                continue
            try:
                logits = [
                    LogitMatrix.from_bytes(self.logit_path(model_id, plan.variant, s).read_bytes())
                    for s in plan.checkpoint_sweeps
                ]
            except (OSError, DataError):
                continue
            mask = None
            if plan.variant == "bootstrap":
                mask = MaskRecord(int(rows[0]["mask_seed"]), int(rows[0]["mask_source_index"]),
                                  rows[0]["mask_checksum"])
            out[model_id] = ModelResult(
                model_id, plan.variant, seeds, logits,
                [float(r["individual_error"]) for r in rows], mask,
                [0.0] * len(rows),
            )
        return out


def iter_plan_cached(
    plan: RunPlan, train: Dataset, test: Dataset, cache: ModelCache, resume_run: bool
) -> Iterator[ModelResult]:
    """Like ``iter_plan`` but persisting every finished model to ``cache``.

    With ``resume_run`` the cached models are reused and only the missing ids
    are computed; the merged stream is identical to a fresh full run.
    """
    if resume_run:
        cache.check(plan, train, test)
        cached = cache.load(plan)
        log.info("resuming %s: %d of %d models cached", plan.variant, len(cached), plan.n_models)
    else:
        cache.reset(plan, train, test)
        cached = {}
    fresh = iter_plan(plan, train, test, set(range(plan.n_models)) - set(cached))
    for model_id in range(plan.n_models):
        if model_id in cached:
            yield cached[model_id]
        else:
            result = next(fresh)
            cache.store(result)
            yield result
