"""Experiment driver: single-model baseline curves and error-vs-N ensemble curves.

Outputs written by ``run_experiment``:

    <output_dir>/curves.csv       variant,iteration,N,error,wall_seconds
    <output_dir>/manifest.csv     per-model seeds, mask metadata and errors
    <output_dir>/config.resolved  the effective configuration, key=value

``wall_seconds`` is the summed training time of the first N models up to that
iteration (serial-equivalent cost). Timing is not reproducible, so it is only
written when ``record_timing`` is on; otherwise the column holds 0 and the
CSV files are byte-identical across reruns and worker counts.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

from ensemble_forge import bootstrap, nnet
from ensemble_forge.ensemble import RunningEnsemble
from ensemble_forge.errors import ConfigError
from ensemble_forge.mnist_io import Dataset, load_mnist, subset
from ensemble_forge.orchestrator import (
    MANIFEST_COLUMNS,
    ModelCache,
    ModelResult,
    RunPlan,
    iter_plan,
    iter_plan_cached,
    run_model,
)

log = logging.getLogger(__name__)

ALL_VARIANTS = ("traditional", "plain", "bootstrap")
CURVE_COLUMNS = ["variant", "iteration", "N", "error", "wall_seconds"]


@dataclass(frozen=True)
class ExperimentConfig:
    data_dir: str = "data/mnist"
    output_dir: str = "runs/desk"
    train_subset: int | None = 10000
    test_subset: int | None = 2000
    subset_seed: int = 0
    n_models: int = 32
    checkpoints: tuple[int, ...] = (1, 2, 6)
    n_grid: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    variant: tuple[str, ...] = ALL_VARIANTS
    master_seed: int = 2015
    learning_rate: float = 0.1
    init_scale: float = 0.05
    activation: str = nnet.DEFAULT_ACTIVATION
    mask_source: str = "normalized"
    workers: int = 1
    cache_dir: str | None = None
    resume: bool = False
    record_timing: bool = False

    def __post_init__(self):
        for name in ("checkpoints", "n_grid", "variant"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def increasing(xs):
            return all(b > a for a, b in zip(xs, xs[1:]))

        if self.n_models < 1:
            raise ConfigError("n_models must be >= 1")
        if not self.checkpoints or self.checkpoints[0] < 1 or not increasing(self.checkpoints):
            raise ConfigError(f"checkpoints must be strictly increasing sweeps >= 1: {self.checkpoints}")
        if not self.n_grid or self.n_grid[0] < 1 or not increasing(self.n_grid):
            raise ConfigError(f"n_grid must be strictly increasing and >= 1: {self.n_grid}")
        if self.n_grid[-1] > self.n_models:
            raise ConfigError(f"n_grid reaches {self.n_grid[-1]} but n_models is {self.n_models}")
        if not self.variant or any(v not in ALL_VARIANTS for v in self.variant):
            raise ConfigError(f"variant must be a nonempty subset of {ALL_VARIANTS}: {self.variant}")
        if len(set(self.variant)) != len(self.variant):
            raise ConfigError(f"duplicate variants: {self.variant}")
        for name in ("train_subset", "test_subset"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be positive or 'full'")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be positive")
        if self.activation not in nnet.ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(nnet.ACTIVATIONS)}")
        if self.mask_source not in bootstrap.MASK_SOURCES:
            raise ConfigError(f"mask_source must be one of {bootstrap.MASK_SOURCES}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.resume and not self.cache_dir:
            raise ConfigError("resume requires cache_dir")

    def plan(self, variant: str, n_models: int | None = None) -> RunPlan:
        return RunPlan(
            master_seed=self.master_seed,
            n_models=self.n_models if n_models is None else n_models,
            checkpoint_sweeps=self.checkpoints,
            variant=variant,
            learning_rate=self.learning_rate,
            init_scale=self.init_scale,
            activation=self.activation,
            mask_source=self.mask_source,
            worker_count=self.workers,
        )


# --- config text format -----------------------------------------------------

def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_int(text: str) -> int | None:
    t = text.strip().lower()
    if t in ("none", "full", "all", ""):
        return None
    return int(t)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _parse_strs(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _parse_optional_str(text: str) -> str | None:
    t = text.strip()
    return None if t.lower() in ("none", "") else t


PARSERS = {
    "data_dir": str.strip,
    "output_dir": str.strip,
    "train_subset": _parse_optional_int,
    "test_subset": _parse_optional_int,
    "subset_seed": int,
    "n_models": int,
    "checkpoints": _parse_ints,
    "n_grid": _parse_ints,
    "variant": _parse_strs,
    "master_seed": int,
    "learning_rate": float,
    "init_scale": float,
    "activation": str.strip,
    "mask_source": str.strip,
    "workers": int,
    "cache_dir": _parse_optional_str,
    "resume": _parse_bool,
    "record_timing": _parse_bool,
}


def parse_config_text(text: str) -> dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value, where=f"line {lineno}")
    return values


def parse_value(key: str, value: str, where: str = "") -> object:
    if key not in PARSERS:
        raise ConfigError(f"{where + ': ' if where else ''}unknown key {key!r}")
    try:
        return PARSERS[key](value)
    except ValueError as exc:
        raise ConfigError(f"{where + ': ' if where else ''}bad value for {key}: {exc}") from None


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    merged = {**(file_values or {}), **(overrides or {})}
    unknown = set(merged) - set(PARSERS)
    if unknown:
        raise ConfigError(f"unknown keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build_config(parse_config_text(text), overrides)


def format_config(cfg: ExperimentConfig) -> str:
    return "".join(
        f"{f.name}={_format_value(getattr(cfg, f.name))}\n" for f in dataclasses.fields(cfg)
    )


# --- results ------------------------------------------------------------------

class CurveRow(NamedTuple):
    variant: str
    iteration: int
    N: int
    error: float
    wall_seconds: float


@dataclass
class SweepResult:
    rows: list[CurveRow] = dataclasses.field(default_factory=list)
    manifest: list[dict] = dataclasses.field(default_factory=list)

    def extend(self, other: SweepResult) -> None:
        self.rows.extend(other.rows)
        self.manifest.extend(other.manifest)


def emit_csv(rows, path: str | Path) -> None:
    """Write curve rows sorted by (variant, iteration, N); reals use 17 significant digits."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for r in sorted(rows, key=lambda r: (r.variant, r.iteration, r.N)):
            writer.writerow([r.variant, r.iteration, r.N, format(r.error, ".17g"),
                             format(r.wall_seconds, ".17g")])


def read_csv(path: str | Path) -> list[CurveRow]:
    with open(path, newline="") as f:
        return [
            CurveRow(r["variant"], int(r["iteration"]), int(r["N"]), float(r["error"]),
                     float(r["wall_seconds"]))
            for r in csv.DictReader(f)
        ]


def emit_manifest(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


# --- experiments --------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    train, test = load_mnist(cfg.data_dir)
    if cfg.train_subset is not None and cfg.train_subset < train.count:
        train = subset(train, cfg.train_subset, cfg.subset_seed)
    if cfg.test_subset is not None and cfg.test_subset < test.count:
        test = subset(test, cfg.test_subset, cfg.subset_seed)
    return train, test


def _timing(cfg: ExperimentConfig, seconds: float) -> float:
    return seconds if cfg.record_timing else 0.0


def run_traditional(cfg: ExperimentConfig, train: Dataset | None = None,
                    test: Dataset | None = None) -> SweepResult:
    """One model trained for max(checkpoints) sweeps; one N=1 row per checkpoint.

    The baseline is model 0 of a one-model plain plan under the same master
    seed, so its rows coincide with the N=1 rows of the plain variant.
    """
    if "traditional" not in cfg.variant:
        raise ConfigError("traditional is not among the configured variants")
    if train is None or test is None:
        train, test = load_data(cfg)
    result = run_model(cfg.plan("plain", n_models=1), 0, train, test)
    rows = [
        CurveRow("traditional", sweep, 1, err, _timing(cfg, sec))
        for sweep, err, sec in zip(result.sweeps, result.errors, result.train_seconds)
    ]
    manifest = result.manifest_rows()
    for r in manifest:
        r["variant"] = "traditional"
    return SweepResult(rows, manifest)


def run_parallel(cfg: ExperimentConfig, variant: str, train: Dataset | None = None,
                 test: Dataset | None = None) -> SweepResult:
    """Error-vs-N curves for every checkpoint, streamed model by model."""
    if variant not in ("plain", "bootstrap") or variant not in cfg.variant:
        raise ConfigError(f"variant {variant!r} is not a configured parallel variant")
    if train is None or test is None:
        train, test = load_data(cfg)
    plan = cfg.plan(variant)
    if cfg.cache_dir:
        results = iter_plan_cached(plan, train, test, ModelCache(cfg.cache_dir), cfg.resume)
    else:
        results = iter_plan(plan, train, test)

    running = {s: RunningEnsemble(test.labels) for s in cfg.checkpoints}
    spent = {s: 0.0 for s in cfg.checkpoints}
    grid = set(cfg.n_grid)
    out = SweepResult()
    for result in results:
        _log_model(result)
        out.manifest.extend(result.manifest_rows())
        for m, sec in zip(result.logits, result.train_seconds):
            running[m.iteration].add(m)
            spent[m.iteration] += sec
            n = running[m.iteration].n
            if n in grid:
                out.rows.append(CurveRow(variant, m.iteration, n, running[m.iteration].error(),
                                         _timing(cfg, spent[m.iteration])))
    return out


def _log_model(result: ModelResult) -> None:
    errs = ", ".join(f"s{s}={e:.4f}" for s, e in zip(result.sweeps, result.errors))
    log.info("%s model %d done: %s", result.variant, result.model_id, errs)


def run_experiment(cfg: ExperimentConfig, train: Dataset | None = None,
                   test: Dataset | None = None) -> SweepResult:
    """Run every configured variant and write curves, manifest and resolved config."""
    if train is None or test is None:
        train, test = load_data(cfg)
    log.info("train %d rows, test %d rows, mean offset %.6f",
             train.count, test.count, train.mean_offset)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(format_config(cfg))

    result = SweepResult()
    for variant in ALL_VARIANTS:
        if variant not in cfg.variant:
            continue
        start = time.perf_counter()
        if variant == "traditional":
            part = run_traditional(cfg, train, test)
        else:
            part = run_parallel(cfg, variant, train, test)
        log.info("%s finished in %.1f s", variant, time.perf_counter() - start)
        result.extend(part)

    emit_csv(result.rows, out_dir / "curves.csv")
    emit_manifest(result.manifest, out_dir / "manifest.csv")
    return result
