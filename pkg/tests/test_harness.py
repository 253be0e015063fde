import dataclasses
import gzip

import numpy as np
import pytest

from ensemble_forge import cli, harness
from ensemble_forge import mnist_io as mio
from ensemble_forge.errors import ConfigError

from conftest import random_dataset


@pytest.fixture(scope="module")
def small_data():
    return random_dataset(80, seed=3, mean_offset=0.1), random_dataset(30, seed=4, mean_offset=0.1)


def small_cfg(tmp_path, **kw):
    base = dict(output_dir=str(tmp_path / "out"), n_models=4, n_grid=(1, 2, 4), checkpoints=(1, 2),
                learning_rate=0.05)
    base.update(kw)
    return harness.ExperimentConfig(**base)


def write_fake_mnist(root, n_train=40, n_test=20):
    rng = np.random.default_rng(0)
    for prefix, n in (("train", n_train), ("t10k", n_test)):
        pixels = rng.integers(0, 256, (n, 784), dtype=np.uint8)
        labels = np.arange(n) % 10
        (root / f"{prefix}-images-idx3-ubyte.gz").write_bytes(
            gzip.compress(mio.encode_idx_images(mio.RawImageSet(n, 28, 28, pixels))))
        (root / f"{prefix}-labels-idx1-ubyte").write_bytes(
            mio.encode_idx_labels(mio.LabelSet(n, labels)))


# --- config ---------------------------------------------------------------------

def test_every_field_has_a_parser():
    assert set(harness.PARSERS) == {f.name for f in dataclasses.fields(harness.ExperimentConfig)}


def test_config_text_round_trip():
    cfg = harness.ExperimentConfig(train_subset=None, variant=("plain",), cache_dir="/tmp/c",
                                   resume=True, learning_rate=0.07, n_models=8, n_grid=(1, 8))
    text = harness.format_config(cfg)
    assert harness.build_config(harness.parse_config_text(text)) == cfg


def test_config_comments_and_overrides():
    values = harness.parse_config_text("# desk\nn_models = 4  # small\nn_grid=1,2,4\n\n")
    cfg = harness.build_config(values, {"n_models": 8})
    assert cfg.n_models == 8 and cfg.n_grid == (1, 2, 4)


@pytest.mark.parametrize("text", ["colour = red", "n_models = four", "just words"])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        harness.parse_config_text(text)


@pytest.mark.parametrize("kw", [
    dict(n_grid=(1, 64)),
    dict(n_grid=(2, 1)),
    dict(checkpoints=(6, 2)),
    dict(checkpoints=()),
    dict(variant=("plain", "boosted")),
    dict(resume=True),
    dict(workers=0),
])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        harness.ExperimentConfig(**kw)


# --- csv ------------------------------------------------------------------------

def test_emit_empty_is_header_only(tmp_path):
    harness.emit_csv([], tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text() == "variant,iteration,N,error,wall_seconds\n"


def test_emit_one_row(tmp_path):
    harness.emit_csv([harness.CurveRow("plain", 1, 1, 0.25, 0.0)], tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == [
        "variant,iteration,N,error,wall_seconds", "plain,1,1,0.25,0",
    ]


def test_emit_sorts_and_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    rows = [
        harness.CurveRow(v, int(it), int(n), float(rng.random()), float(rng.random() * 100))
        for v in ("plain", "bootstrap") for it in (6, 1) for n in (8, 1, 2)
    ]
    harness.emit_csv(rows, tmp_path / "c.csv")
    back = harness.read_csv(tmp_path / "c.csv")
    assert back == sorted(rows, key=lambda r: (r.variant, r.iteration, r.N))


# --- experiments ----------------------------------------------------------------

def test_parallel_row_count(tmp_path, small_data):
    cfg = small_cfg(tmp_path, n_models=8, n_grid=(1, 2, 4, 8), checkpoints=(1, 6))
    out = harness.run_parallel(cfg, "plain", *small_data)
    assert len(out.rows) == 8
    assert {(r.iteration, r.N) for r in out.rows} == {(c, n) for c in (1, 6) for n in (1, 2, 4, 8)}
    assert all(0 <= r.error <= 1 for r in out.rows)


def test_parallel_single_point_is_individual_error(tmp_path, small_data):
    cfg = small_cfg(tmp_path, n_models=1, n_grid=(1,), checkpoints=(1,))
    out = harness.run_parallel(cfg, "bootstrap", *small_data)
    (row,) = out.rows
    (entry,) = out.manifest
    assert row.N == 1 and row.error == float(entry["individual_error"])


def test_parallel_requires_configured_variant(tmp_path, small_data):
    with pytest.raises(ConfigError):
        harness.run_parallel(small_cfg(tmp_path, variant=("plain",)), "bootstrap", *small_data)
    with pytest.raises(ConfigError):
        harness.run_parallel(small_cfg(tmp_path), "traditional", *small_data)


def test_traditional_single_checkpoint(tmp_path, small_data):
    out = harness.run_traditional(small_cfg(tmp_path, checkpoints=(1,)), *small_data)
    assert [(r.variant, r.iteration, r.N) for r in out.rows] == [("traditional", 1, 1)]


def test_traditional_matches_plain_single_model(tmp_path, small_data):
    cfg = small_cfg(tmp_path, checkpoints=(1, 2, 3))
    trad = harness.run_traditional(cfg, *small_data)
    plain = harness.run_parallel(dataclasses.replace(cfg, n_models=1, n_grid=(1,)), "plain", *small_data)
    assert [(r.iteration, r.error) for r in trad.rows] == [(r.iteration, r.error) for r in plain.rows]


def test_traditional_requires_variant(tmp_path, small_data):
    with pytest.raises(ConfigError):
        harness.run_traditional(small_cfg(tmp_path, variant=("plain",)), *small_data)


@pytest.mark.slow
def test_traditional_improves_on_desk_subset(tmp_path, desk_data):
    cfg = small_cfg(tmp_path, checkpoints=tuple(range(1, 11)), learning_rate=0.1)
    out = harness.run_traditional(cfg, *desk_data)
    errors = {r.iteration: r.error for r in out.rows}
    assert sorted(errors) == list(range(1, 11))
    assert errors[10] < errors[1]


def test_experiment_outputs_are_deterministic(tmp_path, small_data):
    a = small_cfg(tmp_path / "a")
    b = small_cfg(tmp_path / "b", workers=3)
    res = harness.run_experiment(a, *small_data)
    harness.run_experiment(b, *small_data)
    for name in ("curves.csv", "manifest.csv"):
        assert (tmp_path / "a/out" / name).read_bytes() == (tmp_path / "b/out" / name).read_bytes()
    # row completeness: traditional has one row per checkpoint, each parallel variant one per pair
    assert len(res.rows) == 2 + 2 * (2 * 3)
    assert harness.read_csv(tmp_path / "a/out/curves.csv") == sorted(
        res.rows, key=lambda r: (r.variant, r.iteration, r.N))
    resolved = (tmp_path / "a/out/config.resolved").read_text()
    assert harness.build_config(harness.parse_config_text(resolved)) == a


def test_timing_only_when_requested(tmp_path, small_data):
    off = harness.run_experiment(small_cfg(tmp_path / "a"), *small_data)
    on = harness.run_experiment(small_cfg(tmp_path / "b", record_timing=True), *small_data)
    assert all(r.wall_seconds == 0 for r in off.rows)
    assert all(r.wall_seconds > 0 for r in on.rows)
    # cumulative cost grows with N
    plain = [r.wall_seconds for r in on.rows if r.variant == "plain" and r.iteration == 1]
    assert plain == sorted(plain)


@pytest.mark.slow
def test_ensemble_beats_mean_individual(desk_run):
    cfg, result = desk_run
    ens = next(r.error for r in result.rows if (r.variant, r.iteration, r.N) == ("plain", 6, 32))
    indiv = [float(m["individual_error"]) for m in result.manifest
             if m["variant"] == "plain" and m["sweep"] == 6]
    assert len(indiv) == 32
    assert ens < np.mean(indiv)


# --- cli ------------------------------------------------------------------------

def test_cli_success(tmp_path):
    write_fake_mnist(tmp_path)
    out = tmp_path / "out"
    code = cli.main(["-q", "run", "--data-dir", str(tmp_path), "--output-dir", str(out),
                     "--n-models", "2", "--n-grid", "1,2", "--checkpoints", "1",
                     "--train-subset", "full", "--test-subset", "full", "--variant", "plain"])
    assert code == cli.EXIT_OK
    assert len(harness.read_csv(out / "curves.csv")) == 2
    assert "n_models=2" in (out / "config.resolved").read_text()


def test_cli_flags_override_config_file(tmp_path):
    write_fake_mnist(tmp_path)
    conf = tmp_path / "run.conf"
    conf.write_text(f"data_dir={tmp_path}\noutput_dir={tmp_path / 'out'}\nn_models=3\n"
                    "n_grid=1,3\ncheckpoints=1\nvariant=traditional\ntrain_subset=full\n")
    assert cli.main(["-q", "run", "--config", str(conf), "--n-grid", "1"]) == cli.EXIT_OK
    assert "n_grid=1\n" in (tmp_path / "out/config.resolved").read_text()


def test_cli_config_error(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("n_modles=3\n")
    assert cli.main(["-q", "run", "--config", str(conf)]) == cli.EXIT_CONFIG
    assert cli.main(["-q", "run", "--n-models", "x"]) == cli.EXIT_CONFIG
    assert cli.main(["-q", "run", "--config", str(tmp_path / "missing.conf")]) == cli.EXIT_CONFIG


def test_cli_data_error(tmp_path):
    code = cli.main(["-q", "run", "--data-dir", str(tmp_path / "nowhere"),
                     "--output-dir", str(tmp_path / "out")])
    assert code == cli.EXIT_DATA
