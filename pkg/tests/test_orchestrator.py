import csv
import itertools

import pytest

from ensemble_forge import bootstrap, nnet, trainer
from ensemble_forge import orchestrator as orch
from ensemble_forge.errors import ConfigError, EmptyDataset, MeanOffsetMismatch, UnknownModelId
from ensemble_forge.mnist_io import Dataset

from conftest import random_dataset


@pytest.fixture(scope="module")
def small_data():
    return random_dataset(60, seed=1, mean_offset=0.1), random_dataset(25, seed=2, mean_offset=0.1)


def plan(**kw):
    base = dict(master_seed=77, n_models=8, checkpoint_sweeps=(1, 2), learning_rate=0.05)
    base.update(kw)
    return orch.RunPlan(**base)


def blob(results):
    return b"".join(r.to_bytes() for r in results)


# --- seeds --------------------------------------------------------------------

def test_seeds_deterministic():
    assert orch.derive_seeds(5, 3) == orch.derive_seeds(5, 3)


def test_seeds_differ_between_models():
    a, b = orch.derive_seeds(5, 0), orch.derive_seeds(5, 1)
    assert all(x != y for x, y in zip(a, b))


def test_seeds_tag_separation():
    for i in range(10_000):
        s = orch.derive_seeds(2015, i)
        assert len(set(s)) == 3


def test_seeds_collision_free_over_2_pow_20_ids():
    n = 2**20
    for tag in orch._TAGS:
        seeds = {orch._mix(tag, 2015, i) for i in range(n)}
        assert len(seeds) == n


def test_seeds_are_64_bit_and_reject_negative_ids():
    assert all(0 <= s < 2**64 for s in orch.derive_seeds(2**64 - 1, 12345))
    with pytest.raises(UnknownModelId):
        orch.derive_seeds(1, -1)


# --- plan validation ------------------------------------------------------------

def test_plan_validation():
    with pytest.raises(ConfigError):
        plan(n_models=0)
    with pytest.raises(ConfigError):
        plan(checkpoint_sweeps=(2, 1))
    with pytest.raises(ConfigError):
        plan(variant="traditional")
    with pytest.raises(ConfigError):
        plan(worker_count=0)


# --- run_plan -------------------------------------------------------------------

def test_worker_count_does_not_change_results(small_data):
    one = orch.run_plan(plan(worker_count=1), *small_data)
    eight = orch.run_plan(plan(worker_count=8), *small_data)
    assert blob(one) == blob(eight)
    assert [r.model_id for r in eight] == list(range(8))


def test_worker_count_does_not_change_bootstrap_results(small_data):
    one = orch.run_plan(plan(variant="bootstrap", n_models=4), *small_data)
    three = orch.run_plan(plan(variant="bootstrap", n_models=4, worker_count=3), *small_data)
    assert blob(one) == blob(three)


def test_single_plain_model_is_direct_composition(small_data):
    train, test = small_data
    p = plan(n_models=1)
    (result,) = orch.run_plan(p, train, test)
    seeds = orch.derive_seeds(p.master_seed, 0)
    cfg = trainer.TrainConfig(
        init_seed=seeds.init_seed, shuffle_seed=seeds.shuffle_seed, learning_rate=0.05, sweeps=2,
        checkpoints=(1, 2),
    )
    report = trainer.train_local_model(train, cfg)
    for m, sweep in zip(result.logits, (1, 2)):
        direct = nnet.forward_batch(report.checkpoints[sweep], test.inputs)
        assert m.values.tobytes() == direct.tobytes()
        assert m.iteration == sweep
    assert result.errors == [trainer.evaluate(report.checkpoints[s], test) for s in (1, 2)]
    assert result.mask is None


def test_one_logit_matrix_per_checkpoint(small_data):
    results = orch.run_plan(plan(n_models=2, checkpoint_sweeps=(1, 2, 6)), *small_data)
    assert all(len(r.logits) == 3 and r.sweeps == [1, 2, 6] for r in results)
    assert all(m.values.shape == (25, 10) for r in results for m in r.logits)


def test_bootstrap_mask_shared_by_train_and_test(small_data):
    train, test = small_data
    p = plan(variant="bootstrap", n_models=1)
    (result,) = orch.run_plan(p, train, test)
    seeds = orch.derive_seeds(p.master_seed, 0)
    image = bootstrap.select_mask(train, seeds.mask_seed)
    assert (result.mask.seed, result.mask.source_index, result.mask.checksum) == (
        seeds.mask_seed, image.source_index, image.checksum
    )
    # rebuild by hand: masked train for training, the same mask on test for logits
    cfg = p.train_config(seeds)
    report = trainer.train_local_model(bootstrap.apply_mask(train, image), cfg)
    direct = nnet.forward_batch(report.checkpoints[2], bootstrap.apply_mask(test, image).inputs)
    assert result.logits[1].values.tobytes() == direct.tobytes()


def test_run_plan_input_checks(small_data):
    train, test = small_data
    with pytest.raises(EmptyDataset):
        orch.run_plan(plan(), random_dataset(0), test)
    shifted = Dataset(test.inputs, test.labels, 0.2)
    with pytest.raises(MeanOffsetMismatch):
        orch.run_plan(plan(), train, shifted)
    with pytest.raises(UnknownModelId):
        orch.run_model(plan(n_models=2), 2, train, test)


# --- resume ---------------------------------------------------------------------

def test_resume_all_completed_is_empty(small_data):
    assert orch.resume(plan(), set(range(8)), *small_data) == []


def test_resume_nothing_completed_is_full_run(small_data):
    assert blob(orch.resume(plan(), set(), *small_data)) == blob(orch.run_plan(plan(), *small_data))


def test_resume_odds_match_fresh_run(small_data):
    full = orch.run_plan(plan(), *small_data)
    odds = orch.resume(plan(), {0, 2, 4, 6}, *small_data)
    assert [r.model_id for r in odds] == [1, 3, 5, 7]
    assert blob(odds) == blob(full[1::2])


def test_resume_rejects_unknown_ids(small_data):
    with pytest.raises(UnknownModelId):
        orch.resume(plan(), {8}, *small_data)


# --- cache ----------------------------------------------------------------------

def test_cache_layout(tmp_path, small_data):
    p = plan(n_models=2, variant="bootstrap")
    list(orch.iter_plan_cached(p, *small_data, orch.ModelCache(tmp_path), resume_run=False))
    names = sorted(f.name for f in tmp_path.iterdir())
    assert names == [
        "manifest.csv", "model_0_bootstrap_s1.logit", "model_0_bootstrap_s2.logit",
        "model_1_bootstrap_s1.logit", "model_1_bootstrap_s2.logit", "plan_bootstrap.txt",
    ]
    with open(tmp_path / "manifest.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == orch.MANIFEST_COLUMNS
    assert len(rows) == 4
    assert all(len(r["mask_checksum"]) == 16 for r in rows)


def test_interrupted_run_resumes_to_identical_results(tmp_path, small_data):
    p = plan()
    fresh = orch.run_plan(p, *small_data)

    cache = orch.ModelCache(tmp_path)
    partial = list(itertools.islice(orch.iter_plan_cached(p, *small_data, cache, False), 3))
    assert len(partial) == 3
    # torn trailing write from the "crash"
    with open(tmp_path / "manifest.csv", "a") as f:
        f.write("3,plain,12")

    computed = []
    real_iter = orch.iter_plan

    def spy(plan_, train, test, model_ids=None):
        computed.extend(sorted(model_ids))
        return real_iter(plan_, train, test, model_ids)

    orch_iter = orch.iter_plan
    try:
        orch.iter_plan = spy
        resumed = list(orch.iter_plan_cached(p, *small_data, orch.ModelCache(tmp_path), True))
    finally:
        orch.iter_plan = orch_iter
    assert computed == [3, 4, 5, 6, 7]
    assert blob(resumed) == blob(fresh)


def test_resume_refuses_a_different_plan(tmp_path, small_data):
    cache = orch.ModelCache(tmp_path)
    list(orch.iter_plan_cached(plan(n_models=2), *small_data, cache, False))
    with pytest.raises(ConfigError):
        list(orch.iter_plan_cached(plan(n_models=2, master_seed=78), *small_data, cache, True))


def test_fresh_run_resets_only_its_variant(tmp_path, small_data):
    cache = orch.ModelCache(tmp_path)
    list(orch.iter_plan_cached(plan(n_models=2), *small_data, cache, False))
    list(orch.iter_plan_cached(plan(n_models=2, variant="bootstrap"), *small_data, cache, False))
    list(orch.iter_plan_cached(plan(n_models=1), *small_data, cache, False))
    assert sorted(cache.load(plan(n_models=2))) == [0]
    assert sorted(cache.load(plan(n_models=2, variant="bootstrap"))) == [0, 1]
