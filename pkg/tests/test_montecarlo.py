import numpy as np
import pytest

from hyperns.montecarlo import CHUNK_SIZE, EstimatorResult, derive_seed, params_hash, sample_map


class Squares:
    def __call__(self, idx):
        return {"v": np.array([float(i) ** 2 for i in idx])}


def test_chunks_cover_indices_in_order():
    out = sample_map(Squares(), 4500, chunk_size=CHUNK_SIZE)["v"]
    assert np.array_equal(out, np.arange(4500.0) ** 2)


def test_worker_count_does_not_change_output():
    a = sample_map(Squares(), 4500, workers=1)["v"]
    b = sample_map(Squares(), 4500, workers=3)["v"]
    assert np.array_equal(a, b)


def test_offset():
    out = sample_map(Squares(), 3, offset=10)["v"]
    assert np.array_equal(out, [100.0, 121.0, 144.0])


def test_estimator_result_statistics():
    r = EstimatorResult.from_samples(np.array([1.0, 2.0, 3.0, 4.0]))
    assert r.mean == 2.5
    assert r.stderr == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    with pytest.raises(ValueError):
        EstimatorResult.from_samples(np.array([1.0]))


def test_record_omits_timings_by_default():
    r = EstimatorResult(1.0, 0.1, 10, elapsed=3.2)
    rec = r.record("op", "abc", 5)
    assert set(rec) == {"op", "params_hash", "mean", "stderr", "n_samples", "seed"}
    assert r.record("op", "abc", 5, timings=True)["elapsed"] == 3.2


def test_hash_and_seed_derivation_are_stable():
    assert params_hash({"a": 1, "b": 2}) == params_hash({"b": 2, "a": 1})
    assert len(params_hash({"a": 1})) == 16
    assert derive_seed(7, 1) == derive_seed(7, 1)
    assert derive_seed(7, 1) != derive_seed(7, 2)
