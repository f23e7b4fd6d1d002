import json
import math

import numpy as np
import pytest

from speechmark.audio import AudioClip, Dataset
from speechmark.errors import ContractError, FormatError, StaleKeysError
from speechmark.keys import (
    Key,
    KeySet,
    check_conditions,
    classifier_score,
    generate_key,
    generate_keyset,
    gram_max,
    load_keys,
    save_keys,
)
from speechmark.metrics import attributability, distinguishability
from speechmark.optim import OptimizerConfig
from speechmark.watermark import SampleSource, apply_matrix, train

from conftest import WORKING_LAMBDAS


def unit(vec):
    arr = np.asarray(vec, dtype=np.float64)
    return arr / np.linalg.norm(arr)


def kahan_dot(a, b):
    """Compensated-summation dot product used as a high-precision oracle."""
    total = 0.0
    c = 0.0
    for x, y in zip(a, b):
        term = float(x) * float(y) - c
        t = total + term
        c = (t - total) - term
        total = t
    return total


class TestClassifierScore:
    def test_basis_vector(self):
        d = 8
        key = Key(unit(np.eye(d)[0]), 0.0, 1)
        clip = AudioClip(np.array([0.5, 0.1, -0.3, 0, 0, 0, 0, 0]), 16000)
        assert classifier_score(key, clip) == pytest.approx(0.5, abs=1e-15)

    def test_constructed_zero_margin(self):
        direction = unit([0.3, -0.4, 0.5, 0.1])
        bias = 0.25
        key = Key(direction, bias, 1)
        clip = AudioClip(-bias * direction, 16000)
        assert classifier_score(key, clip) == pytest.approx(0.0, abs=1e-15)

    def test_matches_compensated_summation(self, rng):
        d = 1024
        direction = unit(rng.standard_normal(d))
        bias = float(rng.normal())
        key = Key(direction, bias, 1)
        samples = rng.uniform(-1, 1, d)
        clip = AudioClip(samples, 16000)
        oracle = kahan_dot(direction, samples) + bias
        assert abs(classifier_score(key, clip) - oracle) <= 1e-12

    def test_dimension_mismatch(self):
        key = Key(unit(np.ones(4)), 0.0, 1)
        with pytest.raises(ContractError):
            classifier_score(key, AudioClip(np.zeros(8), 16000))


class TestGenerateKey:
    def test_2d_geometry_without_bias(self):
        # Every point has first coordinate <= -0.5 and a zero-mean second
        # coordinate, so any direction close to (+1, 0) classifies all points
        # negative; the learned direction must be within 5 degrees of it.
        rng = np.random.default_rng(17)
        x1 = rng.uniform(-1.0, -0.5, size=200)
        x2 = rng.uniform(-0.3, 0.3, size=200)
        dataset = Dataset(np.stack([x1, x2], axis=1), 16000, "synthetic")
        result = generate_key(dataset, None, seed=3, use_bias=False)
        assert result.key.bias == 0.0
        angle = math.degrees(math.acos(np.clip(result.key.direction @ np.array([1.0, 0.0]), -1, 1)))
        assert angle <= 5.0
        # enumeration oracle: every point classified negative
        scores = dataset.matrix @ result.key.direction
        assert np.all(scores < 0.0)
        assert result.compliance_rate == 1.0

    def test_second_key_orthogonal(self, dataset):
        first = generate_key(dataset, None, seed=21)
        ks = KeySet.from_keys([first.key], dataset.content_hash)
        second = generate_key(dataset, ks, seed=22)
        assert abs(second.key.direction @ first.key.direction) <= 1e-3
        assert second.compliance_rate >= 0.99

    def test_symmetric_dataset_needs_bias(self):
        rng = np.random.default_rng(8)
        half = rng.uniform(-0.9, 0.9, size=(100, 64))
        sym = np.concatenate([half, -half], axis=0)
        dataset = Dataset(sym, 16000, "synthetic")
        no_bias = generate_key(dataset, None, seed=5, use_bias=False)
        assert no_bias.compliance_rate <= 0.5
        with_bias = generate_key(dataset, None, seed=5, use_bias=True)
        assert with_bias.compliance_rate >= 0.99

    def test_unit_norm_output(self, dataset):
        result = generate_key(dataset, None, seed=31)
        assert np.linalg.norm(result.key.direction) == pytest.approx(1.0, abs=1e-12)

    def test_deterministic(self, small_dataset):
        a = generate_key(small_dataset, None, seed=11)
        b = generate_key(small_dataset, None, seed=11)
        assert np.array_equal(a.key.direction, b.key.direction)
        assert a.key.bias == b.key.bias

    def test_iterated_keyset_gram(self, dataset):
        ks, results = generate_keyset(dataset, 6, seed=19)
        assert ks.gram_max <= 1e-3
        dirs = ks.direction_matrix()
        gram = dirs @ dirs.T
        np.fill_diagonal(gram, 0.0)
        assert np.max(np.abs(gram)) <= 1e-3
        assert all(r.compliance_rate >= 0.99 for r in results)


class TestCheckConditions:
    def test_bound_arithmetic(self, dataset):
        ks, _ = generate_keyset(dataset, 5, seed=29)
        report = check_conditions(ks, dataset, measured_delta=0.02)
        assert report.bound == pytest.approx(0.9)
        assert report.delta == 0.02

    def test_orthogonal_keys_pass(self):
        dirs = np.eye(4)[:2]
        points = np.array([[0.5, 0.25, 0.0, 0.0], [0.25, 0.5, 0.0, 0.0]])
        dataset = Dataset(points, 16000, "synthetic")
        keys = [Key(dirs[0], 0.0, 1), Key(dirs[1], 0.0, 2)]
        ks = KeySet.from_keys(keys, dataset.content_hash)
        report = check_conditions(ks, dataset, measured_delta=0.0)
        assert report.all_pairwise_ok
        assert np.all(report.d_min > 0.0)

    def test_correlated_keys_fail_ratio(self):
        # directions with inner product 0.8; both keys see margins {0.2, 0.4}
        # hence d_min/d_max = 0.5 < 0.8.
        k1 = Key(unit([1.0, 0.0, 0.0]), 0.0, 1)
        k2 = Key(unit([0.8, 0.6, 0.0]), 0.0, 2)
        points = np.array([
            [0.25, 0.0, 0.0],
            [0.5, 0.0, 0.0],
        ])
        # margins under k2: 0.2, 0.4 -> same ratio
        dataset = Dataset(points, 16000, "synthetic")
        ks = KeySet.from_keys([k1, k2], dataset.content_hash)
        report = check_conditions(ks, dataset, measured_delta=0.0)
        assert float(k1.direction @ k2.direction) == pytest.approx(0.8)
        assert report.d_min[0] / report.d_max[0] == pytest.approx(0.5)
        assert not report.pairwise_ok[0, 1]
        assert not report.all_pairwise_ok

    def test_monotonicity_under_new_points(self, small_dataset, small_keyset):
        base = check_conditions(small_keyset, small_dataset, 0.0)
        rng = np.random.default_rng(41)
        extra = rng.uniform(-0.9, 0.9, size=(1, small_dataset.d_x))
        grown = Dataset(np.concatenate([small_dataset.matrix, extra]), small_dataset.sample_rate,
                        "synthetic")
        bigger = check_conditions(small_keyset, grown, 0.0, allow_hash_mismatch=True)
        assert np.all(bigger.d_min <= base.d_min + 1e-15)
        assert np.all(bigger.d_max >= base.d_max - 1e-15)

    def test_stale_hash_rejected(self, small_dataset, small_keyset):
        other = Dataset(small_dataset.matrix * 0.5, small_dataset.sample_rate, "synthetic")
        with pytest.raises(StaleKeysError):
            check_conditions(small_keyset, other, 0.0)
        check_conditions(small_keyset, other, 0.0, allow_hash_mismatch=True)

    def test_empirical_attribution_bound(self, dataset):
        # The measured attribution accuracy must respect the bound implied by
        # the pairwise condition and per-model distinguishability shortfall.
        ks, _ = generate_keyset(dataset, 4, seed=57)
        report = check_conditions(ks, dataset, 0.0)
        assert report.all_pairwise_ok
        source = SampleSource(dataset)
        opt = OptimizerConfig(batch_size=128)
        models = [train(k, source, WORKING_LAMBDAS, opt, seed=(3, k.id)) for k in ks.keys]
        gen = [apply_matrix(m.w, source.draw_matrix([71, k.id], 150))
               for m, k in zip(models, ks.keys)]
        auth = source.draw_matrix([72], 150)
        delta = max(1.0 - distinguishability(k, g, auth) for k, g in zip(ks.keys, gen))
        assert delta <= 0.05
        att = attributability(ks, gen)
        eps = 3.0 * math.sqrt(0.25 / (len(gen) * 150))
        assert att >= 1.0 - ks.n_keys * delta - eps


class TestPersistence:
    def test_round_trip(self, tmp_path, small_keyset, small_dataset):
        path = tmp_path / "keys.json"
        save_keys(small_keyset, path, small_dataset.sample_rate)
        loaded = load_keys(path)
        assert loaded.n_keys == small_keyset.n_keys
        assert loaded.dataset_hash == small_keyset.dataset_hash
        for a, b in zip(loaded.keys, small_keyset.keys):
            assert np.array_equal(a.direction, b.direction)
            assert a.bias == b.bias
            assert a.id == b.id

    def test_gram_mismatch_detected(self, tmp_path, small_keyset, small_dataset):
        path = tmp_path / "keys.json"
        save_keys(small_keyset, path, small_dataset.sample_rate)
        payload = json.loads(path.read_text())
        payload["gram_max"] = payload["gram_max"] + 0.5
        path.write_text(json.dumps(payload))
        with pytest.raises(FormatError):
            load_keys(path)

    def test_malformed_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(FormatError):
            load_keys(path)
        path.write_text(json.dumps({"version": 1, "keys": []}))
        with pytest.raises(FormatError):
            load_keys(path)


class TestKeyTypes:
    def test_unit_norm_enforced(self):
        with pytest.raises(ContractError):
            Key(np.array([1.0, 1.0]), 0.0, 1)

    def test_ids_consecutive(self):
        keys = [Key(unit(np.eye(3)[i]), 0.0, i + 2) for i in range(2)]
        with pytest.raises(ContractError):
            KeySet.from_keys(keys, "h")

    def test_gram_max_single_key(self):
        assert gram_max([Key(unit([1.0, 0.0]), 0.0, 1)]) == 0.0
