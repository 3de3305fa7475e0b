"""Descriptor sets, softmax priors, weighting stubs, and the prior file schema."""

import json

import numpy as np
import pytest

from bioatt.priors import (
    DEFAULT_DESCRIPTORS,
    DescriptorSet,
    PriorDistribution,
    PriorFileError,
    compute_priors,
    generic_descriptors,
    load_prior_file,
    random_priors,
    uniform_priors,
    write_prior_file,
)

# The published example prior: lungs-dominant chest slice.
PAPER_EXAMPLE = {"lungs": 0.9935, "mediastinum": 0.0059, "spleen": 0.0005, "ventricles": 0.0001}


class TestDescriptorSet:
    def test_default_has_17_unique_names(self):
        ds = DescriptorSet()
        assert len(ds) == 17
        assert len(set(ds.names)) == 17
        for name in PAPER_EXAMPLE:
            assert name in ds.names

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            DescriptorSet(())

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            DescriptorSet(("liver", "liver"))


class TestComputePriors:
    def test_equal_scores_give_uniform(self):
        ds = generic_descriptors(6)
        p = compute_priors(np.full(6, 1.7), ds)
        np.testing.assert_allclose(p.probs, 1.0 / 6.0, atol=1e-12)

    def test_two_score_closed_form(self):
        p = compute_priors([np.log(2.0), 0.0], generic_descriptors(2))
        np.testing.assert_allclose(p.probs, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)

    def test_reproduces_published_lungs_example(self):
        # invert the softmax: scores = log(p) reproduce the target distribution
        ds = DescriptorSet()
        target = np.full(17, 1e-8)
        for name, value in PAPER_EXAMPLE.items():
            target[ds.index(name)] = value
        target /= target.sum()
        p = compute_priors(np.log(target), ds)
        np.testing.assert_allclose(p.probs, target, atol=1e-9)
        assert p.probs[ds.index("lungs")] == pytest.approx(0.9935, abs=1e-3)
        # and the distribution is accepted by the validator round trip
        PriorDistribution(p.probs, ds)

    def test_shift_invariance(self, rng):
        ds = generic_descriptors(9)
        scores = rng.normal(size=9)
        p1 = compute_priors(scores, ds)
        p2 = compute_priors(scores + 123.456, ds)
        np.testing.assert_allclose(p1.probs, p2.probs, atol=1e-9)

    def test_descriptor_permutation_permutes_probs(self, rng):
        names = tuple(f"organ_{i}" for i in range(8))
        scores = rng.normal(size=8)
        perm = rng.permutation(8)
        p = compute_priors(scores, DescriptorSet(names))
        pp = compute_priors(scores[perm], DescriptorSet(tuple(names[i] for i in perm)))
        np.testing.assert_allclose(pp.probs, p.probs[perm], atol=1e-12)

    def test_strictly_positive_and_normalized(self, rng):
        for _ in range(25):
            n = int(rng.integers(1, 30))
            p = compute_priors(rng.normal(scale=30, size=n), generic_descriptors(n))
            assert p.probs.min() > 0.0
            assert abs(p.probs.sum() - 1.0) <= 1e-9

    def test_non_finite_scores_rejected(self):
        with pytest.raises(ValueError, match="NaN"):
            compute_priors([np.inf, 0.0], generic_descriptors(2))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="scores"):
            compute_priors([0.0, 1.0], generic_descriptors(3))


class TestUniformAndRandom:
    def test_uniform_17(self):
        p = uniform_priors(17)
        np.testing.assert_allclose(p.probs, 1.0 / 17.0, atol=1e-12)
        assert p.probs[0] == pytest.approx(0.058823, abs=1e-6)

    def test_uniform_small_counts(self):
        np.testing.assert_array_equal(uniform_priors(1).probs, [1.0])
        np.testing.assert_allclose(uniform_priors(4).probs, [0.25] * 4)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            uniform_priors(0)
        with pytest.raises(ValueError):
            random_priors(0, seed=1)

    def test_random_normalized_and_deterministic(self):
        for seed in range(10):
            p = random_priors(11, seed)
            assert abs(p.probs.sum() - 1.0) <= 1e-9
            np.testing.assert_array_equal(p.probs, random_priors(11, seed).probs)

    def test_adjacent_seeds_differ(self):
        differing = sum(
            not np.array_equal(random_priors(17, s).probs, random_priors(17, s + 1).probs)
            for s in range(100)
        )
        assert differing == 100


class TestPriorDistributionInvariants:
    def test_bounds_and_sum(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 25))
            p = random_priors(n, int(rng.integers(1 << 30)))
            assert p.probs.min() >= 0.0
            assert p.probs.max() <= 1.0
            assert 1.0 - 1e-6 <= p.probs.sum() <= 1.0 + 1e-6

    def test_bad_sum_rejected(self):
        with pytest.raises(ValueError, match="sum"):
            PriorDistribution(np.array([0.3, 0.3]), generic_descriptors(2))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            PriorDistribution(np.array([0.5, 0.5]), generic_descriptors(3))


class TestPriorFile:
    def _write(self, tmp_path, payload):
        path = tmp_path / "priors.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        return path

    def test_published_example_accepted(self, tmp_path):
        ds = DescriptorSet()
        vec = [0.0] * 17
        for name, value in PAPER_EXAMPLE.items():
            vec[ds.index(name)] = value
        path = self._write(tmp_path, {"descriptors": list(ds.names), "priors": {"chest_001": vec}})
        loaded = load_prior_file(path, descriptors=ds)
        assert loaded["chest_001"].probs[ds.index("lungs")] == pytest.approx(0.9935, abs=1e-4)

    def test_half_sum_rejected(self, tmp_path):
        ds = generic_descriptors(4)
        path = self._write(tmp_path, {"descriptors": list(ds.names), "priors": {"a": [0.125] * 4}})
        with pytest.raises(PriorFileError, match="sums to 0.5"):
            load_prior_file(path, descriptors=ds)

    def test_explicit_renormalization_flag(self, tmp_path):
        ds = generic_descriptors(4)
        path = self._write(tmp_path, {"descriptors": list(ds.names), "priors": {"a": [0.125] * 4}})
        loaded = load_prior_file(path, descriptors=ds, renormalize=True)
        np.testing.assert_allclose(loaded["a"].probs, 0.25)

    def test_empty_descriptor_list_rejected(self, tmp_path):
        path = self._write(tmp_path, {"descriptors": [], "priors": {}})
        with pytest.raises(PriorFileError, match="empty"):
            load_prior_file(path)

    def test_unknown_descriptor_names_rejected(self, tmp_path):
        ds = generic_descriptors(3)
        path = self._write(tmp_path, {
            "descriptors": ["descriptor_00", "descriptor_01", "something_else"],
            "priors": {"a": [0.2, 0.3, 0.5]},
        })
        with pytest.raises(PriorFileError, match="do not match"):
            load_prior_file(path, descriptors=ds)

    def test_descriptor_order_must_match(self, tmp_path):
        ds = generic_descriptors(3)
        path = self._write(tmp_path, {
            "descriptors": ["descriptor_01", "descriptor_00", "descriptor_02"],
            "priors": {"a": [0.2, 0.3, 0.5]},
        })
        with pytest.raises(PriorFileError, match="do not match"):
            load_prior_file(path, descriptors=ds)

    def test_wrong_vector_length_rejected(self, tmp_path):
        ds = generic_descriptors(3)
        path = self._write(tmp_path, {"descriptors": list(ds.names), "priors": {"a": [0.5, 0.5]}})
        with pytest.raises(PriorFileError, match="list of 3"):
            load_prior_file(path, descriptors=ds)

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(PriorFileError, match="JSON"):
            load_prior_file(path)

    def test_round_trip_write_load(self, rng, tmp_path):
        ds = DescriptorSet()
        mapping = {f"img_{i}": random_priors(ds, int(rng.integers(1 << 30))) for i in range(5)}
        path = tmp_path / "out.json"
        write_prior_file(path, mapping)
        loaded = load_prior_file(path, descriptors=ds)
        assert sorted(loaded) == sorted(mapping)
        for key in mapping:
            np.testing.assert_allclose(loaded[key].probs, mapping[key].probs, rtol=0, atol=1e-12)

    def test_serialization_keeps_nine_significant_digits(self, tmp_path):
        ds = generic_descriptors(2)
        value = 1.0 / 3.0
        write_prior_file(tmp_path / "p.json", {"a": PriorDistribution(np.array([value, 1 - value]), ds)})
        text = (tmp_path / "p.json").read_text(encoding="utf-8")
        assert "0.3333333333333333" in text  # full repr precision, >= 9 digits
