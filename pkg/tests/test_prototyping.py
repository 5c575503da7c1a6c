"""Streaming inference: pseudo labels, the entropy gate, and combined scores."""

import math

import numpy as np
import pytest

from fedovl.numerics import RngStream, l2_normalize
from fedovl.prototyping import (
    InferenceConfig,
    PrototypeStore,
    classify_stream,
    combined_score,
    gate_and_update,
    pseudo_predict,
)


def orthonormal_prototypes(k, d=None):
    d = d or k
    eye = np.eye(d)
    return [eye[i] for i in range(k)]


class TestPseudoPredict:
    def test_matching_prototype_wins(self):
        protos = orthonormal_prototypes(3)
        label, probs = pseudo_predict(np.array([0.0, 1.0, 0.0]), protos, InferenceConfig())
        assert label == 1
        assert probs[1] == max(probs)

    def test_label_is_temperature_invariant(self):
        rng = RngStream(21, 0)
        protos = [rng.normal(6) for _ in range(5)]
        for _ in range(50):
            z = rng.normal(6)
            l1, _ = pseudo_predict(z, protos, InferenceConfig(tau=0.01))
            l2, _ = pseudo_predict(z, protos, InferenceConfig(tau=1.0))
            assert l1 == l2

    def test_sharp_probabilities_closed_form(self):
        protos = orthonormal_prototypes(2)
        z = np.array([1.0, 0.0])  # cosines (1, 0)
        _, probs = pseudo_predict(z, protos, InferenceConfig(tau=0.01))
        assert probs[0] == pytest.approx(1.0, abs=1e-40)
        assert probs[1] == pytest.approx(math.exp(-100), rel=1e-10)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            pseudo_predict(np.ones(2), [np.ones(2)], InferenceConfig())

    def test_tie_breaks_to_lowest_index(self):
        protos = [np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        label, _ = pseudo_predict(np.array([1.0, 0.0]), protos, InferenceConfig())
        assert label == 0


class TestGateAndUpdate:
    def test_first_acceptance_sets_centroid(self):
        store = PrototypeStore.empty(3)
        cfg = InferenceConfig(epsilon_fraction=1.0)
        z = np.array([3.0, 0.0, 4.0])
        probs = np.array([0.98, 0.01, 0.01])
        out = gate_and_update(store, z, 0, probs, cfg)
        np.testing.assert_allclose(out.centroids[0], [0.6, 0.0, 0.8], atol=1e-15)
        assert out.counts == [1, 0, 0]
        assert out.n == 1

    def test_two_point_mean(self):
        store = PrototypeStore.empty(2)
        cfg = InferenceConfig(epsilon_fraction=1.0)
        probs = np.array([0.99, 0.01])
        store = gate_and_update(store, np.array([1.0, 0.0]), 0, probs, cfg)
        store = gate_and_update(store, np.array([0.0, 1.0]), 0, probs, cfg)
        np.testing.assert_allclose(store.centroids[0], [0.5, 0.5], atol=1e-15)
        assert store.counts[0] == 2

    def test_rejection_only_advances_clock(self):
        store = PrototypeStore.empty(2)
        cfg = InferenceConfig(epsilon_fraction=0.0)
        out = gate_and_update(store, np.array([1.0, 0.0]), 0, np.array([0.6, 0.4]), cfg)
        assert out.counts == [0, 0]
        assert out.centroids == [None, None]
        assert out.n == 1

    def test_incremental_centroid_matches_batch_mean(self):
        rng = RngStream(22, 0)
        store = PrototypeStore.empty(2)
        cfg = InferenceConfig(epsilon_fraction=1.0)
        accepted = []
        probs = np.array([1.0, 0.0])
        for _ in range(1000):
            z = rng.normal(16)
            accepted.append(l2_normalize(z))
            store = gate_and_update(store, z, 0, probs, cfg)
        batch_mean = np.mean(accepted, axis=0)
        assert np.max(np.abs(store.centroids[0] - batch_mean)) < 1e-9
        assert store.counts[0] == 1000

    def test_input_store_unchanged(self):
        store = PrototypeStore.empty(2)
        cfg = InferenceConfig(epsilon_fraction=1.0)
        gate_and_update(store, np.array([1.0, 0.0]), 0, np.array([0.9, 0.1]), cfg)
        assert store.n == 0 and store.counts == [0, 0]


class TestCombinedScore:
    def test_forced_scores(self):
        protos = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        store = PrototypeStore.empty(2)
        store.centroids[0] = np.array([1.0, 0.0])
        store.counts[0] = 1
        scores = combined_score(np.array([1.0, 0.0]), protos, store)
        np.testing.assert_allclose(scores, [2.0, 0.0], atol=1e-12)

    def test_empty_store_reduces_to_text_ranking(self):
        rng = RngStream(23, 0)
        protos = [rng.normal(5) for _ in range(4)]
        store = PrototypeStore.empty(4)
        for _ in range(20):
            z = rng.normal(5)
            scores = combined_score(z, protos, store)
            cosines = [float(np.dot(z, p) / (np.linalg.norm(z) * np.linalg.norm(p))) for p in protos]
            assert int(np.argmax(scores)) == int(np.argmax(cosines))
            np.testing.assert_allclose(scores, np.array(cosines) * 2.0, atol=1e-12)

    def test_matches_hand_evaluation(self):
        def cos(a, b):
            return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

        rng = RngStream(24, 0)
        protos = [rng.normal(4) for _ in range(3)]
        store = PrototypeStore.empty(3)
        store.centroids[1] = l2_normalize(rng.normal(4))
        store.counts[1] = 2
        z = rng.normal(4)
        expected = [
            2.0 * cos(z, protos[0]),
            cos(z, protos[1]) + cos(z, store.centroids[1]),
            2.0 * cos(z, protos[2]),
        ]
        np.testing.assert_allclose(combined_score(z, protos, store), expected, atol=1e-12)


class TestClassifyStream:
    def test_first_answer_is_text_only(self):
        rng = RngStream(25, 0)
        protos = [rng.normal(6) for _ in range(3)]
        z = rng.normal(6)
        preds, _ = classify_stream([z], protos, InferenceConfig())
        assert preds[0] == pseudo_predict(z, protos, InferenceConfig())[0]

    def test_closed_gate_reduces_to_text_only(self):
        rng = RngStream(26, 0)
        protos = [rng.normal(8) for _ in range(4)]
        samples = [rng.normal(8) for _ in range(120)]
        cfg = InferenceConfig(epsilon_fraction=0.0)
        preds, store = classify_stream(samples, protos, cfg)
        assert store.counts == [0, 0, 0, 0]
        expected = [pseudo_predict(z, protos, cfg)[0] for z in samples]
        assert preds == expected

    def test_empty_stream(self):
        protos = orthonormal_prototypes(2)
        preds, store = classify_stream([], protos, InferenceConfig())
        assert preds == []
        assert store.n == 0

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            classify_stream([np.ones(2)], [np.ones(2)], InferenceConfig())

    def test_permuted_stream_still_valid(self):
        rng = RngStream(27, 0)
        protos = [rng.normal(6) for _ in range(3)]
        samples = [rng.normal(6) for _ in range(50)]
        preds1, store1 = classify_stream(samples, protos, InferenceConfig())
        preds2, store2 = classify_stream(samples[::-1], protos, InferenceConfig())
        assert len(preds1) == len(preds2) == 50
        assert store1.n == store2.n == 50

    def test_counts_bounded_by_clock(self):
        rng = RngStream(28, 0)
        protos = [rng.normal(6) for _ in range(3)]
        samples = [rng.normal(6) for _ in range(80)]
        _, store = classify_stream(samples, protos, InferenceConfig(epsilon_fraction=0.5))
        assert sum(store.counts) <= store.n == 80

    def test_accepted_members_are_unit_and_centroids_contractive(self):
        rng = RngStream(29, 0)
        protos = [rng.normal(6) for _ in range(3)]
        samples = [rng.normal(6) * 3.0 for _ in range(60)]
        _, store = classify_stream(samples, protos, InferenceConfig(epsilon_fraction=1.0))
        for c, count in enumerate(store.counts):
            if count:
                assert np.linalg.norm(store.centroids[c]) <= 1.0 + 1e-12

    def test_batched_answers_use_batch_start_store(self):
        # Prototypes: class 0 along x, class 1 along y. First sample strongly
        # suggests class 1 near a query direction; streaming mode lets the
        # second sample see that prototype, batched mode does not.
        protos = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        first = np.array([0.1, 1.0])    # pseudo label 1, accepted
        second = np.array([0.72, 0.7])  # text-only favors class 0, barely
        stream_cfg = InferenceConfig(epsilon_fraction=1.0, batch_size=1)
        batch_cfg = InferenceConfig(epsilon_fraction=1.0, batch_size=2)
        stream_preds, _ = classify_stream([first, second], protos, stream_cfg)
        batch_preds, batch_store = classify_stream([first, second], protos, batch_cfg)
        assert stream_preds[1] == 1  # visual prototype from `first` tips it
        assert batch_preds[1] == 0   # batch snapshot: no prototypes yet
        # Updates still committed at batch end.
        assert batch_store.n == 2 and sum(batch_store.counts) == 2

    def test_store_trajectory_independent_of_batch_size(self):
        rng = RngStream(30, 0)
        protos = [rng.normal(6) for _ in range(3)]
        samples = [rng.normal(6) for _ in range(30)]
        _, s1 = classify_stream(samples, protos, InferenceConfig(batch_size=1))
        _, s7 = classify_stream(samples, protos, InferenceConfig(batch_size=7))
        assert s1.counts == s7.counts
        for a, b in zip(s1.centroids, s7.centroids):
            if a is None:
                assert b is None
            else:
                np.testing.assert_array_equal(a, b)


class TestInferenceConfig:
    def test_epsilon_scales_with_class_count(self):
        cfg = InferenceConfig(epsilon_fraction=0.2)
        assert cfg.epsilon(10) == pytest.approx(0.2 * math.log(10), abs=1e-15)

    def test_epsilon_needs_two_classes(self):
        with pytest.raises(ValueError):
            InferenceConfig().epsilon(1)

    def test_validation(self):
        with pytest.raises(ValueError):
            InferenceConfig(tau=0.0)
        with pytest.raises(ValueError):
            InferenceConfig(epsilon_fraction=1.5)
        with pytest.raises(ValueError):
            InferenceConfig(batch_size=0)
