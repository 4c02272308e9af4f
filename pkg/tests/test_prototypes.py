"""Prototype lifecycle: seeding, filtered EMA updates, prediction."""

import numpy as np
import pytest

from eegtta.prototypes import (FILTER_BELOW, PrototypeSet, export_csv,
                               init_from_classifier, predict, update)


class TestInit:
    def test_rows_copied_from_classifier(self):
        w = np.eye(2, 5)
        protos = init_from_classifier(w)
        np.testing.assert_array_equal(protos.vectors, w)
        w[0, 0] = 99.0  # must not alias
        assert protos.vectors[0, 0] == 1.0

    def test_reference_dimensions(self):
        protos = init_from_classifier(np.zeros((2, 192)))
        assert protos.vectors.shape == (2, 192)

    def test_argmax_agreement_with_unbiased_classifier(self):
        rng = np.random.default_rng(0)
        w = rng.standard_normal((3, 16))
        protos = init_from_classifier(w)
        for _ in range(200):
            z = rng.standard_normal(16)
            cls, _ = predict(z, protos)
            assert cls == int((w @ z).argmax())


class TestUpdate:
    def test_scalar_ema_arithmetic(self):
        protos = PrototypeSet(vectors=np.array([[1.0], [5.0]]), alpha=0.9)
        # single confident-enough sample of class 0 with feature 0.0
        new = update(protos, features=[[0.0]], logits=[[4.0, -4.0]])
        assert new.vectors[0, 0] == pytest.approx(0.9)
        assert new.vectors[1, 0] == 5.0  # class 1 empty -> unchanged

    def test_empty_class_left_unchanged(self):
        rng = np.random.default_rng(1)
        protos = init_from_classifier(rng.standard_normal((2, 4)))
        feats = rng.standard_normal((6, 4))
        logits = np.tile([3.0, -3.0], (6, 1))  # all pseudo-labeled class 0
        new = update(protos, feats, logits)
        np.testing.assert_array_equal(new.vectors[1], protos.vectors[1])
        assert not np.array_equal(new.vectors[0], protos.vectors[0])

    def test_hand_computed_mean_and_ema(self):
        protos = PrototypeSet(vectors=np.zeros((2, 2)), alpha=0.9)
        feats = np.array([[1.0, 1.0], [3.0, 1.0], [2.0, 4.0]])
        logits = np.tile([2.0, 0.0], (3, 1))  # all class 0, E ~ -2.13 > -7
        new = update(protos, feats, logits)
        np.testing.assert_allclose(new.vectors[0], [0.2, 0.2], atol=1e-12)

    def test_energy_filter_direction(self):
        # confident logits have energy below the threshold: the literal
        # "above" rule drops them, the inverted rule keeps them
        feats = np.array([[1.0, 0.0]])
        logits = np.array([[20.0, 0.0]])  # energy ~ -20
        above = PrototypeSet(vectors=np.zeros((2, 2)), alpha=0.5,
                             filter_threshold=-7.0)
        below = PrototypeSet(vectors=np.zeros((2, 2)), alpha=0.5,
                             filter_threshold=-7.0,
                             filter_direction=FILTER_BELOW)
        np.testing.assert_array_equal(update(above, feats, logits).vectors,
                                      above.vectors)
        assert update(below, feats, logits).vectors[0, 0] == pytest.approx(0.5)

    def test_contraction_toward_fixed_target(self):
        protos = PrototypeSet(vectors=np.array([[10.0], [0.0]]), alpha=0.9)
        target = np.array([[2.0]])
        logits = np.array([[1.0, 0.0]])
        gaps = []
        for _ in range(30):
            protos = update(protos, target, logits)
            gaps.append(abs(protos.vectors[0, 0] - 2.0))
        ratios = [b / a for a, b in zip(gaps, gaps[1:])]
        np.testing.assert_allclose(ratios, 0.9, atol=1e-9)

    def test_purity_only_matching_pseudo_labels_contribute(self):
        rng = np.random.default_rng(2)
        protos = PrototypeSet(vectors=np.zeros((2, 3)), alpha=0.0)
        feats = rng.standard_normal((8, 3))
        logits = rng.standard_normal((8, 2))
        new = update(protos, feats, logits)
        pseudo = logits.argmax(axis=1)
        for k in range(2):
            members = feats[pseudo == k]
            if len(members):
                np.testing.assert_allclose(new.vectors[k], members.mean(axis=0))


class TestPredict:
    def test_orthogonal_feature_uniform(self):
        protos = PrototypeSet(vectors=np.array([[1.0, 0, 0], [0, 1.0, 0]]))
        cls, probs = predict(np.array([0.0, 0.0, 5.0]), protos)
        np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-12)

    def test_softmax_of_two_zero(self):
        protos = PrototypeSet(vectors=np.array([[2.0], [0.0]]))
        cls, probs = predict(np.array([1.0]), protos)
        assert cls == 0
        np.testing.assert_allclose(probs, [0.880797, 0.119203], atol=1e-6)

    def test_positive_scaling_keeps_argmax(self):
        rng = np.random.default_rng(3)
        protos = init_from_classifier(rng.standard_normal((3, 6)))
        for _ in range(50):
            z = rng.standard_normal(6)
            base, _ = predict(z, protos)
            for lam in (0.1, 2.0, 37.0):
                assert predict(lam * z, protos)[0] == base

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(4)
        protos = init_from_classifier(rng.standard_normal((4, 8)) * 10)
        for _ in range(50):
            _, probs = predict(rng.standard_normal(8) * 10, protos)
            assert abs(probs.sum() - 1.0) < 1e-6

    def test_dimension_mismatch(self):
        protos = init_from_classifier(np.zeros((2, 4)))
        with pytest.raises(ValueError):
            predict(np.zeros(5), protos)


def test_export_csv_round_trips(tmp_path):
    protos = init_from_classifier(np.array([[1.5, -2.0], [0.25, 3.0]]))
    path = tmp_path / "protos.csv"
    export_csv(protos, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "class,feature_index,value"
    assert len(lines) == 5
    cls, idx, val = lines[2].split(",")
    assert (int(cls), int(idx), float(val)) == (0, 1, -2.0)
