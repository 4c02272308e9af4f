"""Memory bank: augmentation, initialization, scoring, eviction."""

import numpy as np
import pytest

from eegtta.losses import energy_score
from eegtta.memory import (AUG_GAUSSIAN, AUG_PERMUTATION, MemoryBank,
                           augment, initialize_bank, removal_score)

LN2 = float(np.log(2.0))


def seg(rng, h=4, w=32):
    return rng.standard_normal((1, h, w)).astype(np.float32)


class TestAugment:
    def test_zero_sigma_is_identity(self):
        rng = np.random.default_rng(0)
        x = seg(rng)
        y = augment(x, AUG_GAUSSIAN, rng, sigma_rel=0.0)
        np.testing.assert_array_equal(y, x)

    def test_single_chunk_permutation_is_identity(self):
        rng = np.random.default_rng(1)
        x = seg(rng)
        y = augment(x, AUG_PERMUTATION, rng, n_segments=1)
        np.testing.assert_array_equal(y, x)

    def test_permutation_preserves_multiset_per_row(self):
        rng = np.random.default_rng(2)
        x = seg(rng)
        y = augment(x, AUG_PERMUTATION, rng, n_segments=8)
        np.testing.assert_array_equal(np.sort(y, axis=-1), np.sort(x, axis=-1))

    def test_permutation_rejects_too_many_chunks(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            augment(seg(rng, w=4), AUG_PERMUTATION, rng, n_segments=5)

    def test_gaussian_scales_with_row_std(self):
        rng = np.random.default_rng(4)
        x = np.zeros((1, 2, 2000), dtype=np.float32)
        x[0, 0] = np.sin(np.linspace(0, 40, 2000)) * 10.0  # loud row
        x[0, 1] = np.sin(np.linspace(0, 40, 2000)) * 0.1   # quiet row
        y = augment(x, AUG_GAUSSIAN, rng, sigma_rel=0.5)
        d = y - x
        assert d[0, 0].std() > 20 * d[0, 1].std()


class TestInitialize:
    def test_capacity_sixteen(self):
        rng = np.random.default_rng(5)
        bank = initialize_bank(seg(rng), 16, np.random.default_rng(6))
        assert len(bank) == 16
        assert all(item.insertion_time == 1 for item in bank.items)

    def test_degenerate_capacity_one(self):
        rng = np.random.default_rng(7)
        x = seg(rng)
        bank = initialize_bank(x, 1, np.random.default_rng(8))
        assert len(bank) == 1
        np.testing.assert_array_equal(bank.items[0].segment, x)

    def test_seed_determinism(self):
        rng = np.random.default_rng(9)
        x = seg(rng)
        a = initialize_bank(x, 8, np.random.default_rng(42))
        b = initialize_bank(x, 8, np.random.default_rng(42))
        for ia, ib in zip(a.items, b.items):
            assert ia.segment.tobytes() == ib.segment.tobytes()

    def test_double_initialize_rejected(self):
        rng = np.random.default_rng(10)
        bank = initialize_bank(seg(rng), 4, np.random.default_rng(11))
        with pytest.raises(ValueError):
            bank.initialize(seg(rng))


class TestRemovalScore:
    def test_frozen_value_at_unit_persistence(self):
        assert removal_score(np.array([2.0, 0.0]), 1) == pytest.approx(
            2.1269280110429727, abs=1e-12)

    def test_long_persistence_tempered_limit(self):
        s = removal_score(np.array([2.0, 0.0]), 10_000)
        assert s == pytest.approx(LN2, abs=1e-3)

    def test_negative_energy_identity_at_unit_persistence(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            logits = rng.standard_normal(3) * 5.0
            assert removal_score(logits, 1) == pytest.approx(
                -energy_score(logits, tau=1.0), abs=1e-12)


def constant_logits_model(table):
    """Fake model: looks up per-item logits by object identity."""
    def model(items):
        return np.stack([table[id(item)] for item in items])
    return model


class TestInsertAndEvict:
    def _bank_with_items(self, n, rng):
        bank = initialize_bank(seg(rng), n, np.random.default_rng(13))
        return bank

    def test_highest_score_evicted_brute_force(self):
        rng = np.random.default_rng(14)
        for trial in range(20):
            bank = self._bank_with_items(8, rng)
            table = {}

            def model(items):
                for it in items:
                    if id(it) not in table:
                        table[id(it)] = rng.standard_normal(2) * 3
                return np.stack([table[id(it)] for it in items])

            before = list(bank.items)
            t = 2 + trial
            evicted, score, _ = bank.insert_and_evict(seg(rng), t, model)
            new_item = (evicted if evicted not in before
                        else next(it for it in bank.items
                                  if it not in before))
            candidates = before + [new_item]
            oracle = [removal_score(table[id(it)], it.persistence(t))
                      for it in candidates]
            assert score == pytest.approx(max(oracle), abs=1e-12)
            assert evicted is candidates[int(np.argmax(oracle))]
            assert len(bank) == 8

    def test_tie_breaks_to_earliest_insertion_then_order(self):
        # zero logits score ln2 at every persistence, so everything ties
        rng = np.random.default_rng(15)
        bank = self._bank_with_items(4, rng)
        for item, t in zip(bank.items, (2, 1, 1, 4)):
            item.insertion_time = t
        model = lambda items: np.zeros((len(items), 2))
        oldest = bank.items[1]
        evicted, score, _ = bank.insert_and_evict(seg(rng), 5, model)
        assert score == pytest.approx(LN2, abs=1e-12)
        assert evicted is oldest

    def test_all_identical_items_evicts_first_stored(self):
        rng = np.random.default_rng(19)
        bank = self._bank_with_items(4, rng)
        first = bank.items[0]
        model = lambda items: np.zeros((len(items), 2))
        evicted, _, _ = bank.insert_and_evict(seg(rng), 1, model)
        assert evicted is first

    def test_requires_full_bank(self):
        rng = np.random.default_rng(16)
        bank = MemoryBank(capacity=4, rng=np.random.default_rng(17))
        with pytest.raises(ValueError):
            bank.insert_and_evict(seg(rng), 2, lambda items: np.zeros((1, 2)))

    def test_capacity_invariant_over_many_steps(self):
        rng = np.random.default_rng(18)
        bank = self._bank_with_items(6, rng)
        model = lambda items: rng.standard_normal((len(items), 2))
        for t in range(2, 60):
            bank.insert_and_evict(seg(rng), t, model)
            assert len(bank) == 6
