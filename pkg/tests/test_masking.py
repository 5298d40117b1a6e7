import math

import numpy as np
import pytest

from higmae.datasets import cycle
from higmae.errors import DimensionError
from higmae.hierarchy import Assignment, build_hierarchy
from higmae.masking import (RecoverySchedule, backproject_mask, build_mask_plan, make_plan, masked_count,
                            random_per_level_mask, recovery_count, sample_coarse_mask, schedule_table)

from conftest import random_graph

PAIRS = Assignment(np.array([0, 0, 1, 1]), 2)


class TestSample:
    def test_count(self):
        m = sample_coarse_mask(10, 0.5, np.random.default_rng(0))
        assert m.sum() == 5 and set(np.unique(m)) <= {0, 1}

    def test_zero_ratio(self):
        assert sample_coarse_mask(10, 0.0, np.random.default_rng(0)).sum() == 0

    def test_clamp(self):
        assert sample_coarse_mask(2, 1.0, np.random.default_rng(0)).tolist().count(1) == 1

    @pytest.mark.parametrize("n,ratio,k", [(5, 0.5, 3), (3, 0.5, 2), (7, 0.3, 2), (1, 0.9, 0), (4, 1.0, 3)])
    def test_rounding(self, n, ratio, k):
        assert masked_count(n, ratio) == k


class TestBackproject:
    def test_pairs(self):
        assert backproject_mask(PAIRS, np.array([1, 0])).tolist() == [1, 1, 0, 0]

    def test_zeros(self):
        assert backproject_mask(PAIRS, np.zeros(2, dtype=np.int8)).tolist() == [0, 0, 0, 0]

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            backproject_mask(PAIRS, np.zeros(3))

    def test_three_level_descendants(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            h = build_hierarchy(random_graph(rng, 16, 40), 3, 0.5, seed=int(rng.integers(100)))
            if h.depth < 3:
                continue
            top = h.levels[-1].n
            for node in range(top):
                m = np.zeros(top, dtype=np.int8)
                m[node] = 1
                for lv in reversed(h.levels[:-1]):
                    m = backproject_mask(lv.assignment, m)
                np.testing.assert_array_equal(np.flatnonzero(m), h.descendants(node))


class TestRecovery:
    def test_examples(self):
        s = RecoverySchedule(r_re=0.5, t_e=10, gamma=1.0)
        assert recovery_count(10, s, 0) == 5
        assert recovery_count(10, s, 10) == 0
        assert recovery_count(10, s, 5) == 2

    def test_disabled(self):
        s = RecoverySchedule(t_e=10, enabled=False)
        assert all(r == 0 for _, r in schedule_table(10, s, 20))

    def test_gamma_zero_step(self):
        s = RecoverySchedule(r_re=0.5, t_e=4, gamma=0.0)
        assert [r for _, r in schedule_table(10, s, 6)] == [5, 5, 5, 5, 0, 0, 0]

    def test_decimal_ratio_not_underfloored(self):
        assert recovery_count(10, RecoverySchedule(r_re=0.3, t_e=5), 0) == 3

    def test_default_end_epoch(self):
        assert RecoverySchedule.default_end_epoch(100) == 25
        assert RecoverySchedule.default_end_epoch(1) == 1

    @pytest.mark.parametrize("kw", [dict(r_re=1.5), dict(gamma=-1), dict(t_e=0)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            RecoverySchedule(**kw)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            recovery_count(3, RecoverySchedule(), -1)


class TestPlan:
    def test_consistency_over_random_graphs(self):
        rng = np.random.default_rng(0)
        sched = RecoverySchedule(t_e=3)
        for gi in range(200):
            h = build_hierarchy(random_graph(rng), 3, 0.5, seed=gi)
            for t in range(5):
                plan = build_mask_plan(h, 0.5, sched, t, seed=gi)
                assert plan.is_consistent(h)
                n_top = h.levels[-1].n
                expected = masked_count(n_top, 0.5) - recovery_count(masked_count(n_top, 0.5), sched, t)
                assert int(plan.masks[-1].sum()) == expected

    def test_recovery_monotone(self):
        h = build_hierarchy(cycle(40), 2, 0.5)
        sched = RecoverySchedule(r_re=0.8, t_e=6, gamma=1.5)
        counts = [int(build_mask_plan(h, 0.6, sched, t, seed=3).masks[-1].sum()) for t in range(10)]
        assert counts == sorted(counts)
        assert len(set(counts[6:])) == 1

    def test_deterministic(self):
        h = build_hierarchy(cycle(30), 3, 0.5)
        a = build_mask_plan(h, 0.5, RecoverySchedule(t_e=4), 2, seed=9)
        b = build_mask_plan(h, 0.5, RecoverySchedule(t_e=4), 2, seed=9)
        for x, y in zip(a.masks, b.masks):
            assert x.tobytes() == y.tobytes()

    def test_disabled_matches_after_end(self):
        h = build_hierarchy(cycle(30), 2, 0.5)
        late = build_mask_plan(h, 0.5, RecoverySchedule(t_e=4), 7, seed=1)
        off = build_mask_plan(h, 0.5, RecoverySchedule(t_e=4, enabled=False), 7, seed=1)
        none = build_mask_plan(h, 0.5, None, 7, seed=1)
        for a, b, c in zip(late.masks, off.masks, none.masks):
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(a, c)

    def test_depth_one_is_random_node_masking(self):
        h = build_hierarchy(cycle(10), 1, 0.5)
        plan = build_mask_plan(h, 0.5, None, 0, seed=0)
        assert plan.depth == 1 and plan.masks[0].sum() == 5

    def test_recovered_logged(self):
        h = build_hierarchy(cycle(40), 2, 0.5)
        plan = build_mask_plan(h, 0.5, RecoverySchedule(t_e=4), 0, seed=0)
        assert plan.sampled == 10 and plan.recovered == 5
        assert plan.fine_counts == [int(m.sum()) for m in plan.masks]


class TestPerLevelRandom:
    def test_inconsistent_on_most_draws(self):
        rng = np.random.default_rng(0)
        bad = 0
        for i in range(100):
            h = build_hierarchy(random_graph(rng, 20, 64), 2, 0.5, seed=i)
            bad += not random_per_level_mask(h, 0.5, rng).is_consistent(h)
        assert bad >= 95

    def test_zero_ratio_all_visible(self):
        h = build_hierarchy(cycle(12), 3, 0.5)
        plan = random_per_level_mask(h, 0.0, np.random.default_rng(0))
        assert all(m.sum() == 0 for m in plan.masks)

    def test_make_plan_modes(self):
        h = build_hierarchy(cycle(12), 2, 0.5)
        assert make_plan("per-level-random", h, 0.5, None, 1, 2).mode == "per-level-random"
        with pytest.raises(ValueError):
            make_plan("bogus", h, 0.5, None, 0, 0)


def test_schedule_table_closed_form():
    s = RecoverySchedule(r_re=0.7, t_e=7, gamma=2.0)
    for t, r in schedule_table(13, s, 10):
        assert r == math.floor(13 * 0.7 * max(1 - t / 7, 0) ** 2 + 1e-9)
