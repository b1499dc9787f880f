"""Prompt-phase compression: layouts, budgets, and layer allocation."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvsim.core import CacheEntry, Origin
from kvsim.prefill import (
    PrefillPolicy,
    PrefillPolicyKind,
    allocate_layer_budgets,
    apply_prefill_policy,
    compress_prefill_streaming,
    compress_prefill_topk,
    compress_prefill_window,
    smooth_scores,
)
from kvsim.selection import ScoreVector


def prompt_kv(m):
    return [CacheEntry(i, Origin.PREFILL) for i in range(m)]


def positions(pool):
    return [e.position for e in pool.prefill_entries]


class TestTopKLocal:
    def test_small_example(self):
        # enumerate top-2 of the first four positions by hand
        scores = [0.4, 0.1, 0.3, 0.2]
        best_two = set(
            max(
                itertools.combinations(range(4), 2),
                key=lambda s: (scores[s[0]] + scores[s[1]], [-p for p in s]),
            )
        )
        assert best_two == {0, 2}
        pool = compress_prefill_topk(ScoreVector.from_dense(scores), prompt_kv(6), alpha1=2, alpha2=2)
        assert positions(pool) == sorted(best_two | {4, 5})

    def test_budget_covers_prompt_keeps_everything(self):
        pool = compress_prefill_topk(ScoreVector.from_dense(np.ones(5)), prompt_kv(5), 3, 2)
        assert positions(pool) == [0, 1, 2, 3, 4]

    def test_production_scale_budget(self):
        m, alpha1, alpha2 = 4096, 2040, 8
        scores = ScoreVector.from_dense(np.random.default_rng(0).random(m))
        pool = compress_prefill_topk(scores, prompt_kv(m), alpha1, alpha2)
        assert pool.prefill_size == 2048

    def test_local_window_exceeding_prompt_rejected(self):
        with pytest.raises(ValueError, match="alpha2"):
            compress_prefill_topk(ScoreVector.from_dense(np.ones(4)), prompt_kv(4), 1, 5)

    def test_zero_budget_rejected(self):
        with pytest.raises(ValueError, match="at least 1"):
            compress_prefill_topk(ScoreVector.from_dense(np.ones(4)), prompt_kv(4), 0, 0)

    @given(
        m=st.integers(4, 40),
        alpha1=st.integers(0, 10),
        alpha2=st.integers(1, 10),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=100)
    def test_local_window_always_retained(self, m, alpha1, alpha2, seed):
        if alpha2 > m:
            alpha2 = m
        scores = ScoreVector.from_dense(np.random.default_rng(seed).random(m))
        pool = compress_prefill_topk(scores, prompt_kv(m), alpha1, alpha2)
        kept = set(positions(pool))
        assert set(range(m - alpha2, m)) <= kept
        assert pool.prefill_size == min(alpha1 + alpha2, m)


class TestStreaming:
    def test_split_example(self):
        pool = compress_prefill_streaming(prompt_kv(10), 4)
        assert positions(pool) == [0, 1, 8, 9]

    def test_budget_covering_prompt(self):
        pool = compress_prefill_streaming(prompt_kv(6), 10)
        assert positions(pool) == list(range(6))

    def test_production_scale_blocks(self):
        pool = compress_prefill_streaming(prompt_kv(5000), 2560)
        kept = positions(pool)
        assert kept[:1280] == list(range(1280))
        assert kept[1280:] == list(range(3720, 5000))

    def test_odd_budget_ceil_head(self):
        pool = compress_prefill_streaming(prompt_kv(10), 5)
        assert positions(pool) == [0, 1, 2, 8, 9]

    def test_tiny_budget_rejected(self):
        with pytest.raises(ValueError, match="total_budget"):
            compress_prefill_streaming(prompt_kv(10), 1)


class TestWindow:
    def rows(self, dense):
        return [ScoreVector.from_dense(r) for r in dense]

    def test_pooling_width_one_equals_topk(self):
        rng = np.random.default_rng(7)
        dense = rng.random((3, 12))
        rows = self.rows(dense)
        agg = dense.mean(axis=0)
        via_window = compress_prefill_window(rows, prompt_kv(12), 4, 2, pooling_width=1)
        via_topk = compress_prefill_topk(ScoreVector.from_dense(agg), prompt_kv(12), 4, 2)
        assert positions(via_window) == positions(via_topk)

    def test_uniform_scores_tie_break_to_earliest(self):
        rows = self.rows(np.ones((2, 10)))
        pool = compress_prefill_window(rows, prompt_kv(10), 3, 2, pooling_width=3)
        assert positions(pool) == [0, 1, 2, 8, 9]

    def test_even_pooling_width_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            compress_prefill_window(self.rows(np.ones((1, 8))), prompt_kv(8), 2, 2, pooling_width=4)

    def test_matches_naive_reimplementation(self):
        # brute-force oracle: sum/count smoothing and selection by full sort
        rng = np.random.default_rng(123)
        m, w, width, alpha1, alpha2 = 32, 8, 3, 8, 4
        dense = rng.random((w, m))
        agg = dense.mean(axis=0)
        half = width // 2
        smoothed = []
        for i in range(m):
            lo, hi = max(0, i - half), min(m, i + half + 1)
            smoothed.append(sum(agg[lo:hi]) / (hi - lo))
        ranked = sorted(range(m - alpha2), key=lambda p: (-smoothed[p], p))
        expected = sorted(set(ranked[:alpha1]) | set(range(m - alpha2, m)))
        pool = compress_prefill_window(self.rows(dense), prompt_kv(m), alpha1, alpha2, width)
        assert positions(pool) == expected

    @given(seed=st.integers(0, 2**32 - 1), width=st.sampled_from([1, 3, 5, 7]))
    @settings(max_examples=60)
    def test_smoothing_matches_windowed_average(self, seed, width):
        scores = np.random.default_rng(seed).random(20)
        smoothed = smooth_scores(scores, width)
        half = width // 2
        for i in range(20):
            lo, hi = max(0, i - half), min(20, i + half + 1)
            assert smoothed[i] == pytest.approx(scores[lo:hi].sum() / (hi - lo), rel=1e-12)


class TestLayerAllocation:
    def test_flat_when_taper_is_one(self):
        assert allocate_layer_budgets(120, 4, 1.0) == [30, 30, 30, 30]

    def test_single_layer(self):
        assert allocate_layer_budgets(77, 1, 0.5) == [77]

    def test_linear_taper_with_sum_constraint(self):
        assert allocate_layer_budgets(300, 4, 0.5) == [100, 83, 67, 50]

    def test_budget_below_layers_rejected(self):
        with pytest.raises(ValueError, match="below one entry"):
            allocate_layer_budgets(3, 4, 0.5)

    def test_taper_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="taper_ratio"):
            allocate_layer_budgets(100, 4, 1.5)

    @given(
        total=st.integers(8, 4096),
        layers=st.integers(1, 40),
        taper=st.floats(0.0, 1.0, allow_nan=False),
    )
    @settings(max_examples=150)
    def test_sum_exact_and_monotone(self, total, layers, taper):
        if total < layers:
            total = layers
        budgets = allocate_layer_budgets(total, layers, taper)
        assert sum(budgets) == total
        assert all(b >= 0 for b in budgets)
        assert all(a >= b for a, b in zip(budgets, budgets[1:]))


class TestDispatch:
    def test_full_cache_is_identity(self):
        policy = PrefillPolicy(kind=PrefillPolicyKind.FULL)
        pool = apply_prefill_policy(policy, prompt_kv(9), ScoreVector.from_dense(np.ones(9)))
        assert positions(pool) == list(range(9))

    def test_pyramid_layer_override_shrinks_budget(self):
        policy = PrefillPolicy(kind=PrefillPolicyKind.PYRAMID, alpha1=6, alpha2=2)
        rows = [ScoreVector.from_dense(np.random.default_rng(1).random(20))]
        pool = apply_prefill_policy(
            policy, prompt_kv(20), rows[0], att_rows=rows, layer_budget_override=5
        )
        assert pool.prefill_size == 5
        assert {18, 19} <= set(positions(pool))
