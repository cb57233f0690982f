"""Exact quantile computation: arithmetic helpers, token distribution,
bracketing invariants and end-to-end correctness."""
import math

import numpy as np
import pytest

from gossipq.engine import FailureModel, RoundEngine, SimConfig
from gossipq.exact import (
    ExactParams,
    InvariantViolation,
    compute_m,
    distribute_tokens,
    exact_quantile,
    filter_range,
    rank_update,
    robust_distribute_tokens,
)


class TestComputeM:
    def test_worked_example(self):
        # 1024^0.99 ~ 955.4; half of it over 100 valued nodes ~ 4.78 -> 8
        assert compute_m(1024, 100) == 8

    def test_ratio_below_one(self):
        assert compute_m(1024, 2000) == 1

    def test_strictly_greater(self):
        # ratio exactly a power of two must round up
        n = 1024
        ratio = n ** 0.99 / 2.0
        v = int(math.ceil(ratio / 4.0))
        m = compute_m(n, v)
        assert m > ratio / v

    def test_duplication_meets_target(self):
        for v in (1, 3, 10, 100, 400):
            m = compute_m(4096, v)
            if m > 1:
                assert v * m >= 4096 ** 0.99 / 2.0

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            compute_m(64, 0)


class TestRankUpdate:
    def test_examples(self):
        assert rank_update(500, 301, 4) == 800
        assert rank_update(7, 7, 3) == 3      # answer is the minimum
        assert rank_update(9, 1, 1) == 9      # no-op iteration

    def test_rejects_min_above_target(self):
        with pytest.raises(InvariantViolation):
            rank_update(5, 6, 2)
        with pytest.raises(InvariantViolation):
            rank_update(5, 0, 2)


class TestFilterRange:
    def test_point_window(self):
        ids = np.array([3, 0, 2, 1])
        mask = filter_range(ids, 2, 2, 4)
        assert list(mask) == [False, False, True, False]

    def test_unbounded_window_changes_nothing(self):
        ids = np.array([3, 0, 2, 1])
        assert filter_range(ids, 0, 3, 4).all()

    def test_sentinels_never_become_valued(self):
        ids = np.array([0, 1, 2, 3])
        mask = filter_range(ids, 0, 3, real_count=2)
        assert list(mask) == [True, True, False, False]


class TestDistributeTokens:
    def test_m_one_is_identity(self):
        engine = RoundEngine(SimConfig(n=32, seed=1))
        holders = np.array([4, 9, 20])
        dist = distribute_tokens(holders, 1, engine)
        assert engine.rounds == 0
        assert list(dist.key_index[holders]) == [0, 1, 2]
        assert (dist.copy_rank[holders] == 0).all()

    def test_single_value_four_copies(self):
        engine = RoundEngine(SimConfig(n=64, seed=2))
        dist = distribute_tokens(np.array([10]), 4, engine)
        placed = dist.key_index >= 0
        assert placed.sum() == 4
        assert sorted(dist.copy_rank[placed]) == [0, 1, 2, 3]

    def test_copy_multiplicity_and_ranks(self):
        engine = RoundEngine(SimConfig(n=256, seed=3))
        holders = engine.values_rng().choice(256, size=20, replace=False)
        dist = distribute_tokens(holders, 8, engine)
        placed = np.nonzero(dist.key_index >= 0)[0]
        assert len(placed) == 160
        for c in range(20):
            ranks = sorted(dist.copy_rank[placed][dist.key_index[placed] == c])
            assert ranks == list(range(8))

    def test_original_holder_keeps_top_copy(self):
        engine = RoundEngine(SimConfig(n=128, seed=4))
        holders = np.array([5, 77])
        dist = distribute_tokens(holders, 4, engine)
        assert dist.copy_rank[5] == 3 and dist.key_index[5] == 0
        assert dist.copy_rank[77] == 3 and dist.key_index[77] == 1

    def test_weight_conservation_via_final_multiplicity(self):
        # splits preserve the per-origin weight sum, so exactly m weight-1
        # copies of every origin must exist at the end
        engine = RoundEngine(SimConfig(n=512, seed=5))
        holders = engine.values_rng().choice(512, size=30, replace=False)
        dist = distribute_tokens(holders, 16, engine)
        placed = dist.key_index >= 0
        counts = np.bincount(dist.key_index[placed], minlength=30)
        assert (counts == 16).all()

    def test_refuses_overfull_population(self):
        engine = RoundEngine(SimConfig(n=16, seed=1))
        from gossipq.exact import TrialFailure
        with pytest.raises(TrialFailure):
            distribute_tokens(np.arange(9), 2, engine)

    def test_robust_mu_zero_identical(self):
        cfg = SimConfig(n=512, seed=6)
        h = RoundEngine(cfg).values_rng().choice(512, size=40, replace=False)
        d1 = distribute_tokens(h, 4, RoundEngine(cfg))
        d2 = robust_distribute_tokens(h, 4, RoundEngine(cfg))
        assert np.array_equal(d1.key_index, d2.key_index)
        assert np.array_equal(d1.copy_rank, d2.copy_rank)

    def test_potential_decay_under_failures(self):
        # E[Phi(i+1) | Phi(i)] <= (1 - (1-mu)/2) Phi(i) = 0.75 Phi(i)
        ratios = []
        for seed in range(20):
            cfg = SimConfig(
                n=2048, seed=seed,
                failure=FailureModel(mode="uniform", mu=0.5, seed=seed),
            )
            engine = RoundEngine(cfg)
            holders = engine.values_rng().choice(2048, size=256, replace=False)
            dist = robust_distribute_tokens(holders, 4, engine, track_phi=True)
            tr = dist.phi_trace
            ratios += [b / a for a, b in zip(tr, tr[1:]) if a > 0 and b > 0]
        ratios = np.array(ratios)
        sigma = ratios.std() / math.sqrt(len(ratios))
        assert ratios.mean() <= 0.75 + 3 * sigma

    def test_deterministic(self):
        cfg = SimConfig(n=256, seed=9)
        h = RoundEngine(cfg).values_rng().choice(256, size=10, replace=False)
        a = distribute_tokens(h, 8, RoundEngine(cfg))
        b = distribute_tokens(h, 8, RoundEngine(cfg))
        assert np.array_equal(a.key_index, b.key_index)
        assert np.array_equal(a.copy_rank, b.copy_rank)


class TestExactQuantile:
    def test_worked_example_n8(self):
        values = np.array([14, 10, 17, 12, 13, 16, 11, 15])
        res = exact_quantile(0.5, SimConfig(n=8, seed=3), values=values)
        assert res.value == 13.0

    def test_single_node(self):
        res = exact_quantile(0.9, SimConfig(n=1, seed=1), values=np.array([42]))
        assert res.value == 42.0 and res.rounds == 0

    def test_all_values_equal_input(self):
        res = exact_quantile(0.5, SimConfig(n=64, seed=2), values=np.full(64, 7.0))
        assert res.value == 7.0
        assert res.details.get("exit") == "all-equal"

    def test_extreme_quantiles(self):
        values = np.arange(100) * 3
        for phi, expect in ((0.0, 0.0), (1.0, 297.0), (0.01, 0.0)):
            res = exact_quantile(phi, SimConfig(n=100, seed=7), values=values)
            assert res.value == expect

    @pytest.mark.parametrize("n", [256, 1024])
    @pytest.mark.parametrize("phi", [0.1, 0.5, 0.9])
    def test_matches_sort_oracle(self, n, phi):
        for seed in range(5):
            cfg = SimConfig(n=n, seed=seed)
            values = RoundEngine(cfg).values_rng().permutation(n)
            oracle = float(np.sort(values)[math.ceil(phi * n) - 1])
            res = exact_quantile(phi, cfg, values=values)
            assert res.value == oracle

    def test_deterministic(self):
        cfg = SimConfig(n=512, seed=31)
        a = exact_quantile(0.4, cfg)
        b = exact_quantile(0.4, cfg)
        assert a.value == b.value and a.rounds == b.rounds

    def test_answer_block_invariant(self):
        # after every iteration the oracle-sorted state has all ranks in
        # (k - copies, k] equal to the true answer
        cfg = SimConfig(n=1024, seed=12)
        values = RoundEngine(cfg).values_rng().permutation(1024)
        ans = float(np.sort(values)[math.ceil(0.5 * 1024) - 1])
        checked = []

        def check(state, k, copies):
            block = state.value_by_id[k - copies:k]
            checked.append(len(block))
            assert (block == ans).all()

        res = exact_quantile(0.5, cfg, values=values, iteration_callback=check)
        assert res.value == ans
        assert checked  # the hook ran

    def test_window_size_within_derived_bound(self):
        # for iterations bracketed on the first attempt, the surviving
        # window holds at most 2 eps n + 2 M values
        params = ExactParams()
        cfg = SimConfig(n=4096, seed=2)
        res = exact_quantile(0.5, cfg, params=params)
        eps = params.effective_eps(4096)
        copies_before = [1] + res.details["copies_trace"][:-1]
        for v, attempts, m_prev in zip(
            res.details["v_trace"], res.details["attempts_trace"], copies_before
        ):
            if attempts == 1:
                assert v <= 2 * eps * 4096 + 2 * m_prev + 2

    def test_trial_report_counters_accumulate(self):
        res = exact_quantile(0.5, SimConfig(n=256, seed=3))
        assert res.rounds > 0 and res.messages > 0
        assert res.iterations == len(res.details["m_trace"])


class TestRobustExact:
    def test_mu_zero_identical(self):
        cfg = SimConfig(n=512, seed=5)
        a = exact_quantile(0.3, cfg)
        b = exact_quantile(0.3, cfg)
        assert a.value == b.value and a.rounds == b.rounds

    def test_heavy_failures_still_exact(self):
        for seed in range(5):
            cfg = SimConfig(
                n=1024, seed=seed,
                failure=FailureModel(mode="uniform", mu=0.5, seed=seed),
            )
            values = RoundEngine(cfg).values_rng().permutation(1024)
            oracle = float(np.sort(values)[512 - 1])
            res = exact_quantile(0.5, cfg, values=values)
            assert res.value == oracle
            assert res.details["nodes_with_answer"] >= 1024 // 2
