"""Group sampling: match scoring, greedy matching against a reference
trace, the inverse-distance draw distribution, and batch planning."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from imweave.errors import DataError, PlanError
from imweave.fusion import FusedEmbedding
from imweave.grouping import (
    MatchedPair,
    generate_batch_groups,
    generate_union_groups,
    greedy_cluster_match,
    match_score,
    plan_batches,
    random_sample_iteration,
    read_groups,
    sampling_distribution,
    write_groups,
)


def _emb(pair_id, coords):
    return FusedEmbedding(
        id=str(pair_id), vector=np.atleast_1d(np.asarray(coords, float)), stage="reduced"
    )


def _pool_1d(values):
    return [_emb(i, [v]) for i, v in enumerate(values)]


# ---------------------------------------------------------------------------
# Reference trace of the greedy matching pseudocode (kept independent of the
# implementation under test).


def reference_greedy_match(c1, c2):
    c1 = sorted((set(c) for c in c1), key=len, reverse=True)
    c2 = sorted((set(c) for c in c2), key=len, reverse=True)
    matched_pairs = []
    num_samples = 0
    while c1 and c2:
        if len(c1[0]) >= len(c2[0]):
            larger = c1.pop(0)
            smaller_list = c2
        else:
            larger = c2.pop(0)
            smaller_list = c1
        best_match = None
        best_score = -1.0
        for i, cluster in enumerate(smaller_list):
            overlap = len(larger & cluster)
            avg_size = (len(larger) + len(cluster)) / 2
            score = overlap / avg_size
            if score > best_score:
                best_score = score
                best_match = (i, cluster)
        if best_match is not None:
            best_index, best_cluster = best_match
            union = larger | best_cluster
            matched_pairs.append(frozenset(union))
            num_samples += len(union)
            smaller_list.pop(best_index)
    return matched_pairs, num_samples


def random_cluster_lists(rng, universe_size=30, max_clusters=10, max_size=8):
    universe = [f"u{i}" for i in range(universe_size)]

    def one_list():
        count = int(rng.integers(0, max_clusters + 1))
        clusters = []
        for _ in range(count):
            size = int(rng.integers(1, max_size + 1))
            clusters.append(frozenset(rng.choice(universe, size=size, replace=False)))
        return clusters

    return one_list(), one_list()


class TestMatchScore:
    def test_identical_sets(self):
        assert match_score({"a", "b"}, {"a", "b"}) == 1.0

    def test_disjoint_sets(self):
        assert match_score({"a"}, {"b", "c"}) == 0.0

    def test_hand_evaluated(self):
        assert match_score({"1", "2", "3"}, {"2", "3", "4"}) == pytest.approx(2 / 3)

    def test_empty_set_rejected(self):
        with pytest.raises(DataError):
            match_score(set(), {"a"})

    def test_symmetry_on_random_pairs(self):
        rng = np.random.default_rng(2)
        universe = [f"u{i}" for i in range(20)]
        for _ in range(50):
            a = set(rng.choice(universe, size=int(rng.integers(1, 10)), replace=False))
            b = set(rng.choice(universe, size=int(rng.integers(1, 10)), replace=False))
            assert match_score(a, b) == match_score(b, a)


class TestGreedyClusterMatch:
    def test_hand_trace(self):
        pairs, total = greedy_cluster_match(
            [{"1", "2", "3"}, {"7", "8"}], [{"2", "3", "4"}, {"8", "9"}]
        )
        assert [set(p.union_ids) for p in pairs] == [
            {"1", "2", "3", "4"},
            {"7", "8", "9"},
        ]
        assert total == 7
        assert pairs[0].score == pytest.approx(2 / 3)
        assert pairs[0].source_sizes == (3, 3)

    def test_empty_opposite_list(self):
        assert greedy_cluster_match([{"1", "2"}], []) == ([], 0)

    def test_identical_lists(self):
        clusters = [{"a", "b", "c"}, {"d", "e"}]
        pairs, total = greedy_cluster_match(clusters, clusters)
        assert [set(p.union_ids) for p in pairs] == [{"a", "b", "c"}, {"d", "e"}]
        assert total == 5
        assert all(p.score == 1.0 for p in pairs)

    def test_matches_reference_trace_on_random_instances(self):
        rng = np.random.default_rng(17)
        for _ in range(100):
            c1, c2 = random_cluster_lists(rng)
            got_pairs, got_total = greedy_cluster_match(c1, c2)
            want_pairs, want_total = reference_greedy_match(c1, c2)
            assert [frozenset(p.union_ids) for p in got_pairs] == want_pairs
            assert got_total == want_total

    def test_emission_count_and_total_invariant(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            c1, c2 = random_cluster_lists(rng)
            pairs, total = greedy_cluster_match(c1, c2)
            assert len(pairs) == min(len(c1), len(c2))
            assert total == sum(len(p.union_ids) for p in pairs)

    def test_score_recomputable_from_source_sizes(self):
        pairs, _ = greedy_cluster_match(
            [{"1", "2", "3", "4"}], [{"3", "4", "5"}]
        )
        pair = pairs[0]
        overlap = sum(pair.source_sizes) - len(pair.union_ids)
        assert pair.score == pytest.approx(overlap / (sum(pair.source_sizes) / 2))


class TestSamplingDistribution:
    def test_hand_fixture_k1(self):
        probs = sampling_distribution(
            _pool_1d([1.0, 3.0]), [_emb("s", [0.0])], k=1, epsilon=1e-12
        )
        assert probs == pytest.approx([0.75, 0.25], abs=1e-9)

    def test_equidistant_candidates_equal_probability(self):
        selected = [_emb("s", [0.0, 0.0])]
        candidates = [_emb("a", [1.0, 0.0]), _emb("b", [0.0, 1.0]), _emb("c", [-1.0, 0.0])]
        probs = sampling_distribution(candidates, selected, k=5, epsilon=1e-9)
        assert probs == pytest.approx([1 / 3] * 3, abs=1e-12)

    def test_high_power_concentrates_on_nearest(self):
        probs = sampling_distribution(
            _pool_1d([1.0, 3.0]), [_emb("s", [0.0])], k=12, epsilon=1e-12
        )
        assert probs[0] > 0.999998

    def test_empty_candidates_rejected(self):
        with pytest.raises(DataError):
            sampling_distribution([], [_emb("s", [0.0])], k=1, epsilon=1e-9)

    def test_overlap_with_selected_rejected(self):
        point = _emb("x", [0.0])
        with pytest.raises(DataError):
            sampling_distribution([point], [point], k=1, epsilon=1e-9)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(4)
        candidates = [_emb(f"c{i}", rng.normal(size=3)) for i in range(10)]
        selected = [_emb(f"s{i}", rng.normal(size=3)) for i in range(3)]
        probs = sampling_distribution(candidates, selected, k=6, epsilon=1e-8)
        assert float(probs.sum()) == pytest.approx(1.0, abs=1e-12)

    def test_scale_invariance_in_epsilon_limit(self):
        # with epsilon ~ 0, scaling all coordinates by a constant leaves the
        # normalized distribution unchanged for a fixed power
        rng = np.random.default_rng(5)
        base = rng.uniform(0.5, 2.0, size=(6, 2))
        candidates = [_emb(f"c{i}", v) for i, v in enumerate(base[:4])]
        selected = [_emb(f"s{i}", v) for i, v in enumerate(base[4:])]
        for lam in (0.5, 7.3):
            scaled_c = [_emb(e.id, e.vector * lam) for e in candidates]
            scaled_s = [_emb(e.id, e.vector * lam) for e in selected]
            probs = sampling_distribution(candidates, selected, k=6, epsilon=1e-300)
            scaled = sampling_distribution(scaled_c, scaled_s, k=6, epsilon=1e-300)
            assert scaled == pytest.approx(probs, abs=1e-12)


class TestRandomSampleIteration:
    def test_pool_of_exactly_n_selects_all(self):
        pool = _pool_1d([0.0, 5.0, 9.0])
        group = random_sample_iteration(pool, 3, k=2, epsilon=1e-8, seed=1)
        assert sorted(group.member_ids) == ["0", "1", "2"]

    def test_deterministic_across_repeated_runs(self):
        pool = _pool_1d([0.0, 1.0, 2.0, 10.0, 11.0, 12.0])
        first = random_sample_iteration(pool, 4, k=3, epsilon=1e-8, seed=99)
        for _ in range(100):
            again = random_sample_iteration(pool, 4, k=3, epsilon=1e-8, seed=99)
            assert again.member_ids == first.member_ids

    def test_no_duplicate_members(self):
        rng = np.random.default_rng(6)
        pool = [_emb(f"p{i}", rng.normal(size=2)) for i in range(12)]
        for seed in range(30):
            group = random_sample_iteration(pool, 5, k=4, epsilon=1e-8, seed=seed)
            assert len(set(group.member_ids)) == 5

    def test_oversized_group_rejected(self):
        with pytest.raises(DataError):
            random_sample_iteration(_pool_1d([0.0, 1.0]), 3, seed=0)

    def test_near_pair_monte_carlo(self):
        """With k=12 on pool {0, 1, 100, 101}, a first pick of 0 is followed
        by 1 essentially always."""
        pool = _pool_1d([0.0, 1.0, 100.0, 101.0])
        conditional = 0
        hits = 0
        for seed in range(10_000):
            group = random_sample_iteration(pool, 2, k=12, epsilon=1e-8, seed=seed)
            if group.member_ids[0] == "0":
                conditional += 1
                hits += group.member_ids[1] == "1"
        assert conditional > 2000
        assert hits / conditional >= 0.999

    def test_second_pick_frequencies_match_distribution(self):
        """Chi-square goodness of fit of the second pick, conditioned on each
        first pick, against exact probabilities computed independently."""
        angles = [i * math.pi / 3 for i in range(6)]
        coords = [(math.cos(a), math.sin(a)) for a in angles]
        pool = [_emb(f"h{i}", c) for i, c in enumerate(coords)]
        k, eps = 2, 1e-9
        counts: dict[tuple[str, str], int] = {}
        for seed in range(10_000):
            group = random_sample_iteration(pool, 2, k=k, epsilon=eps, seed=seed)
            key = (group.member_ids[0], group.member_ids[1])
            counts[key] = counts.get(key, 0) + 1
        for i, first in enumerate(coords):
            others = [(j, c) for j, c in enumerate(coords) if j != i]
            weights = [
                1.0 / (math.dist(c, first) ** k + eps) for _, c in others
            ]
            total_weight = sum(weights)
            probs = [w / total_weight for w in weights]
            observed = [counts.get((f"h{i}", f"h{j}"), 0) for j, _ in others]
            trials = sum(observed)
            assert trials > 1000
            expected = [p * trials for p in probs]
            result = stats.chisquare(observed, expected)
            assert result.pvalue > 0.01

    def test_farthest_variant_is_deterministic_argmax(self):
        pool = _pool_1d([0.0, 1.0, 100.0])
        outcomes = set()
        for seed in range(50):
            group = random_sample_iteration(
                pool, 2, k=3, epsilon=1e-8, seed=seed, variant="farthest"
            )
            outcomes.add(group.member_ids)
        # second member is always the farthest from the first
        for members in outcomes:
            first, second = members
            values = {"0": 0.0, "1": 1.0, "2": 100.0}
            rest = {m: abs(values[m] - values[first]) for m in values if m != first}
            assert second == max(rest, key=rest.get)


class TestPlanBatches:
    def test_default_scale_two_batches(self):
        plan = plan_batches(40_000)
        assert len(plan.batches) == 2
        assert plan.total_groups == 10_000
        assert all(b.conversations == 5_000 for b in plan.batches)

    def test_full_scale_corpus(self):
        plan = plan_batches(640_000)
        assert len(plan.batches) == 32
        assert plan.total_groups == 160_000

    def test_zero_conversations_is_empty_plan(self):
        plan = plan_batches(40_000, conversations_per_batch=0)
        assert plan.batches == ()
        assert plan.total_groups == 0

    def test_infeasible_plan_rejected(self):
        with pytest.raises(PlanError, match="infeasible"):
            plan_batches(10_000, images_per_batch=10_000, conversations_per_batch=3_000)

    def test_pool_smaller_than_batch_rejected(self):
        with pytest.raises(PlanError):
            plan_batches(100, images_per_batch=1_000, conversations_per_batch=10)

    def test_leftover_reported(self):
        plan = plan_batches(50, images_per_batch=20, conversations_per_batch=4)
        assert len(plan.batches) == 2
        assert plan.leftover == 10

    def test_with_replacement_skips_feasibility(self):
        plan = plan_batches(
            10_000,
            images_per_batch=10_000,
            conversations_per_batch=3_000,
            with_replacement=True,
        )
        assert plan.total_groups == 3_000


class TestBatchGroupGeneration:
    def _pool(self, n, seed=0):
        rng = np.random.default_rng(seed)
        return [_emb(f"p{i:03d}", rng.normal(size=2)) for i in range(n)]

    def test_without_replacement_groups_are_disjoint(self):
        pool = self._pool(40)
        plan = plan_batches(40, images_per_batch=20, conversations_per_batch=4)
        groups = generate_batch_groups(pool, plan, seed=5)
        assert len(groups) == 8
        for batch_index in (0, 1):
            members: list[str] = []
            for g in groups[batch_index * 4 : (batch_index + 1) * 4]:
                members.extend(g.member_ids)
            assert len(members) == len(set(members))

    def test_members_stay_within_their_batch(self):
        pool = self._pool(40)
        plan = plan_batches(40, images_per_batch=20, conversations_per_batch=4)
        groups = generate_batch_groups(pool, plan, seed=5)
        first_batch_ids = {e.id for e in pool[:20]}
        for g in groups[:4]:
            assert set(g.member_ids) <= first_batch_ids

    def test_budget_caps_group_sizes_at_minimum(self):
        # 5 groups of at least 4 from 20 images leaves no slack: every
        # group is forced to the minimum size
        pool = self._pool(20)
        plan = plan_batches(20, images_per_batch=20, conversations_per_batch=5)
        groups = generate_batch_groups(pool, plan, seed=3)
        assert [len(g.member_ids) for g in groups] == [4, 4, 4, 4, 4]

    def test_with_replacement_allows_larger_draws(self):
        pool = self._pool(20)
        plan = plan_batches(
            20, images_per_batch=20, conversations_per_batch=5, with_replacement=True
        )
        sizes = set()
        for seed in range(10):
            groups = generate_batch_groups(
                pool, plan, seed=seed, with_replacement=True
            )
            sizes.update(len(g.member_ids) for g in groups)
        assert sizes == {4, 5}

    def test_group_seed_reproduces_group_standalone(self):
        pool = self._pool(30)
        plan = plan_batches(30, images_per_batch=30, conversations_per_batch=3)
        groups = generate_batch_groups(pool, plan, seed=8)
        first = groups[0]
        replay = random_sample_iteration(
            pool, len(first.member_ids), first.k, first.epsilon, first.seed
        )
        assert replay.member_ids == first.member_ids


class TestUnionGroupGeneration:
    def test_small_unions_skipped(self):
        rng = np.random.default_rng(0)
        embeddings = [_emb(f"p{i}", rng.normal(size=2)) for i in range(12)]
        matches = [
            MatchedPair(
                union_ids=tuple(f"p{i}" for i in range(6)), score=0.5, source_sizes=(4, 4)
            ),
            MatchedPair(union_ids=("p6", "p7", "p8"), score=0.5, source_sizes=(2, 2)),
        ]
        groups = generate_union_groups(matches, embeddings, seed=1)
        assert len(groups) == 1
        assert groups[0].method == "gcma"
        assert set(groups[0].member_ids) <= set(matches[0].union_ids)
        assert 4 <= len(groups[0].member_ids) <= 5

    def test_union_with_unknown_id_rejected(self):
        matches = [MatchedPair(union_ids=("a", "b", "c", "d"), score=0.1, source_sizes=(2, 2))]
        with pytest.raises(DataError):
            generate_union_groups(matches, [_emb("a", [0.0])], seed=0)


def test_groups_file_round_trip(tmp_path):
    pool = _pool_1d([0.0, 1.0, 2.0, 3.0, 10.0])
    groups = [
        random_sample_iteration(pool, 3, k=2, epsilon=1e-8, seed=s, group_id=f"g{s}")
        for s in range(4)
    ]
    path = tmp_path / "groups.jsonl"
    write_groups(groups, path)
    assert read_groups(path) == groups
