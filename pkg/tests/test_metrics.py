"""Analysis metrics: per-token head maxima, dominance ratio, coverage,
composite object scores, overhead, and the sweep quantile proxy."""

import numpy as np
import pytest

from attnreg.attention import AttentionMap
from attnreg.metrics import (
    BackendError,
    FixtureBackend,
    ScoreBackend,
    attn_quantile_profile,
    composite_score,
    dominance_index,
    head_max_stats,
    mean_head_max_stats,
    object_score,
    overhead,
    target_coverage,
)
from attnreg.recording import RunRecord


def make_record(steps=2):
    return RunRecord(
        model_seed=0,
        run_seed=1,
        prompt_ids=(1, 4, 2),
        targets=(1,),
        regulator="none",
        steps=steps,
        layer_order=("d0", "u0"),
        config_echo={},
    )


def column_map(columns, heads=1, w=2):
    """Constant-row map: every spatial row is `columns` (must sum to 1)."""
    row = np.asarray(columns, dtype=np.float64)
    values = np.tile(row, (heads, w * w, 1))
    return AttentionMap(values=values, w=w)


class TestHeadMaxStats:
    def test_single_head_gives_singleton_lists(self):
        record = make_record()
        record.note_attention(0, "d0", column_map([0.6, 0.3, 0.1]))
        stats = head_max_stats(record, "d0", 0)
        assert stats == [[0.6], [0.3], [0.1]]

    def test_per_head_layout(self):
        values = np.array(
            [
                [[0.7, 0.3], [0.6, 0.4], [0.5, 0.5], [0.8, 0.2]],
                [[0.1, 0.9], [0.2, 0.8], [0.3, 0.7], [0.25, 0.75]],
            ]
        )
        record = make_record()
        record.note_attention(1, "u0", AttentionMap(values=values, w=2))
        assert head_max_stats(record, "u0", 1) == [[0.8, 0.3], [0.5, 0.9]]

    def test_missing_key_raises(self):
        with pytest.raises(ValueError, match="no stats recorded"):
            head_max_stats(make_record(), "d0", 0)


class TestMeanHeadMaxStats:
    def test_window_average(self):
        record = make_record()
        record.note_attention(0, "d0", column_map([0.6, 0.4]))
        record.note_attention(1, "d0", column_map([0.8, 0.2]))
        stats = mean_head_max_stats(record, "d0", [0, 1])
        np.testing.assert_allclose(stats, [[0.7], [0.3]], atol=1e-15)

    def test_single_step_window_matches_head_max_stats(self):
        record = make_record()
        record.note_attention(0, "d0", column_map([0.6, 0.4], heads=2))
        assert mean_head_max_stats(record, "d0", [0]) == head_max_stats(record, "d0", 0)

    def test_empty_window_raises(self):
        with pytest.raises(ValueError, match="empty step window"):
            mean_head_max_stats(make_record(), "d0", [])

    def test_missing_step_raises(self):
        record = make_record()
        record.note_attention(0, "d0", column_map([0.6, 0.4]))
        with pytest.raises(ValueError, match="step 1"):
            mean_head_max_stats(record, "d0", [0, 1])


class TestDominanceIndex:
    def test_balanced_targets_give_one(self):
        stats = [[0.5], [0.3], [0.3], [0.1]]
        assert dominance_index(stats, (1, 2)) == 1.0

    def test_hand_ratio(self):
        # levels 0.8 and 0.2: max 0.8 over mean 0.5
        stats = [[0.9], [0.8], [0.2]]
        assert dominance_index(stats, (1, 2)) == pytest.approx(1.6, rel=1e-12)

    def test_head_mean_before_ratio(self):
        stats = [[0.0], [0.6, 1.0], [0.2, 0.2]]
        # head means 0.8 and 0.2, same ratio as the scalar case
        assert dominance_index(stats, (1, 2)) == pytest.approx(1.6, rel=1e-12)

    def test_at_least_one(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            stats = rng.uniform(0.01, 1.0, size=(6, 2)).tolist()
            assert dominance_index(stats, (1, 2, 3)) >= 1.0

    def test_needs_two_targets(self):
        with pytest.raises(ValueError, match="at least 2"):
            dominance_index([[0.5], [0.5]], (1,))

    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="outside recorded tokens"):
            dominance_index([[0.5], [0.5]], (0, 5))

    def test_all_zero_levels_raise(self):
        with pytest.raises(ValueError, match="all zero"):
            dominance_index([[0.0], [0.0]], (0, 1))


class TestTargetCoverage:
    def test_covered_and_uncovered(self):
        maps = {"d0": column_map([0.6, 0.4])}
        assert target_coverage(maps, (0,)) == 1.0
        assert target_coverage(maps, (1,)) == 0.0
        assert target_coverage(maps, (0, 1)) == 0.5

    def test_best_over_layers(self):
        maps = {"d0": column_map([0.6, 0.4]), "u0": column_map([0.3, 0.7])}
        assert target_coverage(maps, (0, 1)) == 1.0

    def test_threshold_is_inclusive(self):
        maps = {"d0": column_map([0.5, 0.5])}
        assert target_coverage(maps, (0, 1), threshold=0.5) == 1.0

    def test_custom_threshold(self):
        maps = {"d0": column_map([0.6, 0.4])}
        assert target_coverage(maps, (0, 1), threshold=0.35) == 1.0

    @pytest.mark.parametrize("threshold", [0.0, 1.0, -0.2, 1.5])
    def test_threshold_validation(self, threshold):
        with pytest.raises(ValueError, match="threshold"):
            target_coverage({"d0": column_map([0.6, 0.4])}, (0,), threshold)

    def test_empty_targets_raise(self):
        with pytest.raises(ValueError, match="empty target set"):
            target_coverage({"d0": column_map([0.6, 0.4])}, ())

    def test_no_maps_raise(self):
        with pytest.raises(ValueError, match="no attention maps"):
            target_coverage({}, (0,))

    def test_target_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            target_coverage({"d0": column_map([0.6, 0.4])}, (7,))

    def test_regulated_not_below_unregulated(self, baseline_run, regulated_run):
        # the toy denoiser spreads mass widely, so both sides usually sit at
        # 0.0 against the 0.5 threshold; the ordering must still hold
        probes = ("d2", "u0")
        base = target_coverage(
            {lid: baseline_run.final_maps[lid] for lid in probes}, (1, 2)
        )
        reg = target_coverage(
            {lid: regulated_run.final_maps[lid] for lid in probes}, (1, 2)
        )
        assert reg >= base


BOX = (0.0, 0.0, 1.0, 1.0)


class TestObjectScore:
    def test_max_over_boxes(self):
        backend = FixtureBackend({"cat": [(BOX, 0.3), (BOX, 0.9), (BOX, 0.5)]})
        assert object_score(None, "cat", backend) == 0.9

    def test_no_boxes_scores_zero(self):
        backend = FixtureBackend({"cat": []})
        assert object_score(None, "cat", backend) == 0.0
        assert object_score(None, "unknown", backend) == 0.0

    @pytest.mark.parametrize("sim", [1.5, -0.1, float("nan")])
    def test_invalid_similarity_raises(self, sim):
        backend = FixtureBackend({"cat": [(BOX, sim)]})
        with pytest.raises(ValueError, match="outside"):
            object_score(None, "cat", backend)

    def test_backend_failure_is_distinct_from_zero(self):
        backend = FixtureBackend({"cat": [(BOX, 0.9)]}, fail_on=frozenset({"cat"}))
        with pytest.raises(BackendError, match="cannot locate 'cat'"):
            object_score(None, "cat", backend)

    def test_fixture_backend_satisfies_protocol(self):
        assert isinstance(FixtureBackend({}), ScoreBackend)


class TestCompositeScore:
    def test_min_of_per_object_max(self):
        backend = FixtureBackend(
            {"cat": [(BOX, 0.8)], "dog": [(BOX, 0.6)], "tree": [(BOX, 0.95)]}
        )
        assert composite_score(None, ("cat", "dog", "tree"), backend) == 0.6

    def test_missing_object_forces_zero(self):
        backend = FixtureBackend({"cat": [(BOX, 0.8)], "dog": []})
        assert composite_score(None, ("cat", "dog"), backend) == 0.0

    def test_single_object_equals_object_score(self):
        backend = FixtureBackend({"cat": [(BOX, 0.3), (BOX, 0.7)]})
        assert composite_score(None, ("cat",), backend) == object_score(
            None, "cat", backend
        )

    def test_raising_one_similarity_never_lowers(self):
        low = FixtureBackend({"cat": [(BOX, 0.4)], "dog": [(BOX, 0.6)]})
        high = FixtureBackend({"cat": [(BOX, 0.9)], "dog": [(BOX, 0.6)]})
        assert composite_score(None, ("cat", "dog"), high) >= composite_score(
            None, ("cat", "dog"), low
        )

    def test_empty_object_list_raises(self):
        with pytest.raises(ValueError, match="at least one object"):
            composite_score(None, (), FixtureBackend({}))

    def test_backend_failure_propagates(self):
        backend = FixtureBackend({"cat": [(BOX, 0.9)]}, fail_on=frozenset({"dog"}))
        with pytest.raises(BackendError):
            composite_score(None, ("cat", "dog"), backend)


class TestOverhead:
    def test_no_overhead(self):
        assert overhead(1.0, 1.0) == 0.0

    def test_hand_ratio(self):
        assert overhead(1.488, 1.0) == pytest.approx(0.488, rel=1e-12)

    def test_scale_invariant(self):
        assert overhead(3.0, 2.0) == pytest.approx(overhead(1.5, 1.0), rel=1e-12)

    @pytest.mark.parametrize("t_base", [0.0, -1.0])
    def test_bad_baseline_raises(self, t_base):
        with pytest.raises(ValueError, match="baseline time"):
            overhead(1.0, t_base)


class TestAttnQuantileProfile:
    def seeded_record(self):
        record = make_record(steps=2)
        record.q90[(0, "d0")] = np.array([0.1, 0.2, 0.3])
        record.q90[(1, "d0")] = np.array([0.3, 0.4, 0.5])
        record.q90[(0, "u0")] = np.array([0.2, 0.2, 0.2])
        record.q90[(1, "u0")] = np.array([0.2, 0.2, 0.2])
        return record

    def test_hand_mean_single_layer(self):
        record = self.seeded_record()
        got = attn_quantile_profile(record, ("d0",), (0, 2))
        assert got == pytest.approx((0.1 + 0.3 + 0.3 + 0.5) / 4, rel=1e-12)

    def test_hand_mean_two_layers(self):
        record = self.seeded_record()
        got = attn_quantile_profile(record, ("d0", "u0"), (1,))
        assert got == pytest.approx((0.2 + 0.2 + 0.4 + 0.2) / 4, rel=1e-12)

    def test_empty_inputs_raise(self):
        record = self.seeded_record()
        with pytest.raises(ValueError, match="at least one probe"):
            attn_quantile_profile(record, (), (0,))
        with pytest.raises(ValueError, match="at least one probe"):
            attn_quantile_profile(record, ("d0",), ())

    def test_missing_step_raises(self):
        record = self.seeded_record()
        del record.q90[(1, "d0")]
        with pytest.raises(ValueError, match="layer 'd0' step 1"):
            attn_quantile_profile(record, ("d0",), (0,))
