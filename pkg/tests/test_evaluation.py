import numpy as np
import pytest

from irisseg import evaluation
from irisseg.data import Sample
from irisseg.errors import ConfigError, NoBoundaryFound, ShapeError
from irisseg.rng import Xoshiro256StarStar

from helpers import brute_force_iou

# Reference mean-IoU columns of the ten-split conventional-vs-learned
# comparison this harness reproduces (conventional first).
REFERENCE_CONVENTIONAL = [0.7793, 0.6002, 0.7786, 0.7533, 0.8715,
                          0.6203, 0.4823, 0.8032, 0.8078, 0.8621]
REFERENCE_LEARNED = [0.8587, 0.7657, 0.8681, 0.8427, 0.8853,
                     0.7986, 0.6794, 0.87, 0.8564, 0.8822]
REFERENCE_IMPROVEMENTS = [10.2, 27.6, 11.5, 11.9, 1.6, 28.7, 40.9, 8.3, 6.0, 2.3]
REFERENCE_AVERAGE = (0.7358, 0.8303, 12.8)


class TestPortableRng:
    def test_frozen_stream(self):
        gen = Xoshiro256StarStar(0)
        assert [gen.next_u64() for _ in range(3)] == [
            11091344671253066420, 13793997310169335082, 1900383378846508768]

    def test_frozen_bounded_draws(self):
        gen = Xoshiro256StarStar(0)
        assert [gen.randbelow(10) for _ in range(12)] == [6, 7, 1, 4, 7, 9, 4, 5, 8, 9, 1, 0]

    def test_frozen_shuffle(self):
        seq = list(range(8))
        Xoshiro256StarStar(7).shuffle(seq)
        assert seq == [6, 0, 2, 3, 4, 7, 1, 5]

    def test_randbelow_range(self):
        gen = Xoshiro256StarStar(5)
        draws = [gen.randbelow(7) for _ in range(2000)]
        assert min(draws) == 0 and max(draws) == 6


class TestIoU:
    def test_identical_nonempty(self, rng):
        m = rng.random((8, 8)) > 0.5
        assert evaluation.iou(m, m) == 1.0

    def test_disjoint_nonempty(self):
        a = np.zeros((4, 4), bool)
        b = np.zeros((4, 4), bool)
        a[0, 0] = True
        b[3, 3] = True
        assert evaluation.iou(a, b) == 0.0

    def test_partial_overlap_exact_fraction(self):
        truth = np.zeros((8, 8), bool)
        truth[2:6, 2:6] = True  # 16 pixels
        pred = np.zeros((8, 8), bool)
        pred[2:6, 2:4] = True   # 8 inside
        pred[0, :8] = True      # 8 outside
        assert evaluation.iou(pred, truth) == pytest.approx(1.0 / 3.0, abs=0)
        assert evaluation.iou(pred, truth) == 8 / 24

    def test_both_empty_is_one(self):
        empty = np.zeros((5, 5), bool)
        assert evaluation.iou(empty, empty) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            evaluation.iou(np.zeros((4, 4), bool), np.zeros((4, 5), bool))

    def test_matches_brute_force_on_random_pairs(self, rng):
        for _ in range(200):
            a = rng.random((8, 8)) > rng.random()
            b = rng.random((8, 8)) > rng.random()
            assert evaluation.iou(a, b) == brute_force_iou(a, b)
            assert evaluation.iou(a, b) == evaluation.iou(b, a)

    def test_one_only_for_identical(self, rng):
        for _ in range(100):
            a = rng.random((6, 6)) > 0.5
            b = rng.random((6, 6)) > 0.5
            if (a | b).any():
                assert (evaluation.iou(a, b) == 1.0) == np.array_equal(a, b)


class TestMakeSplits:
    SUBJECTS = [f"S{i:02d}" for i in range(1, 18)]

    def test_fourteen_three_shape(self):
        plan = evaluation.make_splits(self.SUBJECTS, n_splits=10, n_test=3, seed=4)
        assert len(plan.splits) == 10
        for train, test in plan.splits:
            assert len(train) == 14 and len(test) == 3
            assert not set(train) & set(test)
            assert set(train) | set(test) == set(self.SUBJECTS)

    def test_single_split_minimum_pool(self):
        plan = evaluation.make_splits(["a", "b", "c", "d"], n_splits=1, n_test=3, seed=0)
        train, test = plan.splits[0]
        assert len(train) == 1 and len(test) == 3
        assert not set(train) & set(test)

    def test_same_seed_identical(self):
        a = evaluation.make_splits(self.SUBJECTS, seed=123)
        b = evaluation.make_splits(self.SUBJECTS, seed=123)
        assert a.splits == b.splits

    def test_different_seeds_differ(self):
        plans = {tuple(tuple(te) for _, te in evaluation.make_splits(self.SUBJECTS, seed=s).splits)
                 for s in range(100)}
        assert len(plans) == 100

    def test_too_few_subjects(self):
        with pytest.raises(ConfigError):
            evaluation.make_splits(["a", "b", "c"], n_test=3, seed=0)

    def test_dict_round_trip(self):
        plan = evaluation.make_splits(self.SUBJECTS, seed=5)
        again = evaluation.SplitPlan.from_dict(plan.to_dict())
        assert again.splits == plan.splits and again.seed == plan.seed


def make_sample(i):
    return Sample(np.zeros((6, 6), np.uint8), f"S{i}", 1.0, "NIR", f"img{i}")


class TestEvaluate:
    def test_oracle_segmenter_scores_one(self, rng):
        truths = [rng.random((6, 6)) > 0.5 for _ in range(3)]
        samples = [(make_sample(i), t) for i, t in enumerate(truths)]
        lookup = iter(truths)
        result = evaluation.evaluate(lambda img: next(lookup), samples)
        assert result.mean_iou == 1.0

    def test_empty_predictor_scores_zero(self):
        truth = np.ones((6, 6), bool)
        samples = [(make_sample(i), truth) for i in range(3)]
        result = evaluation.evaluate(lambda img: np.zeros((6, 6), bool), samples)
        assert result.mean_iou == 0.0

    def test_mean_of_fixture_values(self):
        # masks engineered to give IoU 0.6, 0.8, 1.0
        truth = np.zeros((6, 6), bool)
        truth[0, :4] = True
        preds = []
        p = truth.copy(); p[0, 0] = False; p[5, 5] = True  # 3/5
        preds.append(p)
        p = truth.copy(); p[5, 5] = True                   # 4/5
        preds.append(p)
        preds.append(truth.copy())                         # 1
        samples = [(make_sample(i), truth) for i in range(3)]
        lookup = iter(preds)
        result = evaluation.evaluate(lambda img: next(lookup), samples)
        assert abs(result.mean_iou - 0.8) < 1e-9
        assert [round(v, 3) for _, v in result.per_image] == [0.6, 0.8, 1.0]

    def test_boundary_failure_scores_zero(self):
        truth = np.ones((6, 6), bool)

        def failing(img):
            raise NoBoundaryFound("nothing")

        result = evaluation.evaluate(failing, [(make_sample(0), truth)])
        assert result.per_image[0][1] == 0.0

    def test_empty_sample_list_rejected(self):
        with pytest.raises(ConfigError):
            evaluation.evaluate(lambda img: img, [])


class TestCompare:
    def test_reference_columns_reproduce_improvements(self):
        rows = evaluation.compare(REFERENCE_CONVENTIONAL, REFERENCE_LEARNED)
        assert len(rows) == 11
        for row, expected in zip(rows[:10], REFERENCE_IMPROVEMENTS):
            assert round(row.improvement_pct, 1) == expected

    def test_average_row_uses_column_means(self):
        rows = evaluation.compare([0.4, 0.6], [0.8, 0.6])
        avg = rows[-1]
        assert avg.label == "average"
        assert avg.mean_iou_a == pytest.approx(0.5)
        assert avg.mean_iou_b == pytest.approx(0.7)
        # means first, then the ratio: 100*(0.7-0.5)/0.5, not mean(100%, 0%)
        assert avg.improvement_pct == pytest.approx(40.0)

    def test_reference_average_row_improvement(self):
        a, b, expected = REFERENCE_AVERAGE
        assert round(evaluation.improvement_pct(a, b), 1) == expected

    def test_equal_columns_zero_improvement(self):
        rows = evaluation.compare([0.5, 0.6], [0.5, 0.6])
        assert all(row.improvement_pct == 0.0 for row in rows)

    def test_zero_reference_flagged_undefined(self):
        rows = evaluation.compare([0.0], [0.5])
        assert rows[0].improvement_pct is None

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            evaluation.compare([0.1], [0.1, 0.2])


class TestBoxplotStats:
    def test_constant_list(self):
        stats = evaluation.boxplot_stats([2.5] * 6)
        assert stats.median == stats.q1 == stats.q3 == 2.5
        assert stats.iqr == 0.0
        assert stats.outliers == []

    def test_one_to_eight_interpolated_quartiles(self):
        stats = evaluation.boxplot_stats(list(range(1, 9)))
        assert stats.median == pytest.approx(4.5)
        assert stats.q1 == pytest.approx(2.75)
        assert stats.q3 == pytest.approx(6.25)
        assert stats.iqr == pytest.approx(3.5)
        assert stats.whisker_low == 1.0   # max(min, q1 - 1.5*iqr) = max(1, -2.5)
        assert stats.whisker_high == 8.0  # min(max, q3 + 1.5*iqr) = min(8, 11.5)

    def test_appended_outlier_flagged(self):
        stats = evaluation.boxplot_stats(list(range(1, 9)) + [100])
        assert 100.0 in stats.outliers
        assert stats.whisker_high < 100.0

    def test_partition_is_lossless(self, rng):
        for _ in range(50):
            values = rng.normal(size=rng.integers(1, 30)).tolist()
            stats = evaluation.boxplot_stats(values)
            fence_low = stats.q1 - 1.5 * stats.iqr
            fence_high = stats.q3 + 1.5 * stats.iqr
            inside = [v for v in values if fence_low <= v <= fence_high]
            assert sorted(inside + stats.outliers) == pytest.approx(sorted(values))

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            evaluation.boxplot_stats([])
