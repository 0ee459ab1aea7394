import unittest

import numpy as np
import pandas as pd
from hypothesis import given, settings, strategies as st

from class_similarity import (
    ClassSet,
    ConfusionCounts,
    LabeledFeatureSet,
    PredictionMode,
    PredictionTable,
    SimilarityMatrix,
    Split,
    class_sim,
    count_misclass,
    count_misclass_multi,
    count_misclass_ovr,
    count_misclass_pairwise,
    count_misclass_pairwise_all,
    merge_candidates,
    mean_similarity,
    ranking,
    similarity_matrix,
    stratified_splits,
    top_k,
)
from report_generation import format_entry, format_score
from utils import DataValidationError


def make_set(labels, classes=None, ids=None, split=Split.TEST):
    classes = classes or ClassSet.from_labels(labels)
    ids = ids or [f"s{k}" for k in range(len(labels))]
    features = np.arange(len(labels), dtype=float).reshape(-1, 1)
    return LabeledFeatureSet(classes, tuple(ids), tuple(labels), features, (split,) * len(labels))


def ovr_table(eval_set, columns):
    frame = pd.DataFrame(columns, index=list(eval_set.ids))
    return PredictionTable(PredictionMode.OVR, eval_set.classes, frame)


def pairwise_table(eval_set, pair, scores):
    frame = pd.DataFrame(np.asarray(scores, dtype=float).reshape(-1, 1), index=list(eval_set.ids),
                         columns=pd.MultiIndex.from_tuples([pair]))
    return PredictionTable(PredictionMode.PAIRWISE, eval_set.classes, frame)


def multi_table(eval_set, vectors):
    frame = pd.DataFrame(vectors, index=list(eval_set.ids), columns=list(eval_set.classes))
    return PredictionTable(PredictionMode.MULTI, eval_set.classes, frame)


def counts_from(matrix, totals, labels=("a", "b")):
    return ConfusionCounts(ClassSet(tuple(labels)), PredictionMode.OVR, np.array(matrix), np.array(totals))


@st.composite
def count_tables(draw):
    """随机的合法计数表: 0 <= N_{c_j|c_i} <= N_{c_i}"""
    size = draw(st.integers(min_value=2, max_value=6))
    totals = draw(st.lists(st.integers(min_value=1, max_value=50), min_size=size, max_size=size))
    matrix = np.zeros((size, size), dtype=np.int64)
    for i in range(size):
        for j in range(size):
            if i != j:
                matrix[i, j] = draw(st.integers(min_value=0, max_value=totals[i]))
    labels = tuple(f"c{k}" for k in range(size))
    return ConfusionCounts(ClassSet(labels), PredictionMode.OVR, matrix, np.array(totals))


class TestClassSet(unittest.TestCase):
    def test_canonical_order(self):
        """类别按UTF-8字节序排列"""
        classes = ClassSet(("beach", "Bay", "city", "bay"))
        self.assertEqual(classes.labels, ("Bay", "bay", "beach", "city"))
        self.assertEqual(classes.index("beach"), 2)

    def test_duplicate_and_empty_labels(self):
        with self.assertRaises(DataValidationError):
            ClassSet(("a", "b", "a"))
        with self.assertRaises(DataValidationError):
            ClassSet(("a", ""))

    def test_pairs_need_two_classes(self):
        with self.assertRaises(DataValidationError):
            ClassSet(("a",)).require_pairs()
        self.assertEqual(ClassSet(("c", "a", "b")).pairs(), [("a", "b"), ("a", "c"), ("b", "c")])


class TestCounting(unittest.TestCase):
    def test_ovr_strict_threshold(self):
        """OVR计数: 分数严格大于0.5才计入,恰好0.5不计入"""
        eval_set = make_set(["a", "a", "a", "a", "b"])
        preds = ovr_table(eval_set, {"a": [0.9, 0.9, 0.9, 0.9, 0.1],
                                     "b": [0.7, 0.4, 0.51, 0.5, 0.8]})
        counts = count_misclass_ovr(eval_set, preds)
        self.assertEqual(counts.n("a", "b"), 2)
        self.assertEqual(counts.n("b", "a"), 0)
        self.assertEqual(counts.total("a"), 4)
        self.assertEqual(counts.total("b"), 1)

    def test_ovr_all_zero(self):
        eval_set = make_set(["a", "b", "c"])
        preds = ovr_table(eval_set, {label: [0.0] * 3 for label in "abc"})
        counts = count_misclass_ovr(eval_set, preds)
        self.assertEqual(int(counts.matrix.sum()), 0)

    def test_ovr_missing_score_names_pair(self):
        """缺少分数时报错信息包含样本和目标"""
        eval_set = make_set(["a", "b"])
        preds = ovr_table(eval_set, {"a": [0.9, np.nan], "b": [0.1, 0.8]})
        with self.assertRaisesRegex(DataValidationError, "s1"):
            count_misclass_ovr(eval_set, preds)

    def test_empty_class_is_error(self):
        classes = ClassSet(("a", "b", "c"))
        eval_set = make_set(["a", "b"], classes=classes)
        preds = ovr_table(eval_set, {label: [0.0, 0.0] for label in "abc"})
        with self.assertRaises(DataValidationError):
            count_misclass_ovr(eval_set, preds)

    def test_multi_argmax_and_ties(self):
        """multi计数: argmax,并列时取字典序靠前的类别"""
        eval_set = make_set(["a", "b", "c"])
        preds = multi_table(eval_set, [[0.2, 0.5, 0.3],
                                       [0.5, 0.5, 0.0],
                                       [0.0, 0.0, 1.0]])
        counts = count_misclass_multi(eval_set, preds)
        self.assertEqual(counts.n("a", "b"), 1)
        self.assertEqual(counts.n("b", "a"), 1)
        self.assertEqual(counts.predicted_row("c"), {"a": 0, "b": 0, "c": 1})

    def test_multi_identity_confusion(self):
        eval_set = make_set(["a", "b", "c", "a"])
        preds = multi_table(eval_set, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
                                       [0.0, 0.0, 1.0], [0.8, 0.1, 0.1]])
        counts = count_misclass_multi(eval_set, preds)
        off = counts.matrix - np.diag(np.diag(counts.matrix))
        self.assertEqual(int(off.sum()), 0)

    def test_multi_vector_must_sum_to_one(self):
        eval_set = make_set(["a", "b"])
        with self.assertRaises(DataValidationError):
            multi_table(eval_set, [[0.6, 0.6], [0.5, 0.5]])

    def test_pairwise_examples(self):
        """成对计数: c_i样本 s>0.5 计入,c_j样本 s<=0.5 计入"""
        eval_set = make_set(["a", "a", "b", "b"])
        preds = pairwise_table(eval_set, ("a", "b"), [0.9, 0.1, 0.6, 0.4])
        self.assertEqual(count_misclass_pairwise(eval_set, preds, ("a", "b")), (1, 1))
        perfect = pairwise_table(eval_set, ("a", "b"), [0.0, 0.0, 1.0, 1.0])
        self.assertEqual(count_misclass_pairwise(eval_set, perfect, ("a", "b")), (0, 0))
        inverted = pairwise_table(eval_set, ("a", "b"), [1.0, 1.0, 0.0, 0.0])
        self.assertEqual(count_misclass_pairwise(eval_set, inverted, ("a", "b")), (2, 2))

    def test_pairwise_boundary_goes_to_first_class(self):
        """恰好0.5的分数判给c_i"""
        eval_set = make_set(["a", "b"])
        preds = pairwise_table(eval_set, ("a", "b"), [0.5, 0.5])
        self.assertEqual(count_misclass_pairwise(eval_set, preds, ("a", "b")), (0, 1))

    def test_pairwise_reverse_orientation(self):
        eval_set = make_set(["a", "a", "b", "b"])
        preds = pairwise_table(eval_set, ("a", "b"), [0.9, 0.1, 0.6, 0.4])
        self.assertEqual(count_misclass_pairwise(eval_set, preds, ("b", "a")), (1, 1))

    def test_pairwise_same_class_is_error(self):
        eval_set = make_set(["a", "b"])
        preds = pairwise_table(eval_set, ("a", "b"), [0.1, 0.9])
        with self.assertRaises(DataValidationError):
            count_misclass_pairwise(eval_set, preds, ("a", "a"))

    def test_pairwise_all_is_independent_of_workers(self):
        labels = ["a", "b", "c"] * 4
        eval_set = make_set(labels)
        rng = np.random.default_rng(7)
        pairs = eval_set.classes.pairs()
        frame = pd.DataFrame(rng.random((len(labels), len(pairs))), index=list(eval_set.ids),
                             columns=pd.MultiIndex.from_tuples(pairs))
        preds = PredictionTable(PredictionMode.PAIRWISE, eval_set.classes, frame)
        one = count_misclass_pairwise_all(eval_set, preds, max_workers=1)
        many = count_misclass_pairwise_all(eval_set, preds, max_workers=8)
        np.testing.assert_array_equal(one.matrix, many.matrix)
        np.testing.assert_array_equal(count_misclass(eval_set, preds).matrix, one.matrix)

    def test_score_out_of_range(self):
        eval_set = make_set(["a", "b"])
        with self.assertRaises(DataValidationError):
            ovr_table(eval_set, {"a": [1.2, 0.0], "b": [0.0, 1.0]})


class TestClassSim(unittest.TestCase):
    def test_examples(self):
        """ClassSim的直接算例"""
        self.assertAlmostEqual(class_sim(counts_from([[0, 2], [4, 0]], [10, 20]), "a", "b"), 0.2)
        self.assertEqual(class_sim(counts_from([[0, 0], [0, 0]], [10, 20]), "a", "b"), 0.0)
        self.assertEqual(class_sim(counts_from([[0, 10], [20, 0]], [10, 20]), "a", "b"), 1.0)

    def test_counts_cannot_exceed_totals(self):
        with self.assertRaises(DataValidationError):
            counts_from([[0, 11], [0, 0]], [10, 20])

    def test_matrix_two_classes(self):
        matrix = similarity_matrix(counts_from([[0, 2], [4, 0]], [10, 20]))
        self.assertAlmostEqual(matrix.value("a", "b"), 0.2)
        self.assertEqual(matrix.value("b", "a"), matrix.value("a", "b"))
        self.assertEqual(matrix.value("a", "a"), 1.0)

    def test_matrix_sixteen_classes(self):
        """16个类别得到16×16矩阵,120个不同的非对角取值"""
        labels = tuple(f"k{n:02d}" for n in range(16))
        classes = ClassSet(labels)
        matrix = np.zeros((16, 16), dtype=np.int64)
        for k, (c_i, c_j) in enumerate(classes.pairs()):
            matrix[classes.index(c_i), classes.index(c_j)] = k
        counts = ConfusionCounts(classes, PredictionMode.OVR, matrix, np.full(16, 1000))
        result = similarity_matrix(counts)
        self.assertEqual(result.values.shape, (16, 16))
        upper = result.values[np.triu_indices(16, k=1)]
        self.assertEqual(len(set(upper.tolist())), 120)
        np.testing.assert_array_equal(result.values, result.values.T)
        np.testing.assert_array_equal(np.diag(result.values), np.ones(16))

    @settings(max_examples=100, deadline=None)
    @given(count_tables())
    def test_symmetry_and_range(self, counts):
        """随机计数表上ClassSim逐位对称且落在[0,1]"""
        for c_i, c_j in counts.classes.pairs():
            value = class_sim(counts, c_i, c_j)
            self.assertEqual(value, class_sim(counts, c_j, c_i))
            self.assertGreaterEqual(value, 0.0)
            self.assertLessEqual(value, 1.0)

    @settings(max_examples=100, deadline=None)
    @given(count_tables(), st.data())
    def test_monotone_in_counts(self, counts, data):
        """分母不变时增加误分类计数不会降低ClassSim"""
        c_i, c_j = data.draw(st.sampled_from(counts.classes.pairs()))
        i, j = counts.classes.index(c_i), counts.classes.index(c_j)
        if counts.matrix[i, j] == counts.totals[i]:
            return
        bumped = counts.matrix.copy()
        bumped[i, j] += 1
        larger = ConfusionCounts(counts.classes, counts.mode, bumped, counts.totals)
        self.assertGreaterEqual(class_sim(larger, c_i, c_j), class_sim(counts, c_i, c_j))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=2, max_value=5), st.integers(min_value=1, max_value=40),
           st.integers(min_value=0, max_value=2 ** 32 - 1))
    def test_multi_rows_partition_totals(self, size, n, seed):
        """multi模式下每个类别的预测计数之和等于该类样本数"""
        rng = np.random.default_rng(seed)
        labels = [f"c{k}" for k in rng.integers(0, size, n)] + [f"c{k}" for k in range(size)]
        classes = ClassSet(tuple(f"c{k}" for k in range(size)))
        eval_set = make_set(labels, classes=classes)
        raw = rng.random((len(labels), size))
        counts = count_misclass_multi(eval_set, multi_table(eval_set, raw / raw.sum(axis=1, keepdims=True)))
        for label in classes:
            self.assertEqual(sum(counts.predicted_row(label).values()), counts.total(label))


class TestRanking(unittest.TestCase):
    def setUp(self):
        labels = ("bay", "beach", "city", "ocean", "river")
        self.classes = ClassSet(labels)
        values = np.eye(5)
        row = {"beach": 0.626, "ocean": 0.320, "city": 0.301, "river": 0.1}
        for label, value in row.items():
            b, k = self.classes.index("bay"), self.classes.index(label)
            values[b, k] = values[k, b] = value
        self.matrix = SimilarityMatrix(self.classes, values)

    def test_top_three(self):
        result = [format_entry(label, value) for label, value in top_k(self.matrix, "bay", 3)]
        self.assertEqual(result, ["beach:0.626", "ocean:0.320", "city:0.301"])

    def test_zero_row_and_ties(self):
        """取值为零或并列时按字典序排列"""
        zero = top_k(self.matrix, "city", 2)
        self.assertEqual([label for label, _ in zero], ["bay", "beach"])
        self.assertEqual([format_score(value) for _, value in zero], ["0.301", "0.000"])
        values = np.eye(3)
        values[0, 1] = values[1, 0] = values[0, 2] = values[2, 0] = 0.5
        tied = SimilarityMatrix(ClassSet(("x", "z", "y")), values)
        self.assertEqual([label for label, _ in top_k(tied, "x", 2)], ["y", "z"])

    def test_k_out_of_range_and_unknown_target(self):
        with self.assertRaises(DataValidationError):
            top_k(self.matrix, "bay", 5)
        with self.assertRaises(DataValidationError):
            top_k(self.matrix, "bay", 0)
        with self.assertRaises(DataValidationError):
            top_k(self.matrix, "harbor", 1)

    def test_distance_ranking_is_ascending(self):
        values = np.array([[0.0, 3.0, 1.0], [3.0, 0.0, 2.0], [1.0, 2.0, 0.0]])
        matrix = SimilarityMatrix(ClassSet(("a", "b", "c")), values, distance=True)
        self.assertEqual(ranking(matrix, "a"), [("c", 1.0), ("b", 3.0)])

    def test_half_even_formatting(self):
        self.assertEqual(format_score(0.3205), "0.320")
        self.assertEqual(format_score(0.0), "0.000")
        self.assertEqual(format_score(1.0), "1.000")

    def test_merge_candidates_and_mean(self):
        candidates = merge_candidates(self.matrix, 0.3)
        self.assertEqual([(c_i, c_j) for c_i, c_j, _ in candidates],
                         [("bay", "beach"), ("bay", "ocean"), ("bay", "city")])
        self.assertAlmostEqual(mean_similarity(self.matrix, [("bay", "beach"), ("bay", "river")]), 0.363)


class TestEquivariance(unittest.TestCase):
    def _matrix(self, labels, scores):
        eval_set = make_set(labels)
        return similarity_matrix(count_misclass_ovr(eval_set, ovr_table(eval_set, scores)))

    def test_relabeling_permutes_matrix(self):
        """重命名类别后矩阵按对应关系置换"""
        rng = np.random.default_rng(3)
        labels = list("abcabcabca")
        scores = {label: rng.random(len(labels)).tolist() for label in "abc"}
        rename = {"a": "z", "b": "x", "c": "y"}
        original = self._matrix(labels, scores)
        renamed = self._matrix([rename[label] for label in labels],
                               {rename[label]: column for label, column in scores.items()})
        for c_i, c_j in original.classes.pairs():
            self.assertEqual(original.value(c_i, c_j), renamed.value(rename[c_i], rename[c_j]))

    def test_sample_order_does_not_change_top_k(self):
        rng = np.random.default_rng(4)
        labels = list("abcdabcdabcd")
        scores = {label: rng.random(len(labels)) for label in "abcd"}
        ids = [f"s{k}" for k in range(len(labels))]
        order = rng.permutation(len(labels))
        first = self._matrix(labels, {label: column.tolist() for label, column in scores.items()})
        eval_set = make_set([labels[p] for p in order], ids=[ids[p] for p in order])
        preds = PredictionTable(PredictionMode.OVR, eval_set.classes,
                                pd.DataFrame({label: column for label, column in scores.items()}, index=ids))
        second = similarity_matrix(count_misclass_ovr(eval_set, preds))
        for label in first.classes:
            self.assertEqual(top_k(first, label, 3), top_k(second, label, 3))


class TestStratifiedSplits(unittest.TestCase):
    def test_hundred_samples(self):
        """100个样本按64/16/20划分"""
        labels = ["a"] * 100
        splits = stratified_splits(labels, ClassSet(("a", "b")), seed=0)
        self.assertEqual(splits.count(Split.TRAIN), 64)
        self.assertEqual(splits.count(Split.VALIDATION), 16)
        self.assertEqual(splits.count(Split.TEST), 20)

    def test_deterministic_per_seed(self):
        labels = ["a", "b"] * 30
        classes = ClassSet(("a", "b"))
        self.assertEqual(stratified_splits(labels, classes, 5), stratified_splits(labels, classes, 5))
        self.assertNotEqual(stratified_splits(labels, classes, 5), stratified_splits(labels, classes, 6))


if __name__ == '__main__':
    unittest.main()
