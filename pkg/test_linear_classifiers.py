import os
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings, strategies as st

from class_similarity import ClassSet, LabeledFeatureSet, PredictionMode, Split
from linear_classifiers import (
    ClassWeighting,
    LinearModel,
    ModelKind,
    TrainConfig,
    _group_weights,
    binary_loss_and_grad,
    gradient_descent,
    load_model,
    multinomial_loss_and_grad,
    predict,
    predict_pairwise_all,
    save_model,
    train_multi,
    train_ovr,
    train_ovr_all,
    train_pairwise,
    train_pairwise_all,
)
from utils import DataValidationError, NumericalError


def make_train(labels, features):
    classes = ClassSet.from_labels(labels)
    ids = tuple(f"t{k}" for k in range(len(labels)))
    return LabeledFeatureSet(classes, ids, tuple(labels), np.asarray(features, dtype=float),
                             (Split.TRAIN,) * len(labels))


def blobs(centers, n, std, seed):
    rng = np.random.default_rng(seed)
    labels, features = [], []
    for label, center in centers.items():
        labels += [label] * n
        features.append(rng.normal(center, std, size=(n, len(center))))
    return make_train(labels, np.vstack(features))


def relative_error(numeric, analytic):
    return np.linalg.norm(numeric - analytic) / max(np.linalg.norm(numeric) + np.linalg.norm(analytic), 1e-12)


def central_difference(f, w, h=1e-5):
    grad = np.zeros_like(w)
    for k in range(w.size):
        step = np.zeros_like(w)
        step[k] = h
        grad[k] = (f(w + step)[0] - f(w - step)[0]) / (2 * h)
    return grad


class TestTrainConfig(unittest.TestCase):
    def test_invalid_values(self):
        with self.assertRaises(DataValidationError):
            TrainConfig(learning_rate=0.0)
        with self.assertRaises(DataValidationError):
            TrainConfig(epochs=0)
        with self.assertRaises(DataValidationError):
            TrainConfig(l2=-1.0)
        with self.assertRaises(DataValidationError):
            TrainConfig(class_weighting="inverse")

    def test_unknown_key(self):
        with self.assertRaises(DataValidationError):
            TrainConfig.from_dict({"learning_rate": 0.1, "momentum": 0.9})

    def test_from_toml(self):
        """读取TOML中的[train]表"""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "train.toml")
            with open(path, "w", encoding="utf-8") as f:
                f.write('[train]\nlearning_rate = 0.25\nepochs = 30\nclass_weighting = "balanced"\n')
            config = TrainConfig.from_toml(path)
        self.assertEqual(config.learning_rate, 0.25)
        self.assertEqual(config.epochs, 30)
        self.assertIs(config.class_weighting, ClassWeighting.BALANCED)

    def test_balanced_weights(self):
        weights = _group_weights(np.array([0, 0, 0, 1]), 2, ClassWeighting.BALANCED)
        np.testing.assert_allclose(weights, [4 / 6, 4 / 6, 4 / 6, 2.0])
        np.testing.assert_array_equal(_group_weights(np.array([0, 1]), 2, ClassWeighting.NONE), [1.0, 1.0])


class TestGradients(unittest.TestCase):
    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 32 - 1))
    def test_binary_gradient(self, seed):
        """二分类损失的解析梯度与中心差分一致"""
        rng = np.random.default_rng(seed)
        n, d = 12, 3
        Xb = np.hstack([np.ones((n, 1)), rng.normal(size=(n, d))])
        y = (rng.random(n) > 0.5).astype(float)
        sample_weight = rng.uniform(0.5, 2.0, n)
        w = rng.normal(size=d + 1)
        f = lambda v: binary_loss_and_grad(v, Xb, y, sample_weight, 0.1)
        self.assertLess(relative_error(central_difference(f, w), f(w)[1]), 1e-4)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 32 - 1))
    def test_multinomial_gradient(self, seed):
        """softmax损失的解析梯度与中心差分一致"""
        rng = np.random.default_rng(seed)
        n, d, k = 15, 2, 3
        Xb = np.hstack([np.ones((n, 1)), rng.normal(size=(n, d))])
        y_index = rng.integers(0, k, n)
        sample_weight = rng.uniform(0.5, 2.0, n)
        w = rng.normal(size=k * (d + 1))
        f = lambda v: multinomial_loss_and_grad(v, Xb, y_index, sample_weight, 0.1, k)
        self.assertLess(relative_error(central_difference(f, w), f(w)[1]), 1e-4)

    def test_non_finite_loss(self):
        with self.assertRaises(NumericalError):
            gradient_descent(lambda w: (float("inf"), w), np.zeros(2), TrainConfig())


class TestTraining(unittest.TestCase):
    def test_one_dimensional_sign(self):
        """正样本在+1,负样本在-1: 权重为正"""
        train = make_train(["pos"] * 10 + ["neg"] * 10, [[1.0]] * 10 + [[-1.0]] * 10)
        model = train_ovr(train, "pos", {"neg"}, TrainConfig())
        self.assertGreater(model.weights[0, 1], 0.0)
        self.assertGreater(model.score([1.0]), 0.5)
        self.assertLess(model.score([-1.0]), 0.5)

    def test_target_in_negatives(self):
        train = make_train(["pos", "neg"], [[1.0], [-1.0]])
        with self.assertRaises(DataValidationError):
            train_ovr(train, "pos", {"pos", "neg"}, TrainConfig())

    def test_empty_negative_set(self):
        train = make_train(["pos", "pos", "neg"], [[1.0], [2.0], [-1.0]])
        only_pos = train.restrict_to(["pos"])
        with self.assertRaises(DataValidationError):
            train_ovr(only_pos, "pos", {"neg"}, TrainConfig())

    def test_separable_blobs(self):
        """线性可分的两团数据,100轮后训练准确率为1"""
        train = blobs({"left": (-3.0, -3.0), "right": (3.0, 3.0)}, 50, 0.5, seed=11)
        model = train_ovr(train, "right", {"left"}, TrainConfig(learning_rate=0.5, epochs=100))
        scores = model.predict_scores(train.features)
        truth = np.array(train.labels) == "right"
        self.assertEqual(float(np.mean((scores > 0.5) == truth)), 1.0)
        self.assertTrue(np.all((scores > 0.0) & (scores < 1.0)))

    def test_loss_is_non_increasing(self):
        train = blobs({"a": (0.0, 0.0), "b": (1.0, 0.5)}, 40, 1.0, seed=5)
        model = train_ovr(train, "b", {"a"}, TrainConfig(learning_rate=50.0, epochs=60))
        self.assertTrue(np.all(np.diff(model.loss_history) <= 0.0))

    def test_deterministic_weights(self):
        train = blobs({"a": (0.0, 0.0), "b": (1.0, 0.5), "c": (-1.0, 1.0)}, 30, 1.0, seed=6)
        config = TrainConfig(epochs=50, seed=42)
        np.testing.assert_array_equal(train_multi(train, train.classes, config).weights,
                                      train_multi(train, train.classes, config).weights)
        one = train_ovr_all(train, config, max_workers=1)
        many = train_ovr_all(train, config, max_workers=4)
        for target in train.classes:
            np.testing.assert_array_equal(one[target].weights, many[target].weights)

    def test_multi_three_blobs(self):
        """三团分离良好的数据: 准确率不低于0.95,且与最近质心判别基本一致"""
        centers = {"a": (0.0, 5.0), "b": (5.0, 0.0), "c": (-5.0, -5.0)}
        train = blobs(centers, 40, 0.7, seed=3)
        model = train_multi(train, train.classes, TrainConfig())
        predicted = model.predict_labels(train.features)
        self.assertGreaterEqual(float(np.mean(predicted == np.array(train.labels))), 0.95)
        labels = np.array(list(centers))
        points = np.array(list(centers.values()))
        distances = ((train.features[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        nearest = labels[np.argmin(distances, axis=1)]
        self.assertGreaterEqual(float(np.mean(predicted == nearest)), 0.95)
        sums = model.predict_scores(train.features).sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-9, rtol=0)

    def test_constant_feature_has_no_signal(self):
        labels = ["a", "b", "c"] * 10
        train = make_train(labels, [[2.0]] * len(labels))
        model = train_multi(train, train.classes, TrainConfig(epochs=50))
        accuracy = float(np.mean(model.predict_labels(train.features) == np.array(labels)))
        self.assertAlmostEqual(accuracy, 1 / 3)

    def test_pairwise_orientation(self):
        """成对分类器的分数为c_j相对c_i的置信度"""
        train = make_train(["a"] * 5 + ["b"] * 5, [[-2.0]] * 5 + [[2.0]] * 5)
        model = train_pairwise(train, ("a", "b"), TrainConfig())
        self.assertEqual(model.pair, ("a", "b"))
        self.assertGreater(model.score([2.0]), 0.5)
        with self.assertRaises(DataValidationError):
            train_pairwise(train, ("a", "a"), TrainConfig())


class TestPrediction(unittest.TestCase):
    def setUp(self):
        self.eval_set = blobs({"a": (0.0, 0.0), "b": (1.0, 1.0), "c": (2.0, 0.0), "d": (0.0, 2.0)},
                              5, 0.3, seed=8)

    def _zero_model(self, kind, outputs):
        return LinearModel(kind, outputs, (), np.zeros((len(outputs), 3)), np.zeros(2), np.ones(2), TrainConfig())

    def test_zero_binary_model(self):
        preds = predict(self._zero_model(ModelKind.BINARY, ("a",)), self.eval_set)
        self.assertIs(preds.mode, PredictionMode.OVR)
        self.assertTrue(np.all(preds.scores["a"].to_numpy() == 0.5))

    def test_zero_multinomial_model(self):
        preds = predict(self._zero_model(ModelKind.MULTINOMIAL, ("a", "b", "c", "d")), self.eval_set)
        np.testing.assert_allclose(preds.scores.to_numpy(), 0.25)

    def test_dimension_mismatch(self):
        model = LinearModel(ModelKind.BINARY, ("a",), (), np.zeros((1, 2)), np.zeros(1), np.ones(1), TrainConfig())
        with self.assertRaises(DataValidationError):
            predict(model, self.eval_set)

    def test_pairwise_table(self):
        models = train_pairwise_all(self.eval_set, TrainConfig(epochs=20), max_workers=2)
        preds = predict_pairwise_all(models, self.eval_set)
        self.assertEqual(list(preds.scores.columns), self.eval_set.classes.pairs())
        self.assertIs(preds.mode, PredictionMode.PAIRWISE)


class TestPersistence(unittest.TestCase):
    def test_save_and_load(self):
        """模型JSON保存后重新加载,权重与预测完全一致"""
        train = blobs({"a": (0.0, 0.0), "b": (2.0, 1.0)}, 20, 1.0, seed=9)
        model = train_ovr(train, "b", {"a"}, TrainConfig(epochs=30, class_weighting="balanced"))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.json")
            save_model(model, path)
            loaded = load_model(path)
        np.testing.assert_array_equal(loaded.weights, model.weights)
        np.testing.assert_array_equal(loaded.mean, model.mean)
        np.testing.assert_array_equal(loaded.predict_scores(train.features), model.predict_scores(train.features))
        self.assertEqual(loaded.train_config, model.train_config)
        self.assertEqual(loaded.negatives, ("a",))

    def test_bad_document(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.json")
            with open(path, "w", encoding="utf-8") as f:
                f.write('{"format_version": 2}')
            with self.assertRaises(DataValidationError):
                load_model(path)


if __name__ == '__main__':
    unittest.main()
