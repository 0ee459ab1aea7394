"""
线性分类器模块

二分类逻辑回归(用于OVR和成对分类器)与多分类softmax回归,
全批量梯度下降训练,损失上升时步长减半并重试当前轮次。
"""
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit, logsumexp, softmax
from tqdm import tqdm

from class_similarity import (
    ClassSet,
    LabeledFeatureSet,
    PredictionMode,
    PredictionTable,
)
from config import THREAD_POOL_CONFIG, TRAIN_CONFIG
from utils import DataValidationError, NumericalError, canonical_sort, progress_disabled

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SCORE_EPS = np.finfo(float).eps


class ClassWeighting(str, Enum):
    NONE = "none"
    BALANCED = "balanced"


class ModelKind(str, Enum):
    BINARY = "binary"
    MULTINOMIAL = "multinomial"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = TRAIN_CONFIG["learning_rate"]
    epochs: int = TRAIN_CONFIG["epochs"]
    l2: float = TRAIN_CONFIG["l2"]
    seed: int = TRAIN_CONFIG["seed"]
    class_weighting: ClassWeighting = ClassWeighting(TRAIN_CONFIG["class_weighting"])

    def __post_init__(self):
        try:
            object.__setattr__(self, 'class_weighting', ClassWeighting(self.class_weighting))
        except ValueError:
            raise DataValidationError(f"class_weighting必须是none或balanced: {self.class_weighting!r}") from None
        if not (isinstance(self.learning_rate, (int, float)) and self.learning_rate > 0):
            raise DataValidationError(f"learning_rate必须为正数: {self.learning_rate!r}")
        if not (isinstance(self.epochs, int) and self.epochs >= 1):
            raise DataValidationError(f"epochs必须为正整数: {self.epochs!r}")
        if not (isinstance(self.l2, (int, float)) and self.l2 >= 0):
            raise DataValidationError(f"l2必须非负: {self.l2!r}")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2 ** 64):
            raise DataValidationError(f"seed必须是64位无符号整数: {self.seed!r}")
        object.__setattr__(self, 'learning_rate', float(self.learning_rate))
        object.__setattr__(self, 'l2', float(self.l2))

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        if not isinstance(values, dict):
            raise DataValidationError(f"训练配置必须是表: {values!r}")
        known = {"learning_rate", "epochs", "l2", "seed", "class_weighting"}
        unknown = sorted(set(values) - known)
        if unknown:
            raise DataValidationError(f"未知的训练配置项: {unknown}")
        return cls(**values)

    @classmethod
    def from_toml(cls, path) -> "TrainConfig":
        """读取TOML训练配置,支持[train]表或顶层键"""
        try:
            with open(path, 'rb') as f:
                document = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise DataValidationError(f"训练配置 {path} 解析失败: {e}") from None
        return cls.from_dict(document.get("train", document))

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "l2": self.l2,
            "seed": self.seed,
            "class_weighting": self.class_weighting.value,
        }

    def with_seed(self, seed: int) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), "seed": seed})


@dataclass(frozen=True, eq=False)
class LinearModel:
    """
    线性模型

    weights 每行对应一个输出,第0列为偏置,其后为标准化特征的权重。
    binary: outputs=(target,),分数为 sigmoid(w·x+b);
    multinomial: outputs为全部类别,分数为softmax向量。
    """
    kind: ModelKind
    outputs: Tuple[str, ...]
    negatives: Tuple[str, ...]
    weights: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    train_config: TrainConfig
    loss_history: Tuple[float, ...] = ()

    def __post_init__(self):
        kind = ModelKind(self.kind)
        weights = np.array(self.weights, dtype=float)
        mean = np.array(self.mean, dtype=float).reshape(-1)
        scale = np.array(self.scale, dtype=float).reshape(-1)
        if weights.ndim != 2 or weights.shape[1] != mean.shape[0] + 1 or scale.shape != mean.shape:
            raise DataValidationError(f"权重维度{weights.shape}与特征维度{mean.shape[0]}不匹配")
        if weights.shape[0] != len(self.outputs):
            raise DataValidationError("权重行数与输出数不一致")
        if kind is ModelKind.BINARY and len(self.outputs) != 1:
            raise DataValidationError("二分类模型只能有一个目标类别")
        if np.any(scale <= 0):
            raise DataValidationError("标准化尺度必须为正")
        for array in (weights, mean, scale):
            array.setflags(write=False)
        object.__setattr__(self, 'kind', kind)
        object.__setattr__(self, 'outputs', tuple(self.outputs))
        object.__setattr__(self, 'negatives', tuple(self.negatives))
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'scale', scale)
        object.__setattr__(self, 'loss_history', tuple(float(v) for v in self.loss_history))

    @property
    def feature_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def target(self) -> str:
        return self.outputs[0]

    @property
    def pair(self) -> Optional[Tuple[str, str]]:
        """成对分类器对应的 (c_i, c_j),分数为c_j相对c_i的置信度"""
        if self.kind is ModelKind.BINARY and len(self.negatives) == 1:
            return self.negatives[0], self.target
        return None

    def _check_dim(self, X):
        if X.ndim != 2 or X.shape[1] != self.feature_dim:
            raise DataValidationError(f"特征维度不匹配: 模型为{self.feature_dim},输入为{X.shape[-1]}")

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        self._check_dim(X)
        return _design(X, self.mean, self.scale) @ self.weights.T

    def predict_scores(self, X) -> np.ndarray:
        """binary返回(N,)分数,严格落在(0,1);multinomial返回(N,K)概率"""
        z = self.decision_function(X)
        if self.kind is ModelKind.BINARY:
            return np.clip(expit(z[:, 0]), SCORE_EPS, 1.0 - SCORE_EPS)
        return softmax(z, axis=1)

    def score(self, x) -> float:
        """单个特征向量的二分类分数"""
        return float(self.predict_scores(np.asarray(x, dtype=float).reshape(1, -1))[0])

    def predict_labels(self, X) -> np.ndarray:
        if self.kind is not ModelKind.MULTINOMIAL:
            raise DataValidationError("只有多分类模型可以直接输出类别")
        return np.array(self.outputs, dtype=object)[np.argmax(self.predict_scores(X), axis=1)]


def _design(X, mean, scale):
    Xs = (X - mean) / scale
    return np.hstack([np.ones((Xs.shape[0], 1)), Xs])


def _standardization(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def _group_weights(groups: np.ndarray, n_groups: int, weighting: ClassWeighting) -> np.ndarray:
    """balanced: 每组权重为 N / (组数 × 组内样本数)"""
    if weighting is ClassWeighting.NONE:
        return np.ones(groups.shape[0])
    counts = np.bincount(groups, minlength=n_groups)
    return groups.shape[0] / (n_groups * counts[groups])


def binary_loss_and_grad(w, Xb, y, sample_weight, l2):
    """
    带权交叉熵的均值加L2正则(不含偏置)

    Returns:
        tuple: (loss, grad)
    """
    z = Xb @ w
    total = sample_weight.sum()
    penalty = w.copy()
    penalty[0] = 0.0
    loss = np.sum(sample_weight * (np.logaddexp(0.0, z) - y * z)) / total + 0.5 * l2 * np.dot(penalty, penalty)
    grad = Xb.T @ (sample_weight * (expit(z) - y)) / total + l2 * penalty
    return float(loss), grad


def multinomial_loss_and_grad(w_flat, Xb, y_index, sample_weight, l2, n_classes):
    """softmax交叉熵,参数按 (K, D+1) 行优先展平"""
    W = w_flat.reshape(n_classes, Xb.shape[1])
    Z = Xb @ W.T
    total = sample_weight.sum()
    rows = np.arange(Xb.shape[0])
    penalty = W.copy()
    penalty[:, 0] = 0.0
    loss = np.sum(sample_weight * (logsumexp(Z, axis=1) - Z[rows, y_index])) / total \
        + 0.5 * l2 * np.sum(penalty * penalty)
    P = softmax(Z, axis=1)
    P[rows, y_index] -= 1.0
    grad = (P * sample_weight[:, None]).T @ Xb / total + l2 * penalty
    return float(loss), grad.reshape(-1)


def gradient_descent(loss_and_grad, w0, config: TrainConfig):
    """
    全批量梯度下降,损失增加时步长减半并重试当前轮次,记录的损失序列单调不增

    Returns:
        tuple: (w, loss_history)
    """
    w = np.array(w0, dtype=float)
    loss, grad = loss_and_grad(w)
    if not np.isfinite(loss):
        raise NumericalError(f"初始损失不是有限值: {loss}")
    history = [loss]
    step = config.learning_rate
    for epoch in range(config.epochs):
        while True:
            candidate = w - step * grad
            candidate_loss, candidate_grad = loss_and_grad(candidate)
            if np.isfinite(candidate_loss) and candidate_loss <= loss:
                break
            step /= 2
            if step < TRAIN_CONFIG["min_step"]:
                logger.debug(f"第{epoch + 1}轮步长已降至{step:.3g},提前结束训练")
                return w, history
        w, loss, grad = candidate, candidate_loss, candidate_grad
        history.append(loss)
    return w, history


def train_ovr(train: LabeledFeatureSet, target: str, negatives: Iterable[str],
              config: TrainConfig) -> LinearModel:
    """
    训练二分类逻辑回归 f_{target,other},负样本来自negatives中的类别

    Raises:
        DataValidationError: target在负类中,或正负样本为空
        NumericalError: 损失不是有限值
    """
    negatives = tuple(canonical_sort(set(negatives)))
    train.classes.index(target)
    for label in negatives:
        train.classes.index(label)
    if target in negatives:
        raise DataValidationError(f"目标类别 {target!r} 不能同时出现在负类中")
    negative_set = set(negatives)
    is_positive = np.array([label == target for label in train.labels], dtype=bool)
    is_negative = np.array([label in negative_set for label in train.labels], dtype=bool)
    if not is_positive.any():
        raise DataValidationError(f"类别 {target!r} 没有训练样本")
    if not is_negative.any():
        raise DataValidationError(f"类别 {target!r} 的负类 {list(negatives)} 没有训练样本")
    used = is_positive | is_negative
    X = train.features[used]
    y = is_positive[used].astype(float)
    mean, scale = _standardization(X)
    Xb = _design(X, mean, scale)
    sample_weight = _group_weights(y.astype(int), 2, config.class_weighting)
    rng = np.random.default_rng(config.seed)
    w0 = rng.normal(0.0, 0.01, size=Xb.shape[1])
    w, history = gradient_descent(
        lambda w: binary_loss_and_grad(w, Xb, y, sample_weight, config.l2), w0, config
    )
    logger.debug(f"f_{target} 训练完成: 正样本{int(y.sum())}个, 负样本{int(len(y) - y.sum())}个, 最终损失{history[-1]:.6f}")
    return LinearModel(ModelKind.BINARY, (target,), negatives, w.reshape(1, -1), mean, scale,
                       config, tuple(history))


def train_pairwise(train: LabeledFeatureSet, pair: Tuple[str, str], config: TrainConfig) -> LinearModel:
    """成对分类器: 分数为pair[1]相对于pair[0]的置信度"""
    c_i, c_j = pair
    if c_i == c_j:
        raise DataValidationError(f"类别对的两个类别相同: {pair!r}")
    return train_ovr(train, c_j, (c_i,), config)


def train_multi(train: LabeledFeatureSet, classes: ClassSet, config: TrainConfig) -> LinearModel:
    """训练单个softmax多分类器"""
    if train.classes != classes:
        raise DataValidationError("训练集与类别集合不一致")
    counts = train.class_counts()
    empty = [label for label, count in counts.items() if count == 0]
    if empty:
        raise DataValidationError(f"以下类别没有训练样本: {empty}")
    n_classes = len(classes)
    X = train.features
    y_index = train.label_indices()
    mean, scale = _standardization(X)
    Xb = _design(X, mean, scale)
    sample_weight = _group_weights(y_index, n_classes, config.class_weighting)
    rng = np.random.default_rng(config.seed)
    w0 = rng.normal(0.0, 0.01, size=n_classes * Xb.shape[1])
    w, history = gradient_descent(
        lambda w: multinomial_loss_and_grad(w, Xb, y_index, sample_weight, config.l2, n_classes),
        w0, config
    )
    logger.debug(f"多分类器训练完成: {n_classes}个类别, 最终损失{history[-1]:.6f}")
    return LinearModel(ModelKind.MULTINOMIAL, tuple(classes), (), w.reshape(n_classes, -1),
                       mean, scale, config, tuple(history))


def _parallel(fn, items, desc, max_workers=None):
    max_workers = max_workers or THREAD_POOL_CONFIG["max_workers"]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(tqdm(executor.map(fn, items), total=len(items), desc=desc,
                         disable=progress_disabled()))


def train_ovr_all(train: LabeledFeatureSet, config: TrainConfig,
                  negatives: Optional[Dict[str, Iterable[str]]] = None,
                  targets: Optional[Iterable[str]] = None,
                  max_workers: Optional[int] = None) -> Dict[str, LinearModel]:
    """
    按规范顺序训练每个类别的OVR分类器

    Args:
        negatives: 各目标类别的负类,默认为其余所有类别
        targets: 需要训练的目标类别,默认为全部
    """
    targets = [label for label in train.classes if targets is None or label in set(targets)]
    negatives = negatives or {}

    def fit(target):
        rest = negatives.get(target, [label for label in train.classes if label != target])
        return train_ovr(train, target, rest, config)

    models = _parallel(fit, targets, "训练OVR分类器", max_workers)
    return dict(zip(targets, models))


def train_pairwise_all(train: LabeledFeatureSet, config: TrainConfig,
                       max_workers: Optional[int] = None) -> Dict[Tuple[str, str], LinearModel]:
    """训练 |C|(|C|-1)/2 个成对分类器"""
    train.classes.require_pairs()
    pairs = train.classes.pairs()
    models = _parallel(lambda pair: train_pairwise(train, pair, config), pairs, "训练成对分类器", max_workers)
    return dict(zip(pairs, models))


def predict(model: LinearModel, eval_set: LabeledFeatureSet) -> PredictionTable:
    """
    binary模型输出单列OVR预测表,multinomial模型输出multi预测表
    """
    scores = model.predict_scores(eval_set.features)
    index = pd.Index(eval_set.ids, name="id")
    if model.kind is ModelKind.BINARY:
        eval_set.classes.index(model.target)
        frame = pd.DataFrame({model.target: scores}, index=index)
        return PredictionTable(PredictionMode.OVR, eval_set.classes, frame)
    if tuple(eval_set.classes) != model.outputs:
        raise DataValidationError("评估集的类别集合与多分类模型不一致")
    frame = pd.DataFrame(scores, index=index, columns=list(model.outputs))
    return PredictionTable(PredictionMode.MULTI, eval_set.classes, frame)


def predict_ovr_all(models: Dict[str, LinearModel], eval_set: LabeledFeatureSet) -> PredictionTable:
    index = pd.Index(eval_set.ids, name="id")
    frame = pd.DataFrame(
        {target: model.predict_scores(eval_set.features) for target, model in models.items()},
        index=index,
    )
    return PredictionTable(PredictionMode.OVR, eval_set.classes, frame)


def predict_pairwise_all(models: Dict[Tuple[str, str], LinearModel],
                         eval_set: LabeledFeatureSet) -> PredictionTable:
    pairs = list(models)
    values = np.column_stack([models[pair].predict_scores(eval_set.features) for pair in pairs])
    frame = pd.DataFrame(values, index=pd.Index(eval_set.ids, name="id"),
                         columns=pd.MultiIndex.from_tuples(pairs))
    return PredictionTable(PredictionMode.PAIRWISE, eval_set.classes, frame)


def model_to_dict(model: LinearModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": model.kind.value,
        "target": model.target if model.kind is ModelKind.BINARY else None,
        "negatives": list(model.negatives),
        "classes": list(model.outputs),
        "feature_dim": model.feature_dim,
        "standardization": {"mean": model.mean.tolist(), "scale": model.scale.tolist()},
        "weights": model.weights.reshape(-1).tolist(),
        "weights_shape": list(model.weights.shape),
        "train_config": model.train_config.to_dict(),
        "loss_history": list(model.loss_history),
    }


def model_from_dict(document: dict) -> LinearModel:
    if document.get("format_version") != FORMAT_VERSION:
        raise DataValidationError(f"不支持的模型格式版本: {document.get('format_version')!r}")
    try:
        rows, cols = document["weights_shape"]
        if cols != document["feature_dim"] + 1:
            raise DataValidationError("模型文件中feature_dim与权重形状不一致")
        return LinearModel(
            kind=ModelKind(document["kind"]),
            outputs=tuple(document["classes"]),
            negatives=tuple(document["negatives"]),
            weights=np.array(document["weights"], dtype=float).reshape(rows, cols),
            mean=document["standardization"]["mean"],
            scale=document["standardization"]["scale"],
            train_config=TrainConfig.from_dict(document["train_config"]),
            loss_history=tuple(document.get("loss_history", ())),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, DataValidationError):
            raise
        raise DataValidationError(f"模型文件格式错误: {e}") from None


def save_model(model: LinearModel, path):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(model_to_dict(model), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def load_model(path) -> LinearModel:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise DataValidationError(f"模型文件 {path} 不是合法的JSON: {e}") from None
    return model_from_dict(document)
