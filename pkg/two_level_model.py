"""
两级分类模型

第一级为每个类别的OVR分类器,第二级只在相似类集合非空的类别上训练,
负样本限定为该类别的相似类。路由按固定顺序逐个检查类别,
第一级触发但第二级未触发时继续检查下一个类别,全部未通过时返回none。
"""
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from class_similarity import (
    ClassSet,
    LabeledFeatureSet,
    SimilarityMatrix,
    Split,
    count_misclass_ovr,
    similarity_matrix,
)
from config import NONE_LABEL, THREAD_POOL_CONFIG, TWO_LEVEL_CONFIG
from linear_classifiers import (
    LinearModel,
    TrainConfig,
    load_model,
    predict_ovr_all,
    save_model,
    train_ovr_all,
)
from utils import DataValidationError, log_section

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "model_manifest.json"


@dataclass(frozen=True)
class SimilarSets:
    """每个类别的相似类集合,集合内按规范顺序排列"""
    threshold: float
    sets: Mapping[str, Tuple[str, ...]]

    def __getitem__(self, label: str) -> Tuple[str, ...]:
        return self.sets[label]

    def with_second_level(self) -> List[str]:
        return [label for label, members in self.sets.items() if members]


def select_similar(matrix: SimilarityMatrix, threshold: Optional[float] = None) -> SimilarSets:
    """C^sim_c = { c' != c | ClassSim(c, c') > threshold }"""
    threshold = TWO_LEVEL_CONFIG["similar_threshold"] if threshold is None else float(threshold)
    if not 0.0 <= threshold < 1.0:
        raise DataValidationError(f"相似阈值必须在[0,1)内: {threshold}")
    if matrix.distance:
        raise DataValidationError("相似类集合需要相似度矩阵,而不是距离矩阵")
    sets = {}
    for i, label in enumerate(matrix.classes):
        sets[label] = tuple(
            other for j, other in enumerate(matrix.classes)
            if j != i and matrix.values[i, j] > threshold
        )
    return SimilarSets(threshold, sets)


def route_scores(order: Sequence[str],
                 first_score: Callable[[str], float],
                 second_score: Callable[[str], Optional[float]],
                 first_threshold: Optional[float] = None,
                 second_threshold: Optional[float] = None) -> str:
    """
    按顺序路由,分数按需计算

    Args:
        first_score: 类别 -> 第一级分数
        second_score: 类别 -> 第二级分数,没有第二级分类器时返回None

    Returns:
        str: 第一个两级都通过的类别,否则为none
    """
    t1 = TWO_LEVEL_CONFIG["first_threshold"] if first_threshold is None else first_threshold
    t2 = TWO_LEVEL_CONFIG["second_threshold"] if second_threshold is None else second_threshold
    for label in order:
        if first_score(label) > t1:
            second = second_score(label)
            if second is None or second > t2:
                return label
    return NONE_LABEL


def _check_vector(x, models: Iterable[LinearModel]) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    expected = next(iter(models)).feature_dim
    if x.shape[0] != expected:
        raise DataValidationError(f"特征维度不匹配: 模型为{expected},输入为{x.shape[0]}")
    return x


@dataclass(frozen=True, eq=False)
class BaselineRouter:
    """只使用第一级OVR分类器的路由"""
    first_level: Mapping[str, LinearModel]
    order: Tuple[str, ...]
    threshold: float = TWO_LEVEL_CONFIG["first_threshold"]
    name: str = "baseline"

    def route_batch(self, X, max_workers: Optional[int] = None) -> List[str]:
        first = _score_columns(self.first_level, self.order, X)
        return _route_rows(self.order, first, {}, self.threshold, None, max_workers)


@dataclass(frozen=True, eq=False)
class TwoLevelModel:
    classes: ClassSet
    first_level: Mapping[str, LinearModel]
    second_level: Mapping[str, LinearModel]
    similar_sets: SimilarSets
    order: Tuple[str, ...] = ()
    first_threshold: float = TWO_LEVEL_CONFIG["first_threshold"]
    second_threshold: float = TWO_LEVEL_CONFIG["second_threshold"]
    name: str = "two_level"

    def __post_init__(self):
        order = tuple(self.order) or tuple(self.classes)
        if sorted(order) != sorted(self.classes):
            raise DataValidationError(f"路由顺序必须是类别集合的一个排列: {list(order)}")
        missing = [label for label in self.classes if label not in self.first_level]
        if missing:
            raise DataValidationError(f"缺少第一级分类器: {missing}")
        for label in self.classes:
            has_second = label in self.second_level
            if has_second != bool(self.similar_sets.sets.get(label)):
                raise DataValidationError(f"类别 {label!r} 的第二级分类器与相似类集合不一致")
        object.__setattr__(self, 'order', order)

    def baseline(self) -> BaselineRouter:
        return BaselineRouter(self.first_level, self.order, self.first_threshold)

    def route_batch(self, X, max_workers: Optional[int] = None) -> List[str]:
        first = _score_columns(self.first_level, self.order, X)
        second = _score_columns(self.second_level, [c for c in self.order if c in self.second_level], X)
        return _route_rows(self.order, first, second, self.first_threshold, self.second_threshold, max_workers)


def _score_columns(models: Mapping[str, LinearModel], labels, X) -> Dict[str, np.ndarray]:
    X = np.asarray(X, dtype=float)
    return {label: models[label].predict_scores(X) for label in labels}


def _route_rows(order, first, second, t1, t2, max_workers=None) -> List[str]:
    n_rows = len(next(iter(first.values()))) if first else 0

    def route_row(row):
        return route_scores(
            order,
            lambda c: first[c][row],
            lambda c: second[c][row] if c in second else None,
            t1, t2,
        )

    max_workers = max_workers or THREAD_POOL_CONFIG["max_workers"]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(route_row, range(n_rows)))


def route(model: TwoLevelModel, x) -> str:
    """单个样本的两级路由"""
    x = _check_vector(x, model.first_level.values())
    return route_scores(
        model.order,
        lambda c: model.first_level[c].score(x),
        lambda c: model.second_level[c].score(x) if c in model.second_level else None,
        model.first_threshold,
        model.second_threshold,
    )


def route_baseline(first_level: Mapping[str, LinearModel], x, order: Optional[Sequence[str]] = None,
                   threshold: Optional[float] = None) -> str:
    """按顺序返回第一个分数超过阈值的类别(不是分数最大的类别)"""
    x = _check_vector(x, first_level.values())
    order = tuple(order) if order is not None else tuple(ClassSet(tuple(first_level)))
    return route_scores(order, lambda c: first_level[c].score(x), lambda c: None, threshold)


def build_two_level(train: LabeledFeatureSet, sets: SimilarSets, config: TrainConfig,
                    second_train: Optional[LabeledFeatureSet] = None,
                    first_level: Optional[Mapping[str, LinearModel]] = None,
                    order: Optional[Sequence[str]] = None,
                    max_workers: Optional[int] = None) -> TwoLevelModel:
    """
    构建两级模型

    Args:
        train: 第一级分类器的训练集,负类为其余所有类别
        sets: 相似类集合
        second_train: 第二级分类器的训练集,默认与train相同
        first_level: 已训练好的第一级分类器,提供时不再重新训练
    """
    if first_level is None:
        first_level = train_ovr_all(train, config, max_workers=max_workers)
    targets = sets.with_second_level()
    second_level = {}
    if targets:
        second_train = second_train if second_train is not None else train
        second_level = train_ovr_all(
            second_train, config,
            negatives={label: sets[label] for label in targets},
            targets=targets,
            max_workers=max_workers,
        )
    logger.info(f"两级模型: {len(first_level)}个第一级分类器, {len(second_level)}个第二级分类器")
    return TwoLevelModel(train.classes, dict(first_level), second_level, sets,
                         tuple(order) if order else ())


def fit_two_level(dataset: LabeledFeatureSet, config: TrainConfig,
                  threshold: Optional[float] = None,
                  order: Optional[Sequence[str]] = None,
                  max_workers: Optional[int] = None) -> Tuple[TwoLevelModel, SimilarityMatrix]:
    """
    完整流程: 在训练集上训练第一级OVR,在验证集上计算ClassSim,
    选出相似类集合,再用训练集+验证集训练第二级分类器
    """
    train = dataset.subset(Split.TRAIN)
    validation = dataset.subset(Split.VALIDATION)
    log_section("训练第一级分类器")
    first_level = train_ovr_all(train, config, max_workers=max_workers)
    log_section("在验证集上计算ClassSim")
    preds = predict_ovr_all(first_level, validation)
    matrix = similarity_matrix(count_misclass_ovr(validation, preds))
    sets = select_similar(matrix, threshold)
    log_section("训练第二级分类器")
    model = build_two_level(train, sets, config,
                            second_train=dataset.subset(Split.TRAIN, Split.VALIDATION),
                            first_level=first_level, order=order, max_workers=max_workers)
    return model, matrix


@dataclass(frozen=True, eq=False)
class AccuracyReport:
    router: str
    ids: Tuple[str, ...]
    true_labels: Tuple[str, ...]
    predicted: Tuple[str, ...]
    accuracy: float
    correct: int
    per_class_recall: Dict[str, float]
    confusion: pd.DataFrame = field(repr=False)

    @property
    def total(self) -> int:
        return len(self.ids)

    @property
    def none_count(self) -> int:
        return sum(1 for label in self.predicted if label == NONE_LABEL)


def evaluate(router, test: LabeledFeatureSet, max_workers: Optional[int] = None) -> AccuracyReport:
    """
    计算路由准确率, none一律计为错误;同时给出各类别召回率和路由结果的混淆表

    Raises:
        DataValidationError: 测试集为空
    """
    if len(test) == 0:
        raise DataValidationError("测试集为空,无法评估准确率")
    predicted = router.route_batch(test.features, max_workers=max_workers)
    truth = np.array(test.labels, dtype=object)
    routed = np.array(predicted, dtype=object)
    hits = truth == routed
    recall = {}
    for label in test.classes:
        mask = truth == label
        recall[label] = float(hits[mask].mean()) if mask.any() else float('nan')
    columns = list(test.classes) + [NONE_LABEL]
    confusion = pd.crosstab(
        pd.Categorical(truth, categories=list(test.classes)),
        pd.Categorical(routed, categories=columns),
        dropna=False,
    )
    confusion.index.name = "true_label"
    confusion.columns.name = "routed_label"
    correct = int(hits.sum())
    report = AccuracyReport(
        router=getattr(router, "name", type(router).__name__),
        ids=tuple(test.ids),
        true_labels=tuple(test.labels),
        predicted=tuple(predicted),
        accuracy=correct / len(test),
        correct=correct,
        per_class_recall=recall,
        confusion=confusion,
    )
    logger.info(f"{report.router} 准确率 {report.accuracy:.3f} ({correct}/{len(test)}), none {report.none_count}个")
    return report


def compare_routers(baseline: AccuracyReport, two_level: AccuracyReport) -> pd.DataFrame:
    """两个路由在同一测试集上结果不同的样本,change列为improved或degraded"""
    if baseline.ids != two_level.ids:
        raise DataValidationError("两个评估结果的样本不一致")
    rows = []
    for sample_id, truth, left, right in zip(baseline.ids, baseline.true_labels,
                                              baseline.predicted, two_level.predicted):
        if left == right:
            continue
        if right == truth:
            change = "improved"
        elif left == truth:
            change = "degraded"
        else:
            change = "changed"
        rows.append({"id": sample_id, "true_label": truth, "baseline": left,
                     "two_level": right, "change": change})
    return pd.DataFrame(rows, columns=["id", "true_label", "baseline", "two_level", "change"])


def load_order_file(path, classes: ClassSet) -> Tuple[str, ...]:
    """读取显式路由顺序,每行一个类别,忽略空行和#注释"""
    with open(path, 'r', encoding='utf-8') as f:
        order = [line.strip() for line in f if line.strip() and not line.lstrip().startswith('#')]
    if len(order) != len(set(order)) or set(order) != set(classes):
        raise DataValidationError(f"顺序文件 {path} 必须恰好列出每个类别一次")
    return tuple(order)


def save_two_level(model: TwoLevelModel, directory) -> List[str]:
    """写出模型目录,返回写出的文件名"""
    os.makedirs(directory, exist_ok=True)
    first_files, second_files = {}, {}
    for k, label in enumerate(model.classes):
        first_files[label] = f"first_{k:03d}.json"
        save_model(model.first_level[label], os.path.join(directory, first_files[label]))
        if label in model.second_level:
            second_files[label] = f"second_{k:03d}.json"
            save_model(model.second_level[label], os.path.join(directory, second_files[label]))
    manifest = {
        "format_version": FORMAT_VERSION,
        "classes": list(model.classes),
        "order": list(model.order),
        "thresholds": {"first": model.first_threshold, "second": model.second_threshold},
        "similar_threshold": model.similar_sets.threshold,
        "similar_sets": {label: list(members) for label, members in model.similar_sets.sets.items()},
        "first_level": first_files,
        "second_level": second_files,
    }
    with open(os.path.join(directory, MANIFEST_NAME), 'w', encoding='utf-8') as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2)
        f.write("\n")
    return [MANIFEST_NAME, *first_files.values(), *second_files.values()]


def load_two_level(directory) -> TwoLevelModel:
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise DataValidationError(f"模型目录中没有 {MANIFEST_NAME}: {directory}") from None
    except json.JSONDecodeError as e:
        raise DataValidationError(f"{path} 不是合法的JSON: {e}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataValidationError(f"不支持的两级模型格式版本: {manifest.get('format_version')!r}")
    try:
        classes = ClassSet(tuple(manifest["classes"]))
        first = {label: load_model(os.path.join(directory, name))
                 for label, name in manifest["first_level"].items()}
        second = {label: load_model(os.path.join(directory, name))
                  for label, name in manifest["second_level"].items()}
        sets = SimilarSets(float(manifest["similar_threshold"]),
                           {label: tuple(members) for label, members in manifest["similar_sets"].items()})
        return TwoLevelModel(classes, first, second, sets, tuple(manifest["order"]),
                             float(manifest["thresholds"]["first"]),
                             float(manifest["thresholds"]["second"]))
    except KeyError as e:
        raise DataValidationError(f"两级模型清单缺少字段: {e}") from None
