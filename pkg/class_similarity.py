"""
ClassSim 类间相似度计算模块

根据分类器的误分类统计计算类间相似度:
    ClassSim(c_i, c_j) = 1/2 * (N_{c_j|c_i} / N_{c_i} + N_{c_i|c_j} / N_{c_j})
支持三种计数方式: 成对二分类器、OVR分类器、多分类器。
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from itertools import combinations
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import NONE_LABEL, SIMILARITY_CONFIG, SPLIT_CONFIG, THREAD_POOL_CONFIG
from utils import DataValidationError, canonical_sort

logger = logging.getLogger(__name__)


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class PredictionMode(str, Enum):
    PAIRWISE = "pairwise"
    OVR = "ovr"
    MULTI = "multi"


@dataclass(frozen=True)
class ClassSet:
    """类别全集C,按UTF-8字节序固定排列"""
    labels: Tuple[str, ...]

    def __post_init__(self):
        labels = tuple(self.labels)
        for label in labels:
            if not isinstance(label, str) or not label:
                raise DataValidationError(f"类别标签必须是非空字符串: {label!r}")
        if len(set(labels)) != len(labels):
            duplicated = sorted({label for label in labels if labels.count(label) > 1})
            raise DataValidationError(f"类别标签重复: {duplicated}")
        labels = tuple(canonical_sort(labels))
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, '_index', {label: i for i, label in enumerate(labels)})

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "ClassSet":
        """从可能重复的标签序列构造类别集合"""
        return cls(tuple(set(labels)))

    def __len__(self):
        return len(self.labels)

    def __iter__(self):
        return iter(self.labels)

    def __contains__(self, label):
        return label in self._index

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise DataValidationError(f"未知类别: {label!r}") from None

    def pairs(self) -> List[Tuple[str, str]]:
        """按规范顺序列出所有无序类别对"""
        return list(combinations(self.labels, 2))

    def require_pairs(self):
        if len(self.labels) < 2:
            raise DataValidationError(f"相似度计算至少需要2个类别,当前只有{len(self.labels)}个")


@dataclass(frozen=True, eq=False)
class LabeledFeatureSet:
    """带标注标签和划分标记的特征向量集合"""
    classes: ClassSet
    ids: Tuple[str, ...]
    labels: Tuple[str, ...]
    features: np.ndarray
    splits: Tuple[Split, ...]

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        labels = tuple(self.labels)
        splits = tuple(Split(s) for s in self.splits)
        features = np.array(self.features, dtype=float)
        if features.ndim != 2 or features.shape[1] < 1:
            raise DataValidationError(f"特征矩阵必须是二维且维度D>=1,当前形状为{features.shape}")
        if not (len(ids) == len(labels) == len(splits) == features.shape[0]):
            raise DataValidationError("样本id、标签、划分和特征的数量不一致")
        if not np.all(np.isfinite(features)):
            row = int(np.argwhere(~np.isfinite(features))[0][0])
            raise DataValidationError(f"样本 {ids[row]} 含有非有限特征值")
        for sample_id, label in zip(ids, labels):
            if label not in self.classes:
                raise DataValidationError(f"样本 {sample_id} 的标签 {label!r} 不在类别集合中")
        seen = set()
        for sample_id, split in zip(ids, splits):
            if (sample_id, split) in seen:
                raise DataValidationError(f"样本id在{split.value}划分中重复: {sample_id}")
            seen.add((sample_id, split))
        features.setflags(write=False)
        object.__setattr__(self, 'ids', ids)
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, 'splits', splits)
        object.__setattr__(self, 'features', features)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def label_indices(self) -> np.ndarray:
        """每个样本标签在规范顺序中的下标"""
        return np.array([self.classes.index(label) for label in self.labels], dtype=int)

    def select(self, positions) -> "LabeledFeatureSet":
        positions = np.asarray(positions, dtype=int)
        return LabeledFeatureSet(
            classes=self.classes,
            ids=tuple(self.ids[p] for p in positions),
            labels=tuple(self.labels[p] for p in positions),
            features=self.features[positions].reshape(len(positions), self.dim),
            splits=tuple(self.splits[p] for p in positions),
        )

    def subset(self, *splits) -> "LabeledFeatureSet":
        """取出指定划分的样本"""
        wanted = {Split(s) for s in splits}
        return self.select([p for p, s in enumerate(self.splits) if s in wanted])

    def restrict_to(self, labels: Iterable[str]) -> "LabeledFeatureSet":
        wanted = set(labels)
        return self.select([p for p, label in enumerate(self.labels) if label in wanted])

    def class_counts(self) -> dict:
        counts = {label: 0 for label in self.classes}
        for label in self.labels:
            counts[label] += 1
        return counts

    def require_unique_ids(self):
        if len(set(self.ids)) != len(self.ids):
            seen, duplicated = set(), None
            for sample_id in self.ids:
                if sample_id in seen:
                    duplicated = sample_id
                    break
                seen.add(sample_id)
            raise DataValidationError(f"评估集中样本id重复出现在多个划分中: {duplicated}")


@dataclass(frozen=True, eq=False)
class PredictionTable:
    """
    分类器输出表

    scores的行索引为样本id;
    ovr/multi 模式的列为类别标签,pairwise 模式的列为 (c_i, c_j) 二元组,
    分数表示 c_j 相对于 c_i 的置信度。缺失值用NaN表示。
    """
    mode: PredictionMode
    classes: ClassSet
    scores: pd.DataFrame
    true_labels: Optional[pd.Series] = None

    def __post_init__(self):
        mode = PredictionMode(self.mode)
        object.__setattr__(self, 'mode', mode)
        scores = self.scores
        if not scores.index.is_unique:
            duplicated = scores.index[scores.index.duplicated()][0]
            raise DataValidationError(f"预测表中样本id重复: {duplicated}")
        if mode is PredictionMode.PAIRWISE:
            for pair in scores.columns:
                if not isinstance(pair, tuple) or len(pair) != 2:
                    raise DataValidationError(f"pairwise模式的列必须是类别对: {pair!r}")
                if pair[0] == pair[1]:
                    raise DataValidationError(f"类别对的两个类别相同: {pair!r}")
                for label in pair:
                    self.classes.index(label)
        else:
            for label in scores.columns:
                self.classes.index(label)
            ordered = [label for label in self.classes if label in scores.columns]
            scores = scores[ordered]
        values = scores.to_numpy(dtype=float)
        present = ~np.isnan(values)
        if np.any(np.isinf(values)):
            raise DataValidationError("预测分数含有无穷值")
        bad = present & ((values < 0.0) | (values > 1.0))
        if np.any(bad):
            row, col = np.argwhere(bad)[0]
            raise DataValidationError(
                f"分数超出[0,1]范围: 样本 {scores.index[row]}, 列 {scores.columns[col]!r}, 值 {values[row, col]!r}"
            )
        if mode is PredictionMode.MULTI:
            missing = [label for label in self.classes if label not in scores.columns]
            if missing or not np.all(present):
                raise DataValidationError(f"multi模式要求每个样本给出完整的概率向量,缺少: {missing or '部分分数'}")
            tolerance = SIMILARITY_CONFIG["multi_sum_tolerance"]
            sums = values.sum(axis=1)
            off = np.abs(sums - 1.0) > tolerance
            if np.any(off):
                row = int(np.argmax(off))
                raise DataValidationError(f"样本 {scores.index[row]} 的概率向量之和为 {sums[row]!r},不等于1")
        object.__setattr__(self, 'scores', scores)

    def sample_ids(self) -> List[str]:
        return [str(i) for i in self.scores.index]


@dataclass(frozen=True, eq=False)
class ConfusionCounts:
    """
    误分类计数

    matrix[i, j] = N_{c_j|c_i} (i != j);multi模式下对角线为预测正确的样本数,
    其余模式对角线为0。totals[i] = N_{c_i}。
    """
    classes: ClassSet
    mode: PredictionMode
    matrix: np.ndarray
    totals: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=np.int64)
        totals = np.array(self.totals, dtype=np.int64)
        size = len(self.classes)
        if matrix.shape != (size, size) or totals.shape != (size,):
            raise DataValidationError("计数矩阵维度与类别数不一致")
        if np.any(matrix < 0) or np.any(totals < 0):
            raise DataValidationError("误分类计数不能为负")
        off_diagonal = matrix.copy()
        np.fill_diagonal(off_diagonal, 0)
        over = off_diagonal > totals[:, None]
        if np.any(over):
            i, j = np.argwhere(over)[0]
            raise DataValidationError(
                f"N({self.classes.labels[j]}|{self.classes.labels[i]})={matrix[i, j]} 超过 N({self.classes.labels[i]})={totals[i]}"
            )
        if PredictionMode(self.mode) is PredictionMode.MULTI:
            if np.any(matrix.sum(axis=1) != totals):
                raise DataValidationError("multi模式下每个类别的预测计数之和必须等于该类样本数")
        elif np.any(np.diag(matrix) != 0):
            raise DataValidationError("非multi模式的计数矩阵对角线必须为0")
        matrix.setflags(write=False)
        totals.setflags(write=False)
        object.__setattr__(self, 'mode', PredictionMode(self.mode))
        object.__setattr__(self, 'matrix', matrix)
        object.__setattr__(self, 'totals', totals)

    def n(self, c_i: str, c_j: str) -> int:
        """N_{c_j|c_i}"""
        return int(self.matrix[self.classes.index(c_i), self.classes.index(c_j)])

    def total(self, c_i: str) -> int:
        return int(self.totals[self.classes.index(c_i)])

    def predicted_row(self, c_i: str) -> dict:
        """c_i 样本被预测为各类别的数量(multi模式含正确预测)"""
        row = self.matrix[self.classes.index(c_i)]
        return {label: int(row[k]) for k, label in enumerate(self.classes)}


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """
    对称的 |C|×|C| 矩阵

    distance=False 时为ClassSim相似度,取值[0,1],对角线为1.0;
    distance=True 时为距离(例如PD),取值非负,对角线为0.0,越小越相似。
    """
    classes: ClassSet
    values: np.ndarray
    distance: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        size = len(self.classes)
        if values.shape != (size, size):
            raise DataValidationError(f"矩阵形状{values.shape}与类别数{size}不一致")
        if not np.all(np.isfinite(values)):
            raise DataValidationError("矩阵含有非有限值")
        if not np.array_equal(values, values.T):
            raise DataValidationError("矩阵不对称")
        diagonal = 0.0 if self.distance else 1.0
        if not np.all(np.diag(values) == diagonal):
            raise DataValidationError(f"矩阵对角线必须为{diagonal}")
        if np.any(values < 0.0) or (not self.distance and np.any(values > 1.0)):
            raise DataValidationError("矩阵取值超出范围")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    def value(self, c_i: str, c_j: str) -> float:
        return float(self.values[self.classes.index(c_i), self.classes.index(c_j)])

    def to_frame(self) -> pd.DataFrame:
        labels = list(self.classes)
        return pd.DataFrame(self.values, index=labels, columns=labels)


def _require_mode(preds: PredictionTable, mode: PredictionMode):
    if preds.mode is not mode:
        raise DataValidationError(f"需要{mode.value}模式的预测表,实际为{preds.mode.value}")


def _require_same_classes(eval_set: LabeledFeatureSet, preds: PredictionTable):
    if eval_set.classes != preds.classes:
        raise DataValidationError("评估集与预测表的类别集合不一致")


def _class_totals(eval_set: LabeledFeatureSet) -> np.ndarray:
    counts = eval_set.class_counts()
    empty = [label for label, count in counts.items() if count == 0]
    if empty:
        raise DataValidationError(f"评估集中以下类别没有样本: {empty}")
    return np.array([counts[label] for label in eval_set.classes], dtype=np.int64)


def _aligned_scores(eval_set: LabeledFeatureSet, preds: PredictionTable, columns) -> np.ndarray:
    """按评估集样本顺序取出指定列的分数,缺失时报出具体的(样本, 列)"""
    eval_set.require_unique_ids()
    for column in columns:
        if column not in preds.scores.columns:
            sample_id = eval_set.ids[0] if eval_set.ids else '?'
            raise DataValidationError(f"缺少分数: 样本 {sample_id}, 目标 {column!r}")
    frame = preds.scores.reindex(index=list(eval_set.ids))
    values = np.column_stack([frame[column].to_numpy(dtype=float) for column in columns]) \
        if columns else np.empty((len(eval_set), 0))
    missing = np.isnan(values)
    if np.any(missing):
        row, col = np.argwhere(missing)[0]
        raise DataValidationError(f"缺少分数: 样本 {eval_set.ids[row]}, 目标 {columns[col]!r}")
    return values


def count_misclass_ovr(eval_set: LabeledFeatureSet, preds: PredictionTable,
                       threshold: Optional[float] = None) -> ConfusionCounts:
    """
    OVR分类器计数: N_{c_j|c_i} 为标注为c_i且 f_{c_j,other} 分数严格大于阈值的样本数
    """
    _require_mode(preds, PredictionMode.OVR)
    _require_same_classes(eval_set, preds)
    threshold = SIMILARITY_CONFIG["ovr_threshold"] if threshold is None else threshold
    totals = _class_totals(eval_set)
    values = _aligned_scores(eval_set, preds, list(eval_set.classes))
    fired = (values > threshold).astype(np.int64)
    matrix = np.zeros((len(eval_set.classes),) * 2, dtype=np.int64)
    np.add.at(matrix, eval_set.label_indices(), fired)
    np.fill_diagonal(matrix, 0)
    return ConfusionCounts(eval_set.classes, PredictionMode.OVR, matrix, totals)


def count_misclass_multi(eval_set: LabeledFeatureSet, preds: PredictionTable) -> ConfusionCounts:
    """
    多分类器计数: N_{c_j|c_i} 为标注为c_i且 argmax 为c_j的样本数,
    并列最大值取规范顺序中靠前的类别
    """
    _require_mode(preds, PredictionMode.MULTI)
    _require_same_classes(eval_set, preds)
    totals = _class_totals(eval_set)
    values = _aligned_scores(eval_set, preds, list(eval_set.classes))
    predicted = np.argmax(values, axis=1)
    matrix = np.zeros((len(eval_set.classes),) * 2, dtype=np.int64)
    np.add.at(matrix, (eval_set.label_indices(), predicted), 1)
    return ConfusionCounts(eval_set.classes, PredictionMode.MULTI, matrix, totals)


def _count_pair_oriented(eval_set, preds, c_i, c_j, threshold):
    labels = np.array(eval_set.labels, dtype=object)
    totals = {}
    for label in (c_i, c_j):
        totals[label] = int(np.sum(labels == label))
        if totals[label] == 0:
            raise DataValidationError(f"评估集中类别 {label!r} 没有样本")
    subset = eval_set.select(np.flatnonzero((labels == c_i) | (labels == c_j)))
    scores = _aligned_scores(subset, preds, [(c_i, c_j)])[:, 0]
    sub_labels = np.array(subset.labels, dtype=object)
    n_j_given_i = int(np.sum(scores[sub_labels == c_i] > threshold))
    n_i_given_j = int(np.sum(scores[sub_labels == c_j] <= threshold))
    return n_j_given_i, n_i_given_j


def count_misclass_pairwise(eval_set: LabeledFeatureSet, preds: PredictionTable,
                            pair: Tuple[str, str], threshold: Optional[float] = None) -> Tuple[int, int]:
    """
    成对二分类器计数,一个分类器同时服务于类别对的两个方向

    分数 s(x) 为c_j相对于c_i的置信度:
    N_{c_j|c_i} 统计 s > 0.5 的c_i样本, N_{c_i|c_j} 统计 s <= 0.5 的c_j样本。
    预测表中只有 (c_j, c_i) 方向时按对称方式换算。

    Returns:
        tuple: (N_{c_j|c_i}, N_{c_i|c_j})
    """
    _require_mode(preds, PredictionMode.PAIRWISE)
    _require_same_classes(eval_set, preds)
    c_i, c_j = pair
    if c_i == c_j:
        raise DataValidationError(f"类别对的两个类别相同: {pair!r}")
    eval_set.classes.index(c_i)
    eval_set.classes.index(c_j)
    threshold = SIMILARITY_CONFIG["ovr_threshold"] if threshold is None else threshold
    columns = preds.scores.columns
    if (c_i, c_j) in columns:
        return _count_pair_oriented(eval_set, preds, c_i, c_j, threshold)
    if (c_j, c_i) in columns:
        n_i_given_j, n_j_given_i = _count_pair_oriented(eval_set, preds, c_j, c_i, threshold)
        return n_j_given_i, n_i_given_j
    raise DataValidationError(f"预测表中缺少类别对 {pair!r} 的分类器分数")


def count_misclass_pairwise_all(eval_set: LabeledFeatureSet, preds: PredictionTable,
                                max_workers: Optional[int] = None,
                                threshold: Optional[float] = None) -> ConfusionCounts:
    """对所有无序类别对计数,按规范顺序合并结果"""
    eval_set.classes.require_pairs()
    totals = _class_totals(eval_set)
    pairs = eval_set.classes.pairs()
    max_workers = max_workers or THREAD_POOL_CONFIG["max_workers"]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        results = list(executor.map(
            lambda pair: count_misclass_pairwise(eval_set, preds, pair, threshold), pairs
        ))
    matrix = np.zeros((len(eval_set.classes),) * 2, dtype=np.int64)
    for (c_i, c_j), (n_j_given_i, n_i_given_j) in zip(pairs, results):
        i, j = eval_set.classes.index(c_i), eval_set.classes.index(c_j)
        matrix[i, j] = n_j_given_i
        matrix[j, i] = n_i_given_j
    return ConfusionCounts(eval_set.classes, PredictionMode.PAIRWISE, matrix, totals)


def count_misclass(eval_set: LabeledFeatureSet, preds: PredictionTable,
                   max_workers: Optional[int] = None) -> ConfusionCounts:
    """按预测表模式分派到对应的计数方式"""
    if preds.mode is PredictionMode.OVR:
        return count_misclass_ovr(eval_set, preds)
    if preds.mode is PredictionMode.MULTI:
        return count_misclass_multi(eval_set, preds)
    return count_misclass_pairwise_all(eval_set, preds, max_workers=max_workers)


def class_sim(counts: ConfusionCounts, c_i: str, c_j: str) -> float:
    """ClassSim(c_i, c_j) = 1/2 (N_{c_j|c_i}/N_{c_i} + N_{c_i|c_j}/N_{c_j})"""
    i, j = counts.classes.index(c_i), counts.classes.index(c_j)
    if i == j:
        raise DataValidationError(f"ClassSim只对不同类别定义: {c_i!r}")
    # 两个方向使用同一求值顺序,保证逐位对称
    if i > j:
        i, j = j, i
    n_i, n_j = int(counts.totals[i]), int(counts.totals[j])
    if n_i == 0 or n_j == 0:
        raise DataValidationError(f"类别 {counts.classes.labels[i if n_i == 0 else j]!r} 样本数为0")
    return 0.5 * (int(counts.matrix[i, j]) / n_i + int(counts.matrix[j, i]) / n_j)


def similarity_matrix(counts: ConfusionCounts, classes: Optional[ClassSet] = None) -> SimilarityMatrix:
    """对每个无序类别对计算一次ClassSim并镜像到矩阵两侧,对角线为1.0"""
    classes = classes or counts.classes
    if classes != counts.classes:
        raise DataValidationError("计数与类别集合不一致")
    classes.require_pairs()
    values = np.eye(len(classes))
    for c_i, c_j in classes.pairs():
        i, j = classes.index(c_i), classes.index(c_j)
        values[i, j] = values[j, i] = class_sim(counts, c_i, c_j)
    return SimilarityMatrix(classes, values)


def ranking(matrix: SimilarityMatrix, target: str) -> List[Tuple[str, float]]:
    """目标类别所在行的非对角元素,相似度降序(距离升序),并列按字典序"""
    t = matrix.classes.index(target)
    entries = [(label, float(matrix.values[t, k])) for k, label in enumerate(matrix.classes) if k != t]
    if matrix.distance:
        return sorted(entries, key=lambda e: (e[1], e[0].encode('utf-8')))
    return sorted(entries, key=lambda e: (-e[1], e[0].encode('utf-8')))


def top_k(matrix: SimilarityMatrix, target: str, k: Optional[int] = None) -> List[Tuple[str, float]]:
    k = SIMILARITY_CONFIG["top_k"] if k is None else k
    if not 1 <= k <= len(matrix.classes) - 1:
        raise DataValidationError(f"k必须在1到{len(matrix.classes) - 1}之间,当前为{k}")
    return ranking(matrix, target)[:k]


def merge_candidates(matrix: SimilarityMatrix, threshold: float) -> List[Tuple[str, str, float]]:
    """ClassSim严格大于阈值的类别对,可作为合并类别的候选"""
    if matrix.distance:
        raise DataValidationError("合并候选只适用于相似度矩阵")
    candidates = []
    for c_i, c_j in matrix.classes.pairs():
        value = matrix.value(c_i, c_j)
        if value > threshold:
            candidates.append((c_i, c_j, value))
    return sorted(candidates, key=lambda c: (-c[2], c[0].encode('utf-8'), c[1].encode('utf-8')))


def mean_similarity(matrix: SimilarityMatrix, pairs: Optional[Sequence[Tuple[str, str]]] = None) -> float:
    pairs = matrix.classes.pairs() if pairs is None else list(pairs)
    if not pairs:
        raise DataValidationError("没有可以求平均的类别对")
    return float(np.mean([matrix.value(c_i, c_j) for c_i, c_j in pairs]))


def check_reserved_labels(labels: Iterable[str]):
    """标签none保留给路由的拒识结果"""
    if NONE_LABEL in set(labels):
        raise DataValidationError(f"标签 {NONE_LABEL!r} 为保留标签,不能作为类别")


def stratified_splits(labels: Sequence[str], classes: ClassSet, seed: int,
                      ratios: Optional[dict] = None) -> Tuple[Split, ...]:
    """
    按类别分层的确定性划分

    每个类别独立打乱(随机流由 (seed, 类别下标) 决定),
    取 round(n×test) 个作为测试集、round(n×validation) 个作为验证集,其余为训练集。
    """
    ratios = ratios or SPLIT_CONFIG
    labels = np.array(labels, dtype=object)
    splits = np.empty(len(labels), dtype=object)
    for index, label in enumerate(classes):
        positions = np.flatnonzero(labels == label)
        if positions.size == 0:
            continue
        rng = np.random.default_rng([seed, index, 1])
        shuffled = positions[rng.permutation(positions.size)]
        n_test = int(round(positions.size * ratios["test"]))
        n_validation = int(round(positions.size * ratios["validation"]))
        splits[shuffled[:n_test]] = Split.TEST
        splits[shuffled[n_test:n_test + n_validation]] = Split.VALIDATION
        splits[shuffled[n_test + n_validation:]] = Split.TRAIN
    return tuple(splits)
