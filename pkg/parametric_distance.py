"""
参数距离(PD)基线

每个类别用单个对角高斯的矩(均值、标准差)描述,
PD = Σ_d [(μ_i,d − μ_j,d)² + (σ_i,d − σ_j,d)²]。
PD不归一化,越小越相似,不同行之间的数值不可直接比较。
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from class_similarity import LabeledFeatureSet, SimilarityMatrix
from config import THREAD_POOL_CONFIG
from utils import DataValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ClassMoments:
    label: str
    mean: np.ndarray
    std: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        std = np.array(self.std, dtype=float).reshape(-1)
        if mean.shape != std.shape:
            raise DataValidationError(f"类别 {self.label!r} 的均值与标准差维度不一致")
        if self.count < 2:
            raise DataValidationError(f"类别 {self.label!r} 至少需要2个样本才能计算标准差,当前为{self.count}")
        if np.any(std < 0) or not np.all(np.isfinite(std)):
            raise DataValidationError(f"类别 {self.label!r} 的标准差无效")
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'std', std)

    @property
    def dim(self) -> int:
        return self.mean.size


def class_moments(feature_set: LabeledFeatureSet) -> Dict[str, ClassMoments]:
    """按类别分组计算均值和样本标准差(ddof=1)"""
    columns = [f"f{d}" for d in range(feature_set.dim)]
    frame = pd.DataFrame(feature_set.features, columns=columns)
    frame["label"] = list(feature_set.labels)
    grouped = frame.groupby("label", sort=False)[columns]
    means, stds, sizes = grouped.mean(), grouped.std(ddof=1), grouped.size()
    moments = {}
    for label in feature_set.classes:
        if label not in sizes.index:
            raise DataValidationError(f"类别 {label!r} 没有样本")
        moments[label] = ClassMoments(label, means.loc[label].to_numpy(), stds.loc[label].to_numpy(),
                                      int(sizes.loc[label]))
    return moments


def parametric_distance(m_i: ClassMoments, m_j: ClassMoments) -> float:
    if m_i.dim != m_j.dim:
        raise DataValidationError(f"特征维度不匹配: {m_i.label}={m_i.dim}, {m_j.label}={m_j.dim}")
    return float(np.sum((m_i.mean - m_j.mean) ** 2) + np.sum((m_i.std - m_j.std) ** 2))


def pd_matrix(feature_set: LabeledFeatureSet, max_workers: Optional[int] = None) -> SimilarityMatrix:
    """PD距离矩阵,对角线为0"""
    classes = feature_set.classes
    classes.require_pairs()
    moments = class_moments(feature_set)
    pairs = classes.pairs()
    max_workers = max_workers or THREAD_POOL_CONFIG["max_workers"]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        distances = list(executor.map(lambda pair: parametric_distance(moments[pair[0]], moments[pair[1]]), pairs))
    values = np.zeros((len(classes), len(classes)))
    for (c_i, c_j), distance in zip(pairs, distances):
        i, j = classes.index(c_i), classes.index(c_j)
        values[i, j] = values[j, i] = distance
    logger.info(f"PD矩阵计算完成: {len(classes)}个类别, {len(pairs)}个类别对")
    return SimilarityMatrix(classes, values, distance=True)


def rank_correlation(similarity: SimilarityMatrix, distance: SimilarityMatrix) -> pd.Series:
    """
    逐行比较两种排序: ClassSim与−PD的Spearman相关系数

    行内取值全部相同时相关系数无定义,记为NaN。
    """
    if similarity.classes != distance.classes:
        raise DataValidationError("两个矩阵的类别集合不一致")
    if similarity.distance or not distance.distance:
        raise DataValidationError("需要一个相似度矩阵和一个距离矩阵")
    size = len(similarity.classes)
    if size < 3:
        raise DataValidationError("每行至少需要2个非对角元素才能计算秩相关")
    result = {}
    for t, label in enumerate(similarity.classes):
        mask = np.arange(size) != t
        left, right = similarity.values[t, mask], -distance.values[t, mask]
        if np.ptp(left) == 0 or np.ptp(right) == 0:
            result[label] = float('nan')
            continue
        rho, _ = spearmanr(left, right)
        result[label] = float(rho)
    return pd.Series(result, name="spearman")
