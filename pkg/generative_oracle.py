"""
生成模型oracle

类条件密度已知的合成场景: 对角协方差高斯(1维/2维)与有限离散分布。
提供精确的交叠面积、理想贝叶斯二分类器、确定性采样,
以及经验ClassSim与精确交叠面积的对照验证。
"""
import logging
import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional

import numpy as np
import pandas as pd
from scipy import integrate
from scipy.special import softmax
from scipy.stats import norm
from tqdm import tqdm

from class_similarity import (
    ClassSet,
    LabeledFeatureSet,
    PredictionMode,
    PredictionTable,
    SimilarityMatrix,
    Split,
    check_reserved_labels,
    count_misclass,
    count_misclass_pairwise_all,
    similarity_matrix,
    stratified_splits,
)
from config import ORACLE_CONFIG, THREAD_POOL_CONFIG
from linear_classifiers import TrainConfig, predict, predict_ovr_all, train_multi, train_ovr_all
from utils import DataValidationError, progress_disabled

logger = logging.getLogger(__name__)

SUM_TOLERANCE = 1e-12


class Family(str, Enum):
    GAUSSIAN = "gaussian"
    DISCRETE = "discrete"


class Sampling(str, Enum):
    FIXED = "fixed"
    PRIOR = "prior"


class OracleMode(str, Enum):
    IDEAL = "ideal"
    OVR = "ovr"
    MULTI = "multi"


@dataclass(frozen=True, eq=False)
class GaussianDensity:
    """对角协方差高斯"""
    mean: np.ndarray
    var: np.ndarray
    family = Family.GAUSSIAN

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        var = np.array(self.var, dtype=float).reshape(-1)
        if mean.shape != var.shape or mean.size == 0:
            raise DataValidationError(f"均值与方差维度不一致: {mean.shape} vs {var.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise DataValidationError("高斯参数必须是有限值")
        if np.any(var <= 0):
            raise DataValidationError(f"方差必须为正: {var.tolist()}")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'var', var)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def logpdf(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        return norm.logpdf(X, loc=self.mean, scale=self.std).sum(axis=1)

    def pdf(self, X) -> np.ndarray:
        return np.exp(self.logpdf(X))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(self.mean, self.std, size=(n, self.dim))

    def rescaled(self, scale, shift) -> "GaussianDensity":
        return GaussianDensity(self.mean * scale + shift, self.var * scale ** 2)

    def same_as(self, other) -> bool:
        return (isinstance(other, GaussianDensity) and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.var, other.var))


@dataclass(frozen=True, eq=False)
class DiscreteDensity:
    """有限支撑点上的离散分布,probs之和为1"""
    support: np.ndarray
    probs: np.ndarray
    family = Family.DISCRETE

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float).reshape(-1)
        support = np.array(self.support, dtype=float)
        if support.ndim == 1:
            support = support.reshape(-1, 1)
        if support.ndim != 2 or support.shape[0] != probs.size or probs.size == 0:
            raise DataValidationError(f"支撑点数量与概率数量不一致: {support.shape} vs {probs.shape}")
        if np.any(probs < 0) or abs(math.fsum(probs) - 1.0) > SUM_TOLERANCE:
            raise DataValidationError(f"离散分布的概率必须非负且和为1: 当前和为{math.fsum(probs)!r}")
        points = [tuple(row) for row in support]
        if len(set(points)) != len(points):
            raise DataValidationError("离散分布的支撑点重复")
        support.setflags(write=False)
        probs.setflags(write=False)
        object.__setattr__(self, 'support', support)
        object.__setattr__(self, 'probs', probs)
        object.__setattr__(self, '_lookup', dict(zip(points, probs.tolist())))

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    def pdf(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(-1, self.dim)
        return np.array([self._lookup.get(tuple(row), 0.0) for row in X])

    def logpdf(self, X) -> np.ndarray:
        with np.errstate(divide='ignore'):
            return np.log(self.pdf(X))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.support[rng.choice(self.probs.size, size=n, p=self.probs)]

    def rescaled(self, scale, shift) -> "DiscreteDensity":
        return DiscreteDensity(self.support * scale + shift, self.probs)

    def same_as(self, other) -> bool:
        return isinstance(other, DiscreteDensity) and self._lookup == other._lookup


@dataclass(frozen=True, eq=False)
class Scenario:
    classes: ClassSet
    components: Dict[str, object]
    priors: Dict[str, float]
    seed: int
    samples_per_class: int
    annotation_noise: float = 0.0
    sampling: Sampling = Sampling.FIXED
    name: str = "scenario"

    def __post_init__(self):
        check_reserved_labels(self.classes)
        if set(self.components) != set(self.classes):
            raise DataValidationError("每个类别必须恰好有一个密度定义")
        dims = {self.components[label].dim for label in self.classes}
        if len(dims) != 1:
            raise DataValidationError(f"所有类别的特征维度必须一致: {sorted(dims)}")
        if set(self.priors) != set(self.classes):
            raise DataValidationError("先验必须覆盖所有类别")
        values = [float(self.priors[label]) for label in self.classes]
        if any(v <= 0 for v in values) or abs(math.fsum(values) - 1.0) > SUM_TOLERANCE:
            raise DataValidationError(f"先验必须为正且和为1: 当前和为{math.fsum(values)!r}")
        if not (isinstance(self.seed, int) and 0 <= self.seed < 2 ** 64):
            raise DataValidationError(f"seed必须是64位无符号整数: {self.seed!r}")
        if not (isinstance(self.samples_per_class, int) and self.samples_per_class >= 1):
            raise DataValidationError(f"samples_per_class必须为正整数: {self.samples_per_class!r}")
        if not 0.0 <= self.annotation_noise <= 1.0:
            raise DataValidationError(f"annotation_noise必须在[0,1]内: {self.annotation_noise}")
        object.__setattr__(self, 'sampling', Sampling(self.sampling))
        object.__setattr__(self, 'priors', {label: float(self.priors[label]) for label in self.classes})

    @property
    def dim(self) -> int:
        return self.components[self.classes.labels[0]].dim

    @property
    def equal_priors(self) -> bool:
        values = list(self.priors.values())
        return max(values) - min(values) <= SUM_TOLERANCE

    def log_joint(self, X) -> np.ndarray:
        """(N, |C|) 的 log p(x|c) + log p(c)"""
        return np.column_stack([
            self.components[label].logpdf(X) + math.log(self.priors[label]) for label in self.classes
        ])


def _parse_component(label, spec) -> object:
    if not isinstance(spec, dict):
        raise DataValidationError(f"类别 {label!r} 的密度定义必须是表: {spec!r}")
    try:
        family = Family(spec.get("family", "gaussian"))
    except ValueError:
        raise DataValidationError(f"类别 {label!r} 的密度族不受支持: {spec.get('family')!r}") from None
    try:
        if family is Family.GAUSSIAN:
            return GaussianDensity(spec["mean"], spec["var"])
        return DiscreteDensity(spec["support"], spec["probs"])
    except KeyError as e:
        raise DataValidationError(f"类别 {label!r} 的密度定义缺少字段 {e}") from None
    except DataValidationError:
        raise
    except (TypeError, ValueError) as e:
        raise DataValidationError(f"类别 {label!r} 的密度参数无效: {e}") from None


def load_scenario(path) -> Scenario:
    """
    读取TOML场景文件

    顶层键: seed, samples_per_class, annotation_noise(默认0), sampling(fixed/prior)
    [priors]: 可选,默认均匀先验
    [classes.<name>]: family = "gaussian"(mean, var)或"discrete"(support, probs)
    """
    try:
        with open(path, 'rb') as f:
            document = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise DataValidationError(f"场景文件 {path} 解析失败: {e}") from None
    classes_spec = document.get("classes")
    if not classes_spec or not isinstance(classes_spec, dict):
        raise DataValidationError(f"场景文件 {path} 中没有[classes]定义")
    classes = ClassSet(tuple(classes_spec))
    components = {label: _parse_component(label, classes_spec[label]) for label in classes}
    priors = document.get("priors") or {label: 1.0 / len(classes) for label in classes}
    try:
        return Scenario(
            classes=classes,
            components=components,
            priors=priors,
            seed=document["seed"],
            samples_per_class=document["samples_per_class"],
            annotation_noise=float(document.get("annotation_noise", 0.0)),
            sampling=document.get("sampling", "fixed"),
            name=os.path.splitext(os.path.basename(path))[0],
        )
    except KeyError as e:
        raise DataValidationError(f"场景文件 {path} 缺少字段 {e}") from None
    except (TypeError, ValueError) as e:
        if isinstance(e, DataValidationError):
            raise
        raise DataValidationError(f"场景文件 {path} 取值错误: {e}") from None


def rescale_scenario(scenario: Scenario, scale, shift=0.0) -> Scenario:
    """对每个维度做一致的单调仿射变换 x -> scale*x + shift (scale > 0)"""
    scale = np.broadcast_to(np.asarray(scale, dtype=float), (scenario.dim,))
    shift = np.broadcast_to(np.asarray(shift, dtype=float), (scenario.dim,))
    if np.any(scale <= 0):
        raise DataValidationError("缩放系数必须为正")
    components = {label: density.rescaled(scale, shift) for label, density in scenario.components.items()}
    return Scenario(scenario.classes, components, dict(scenario.priors), scenario.seed,
                    scenario.samples_per_class, scenario.annotation_noise, scenario.sampling,
                    f"{scenario.name}_rescaled")


def _crossings_1d(a: GaussianDensity, b: GaussianDensity, d: int = 0, offset: float = 0.0):
    """第d维上 log a_d(x) - log b_d(x) = offset 的点, offset=0 即两个一维密度相等"""
    m1, s1 = a.mean[d], a.std[d]
    m2, s2 = b.mean[d], b.std[d]
    coefficients = [
        1 / (2 * s1 ** 2) - 1 / (2 * s2 ** 2),
        m2 / s2 ** 2 - m1 / s1 ** 2,
        m1 ** 2 / (2 * s1 ** 2) - m2 ** 2 / (2 * s2 ** 2) - np.log(s2 / s1) + offset,
    ]
    return sorted(float(r.real) for r in np.roots(coefficients) if abs(r.imag) < 1e-12)


def _bounds(a: GaussianDensity, b: GaussianDensity, d: int):
    span = ORACLE_CONFIG["sigma_span"]
    lo = min(a.mean[d] - span * a.std[d], b.mean[d] - span * b.std[d])
    hi = max(a.mean[d] + span * a.std[d], b.mean[d] + span * b.std[d])
    return float(lo), float(hi)


def _log_ratio(a: GaussianDensity, b: GaussianDensity, d: int, x: float) -> float:
    """log a_d(x) - log b_d(x)"""
    m1, s1 = float(a.mean[d]), float(a.std[d])
    m2, s2 = float(b.mean[d]), float(b.std[d])
    return 0.5 * ((x - m2) / s2) ** 2 - 0.5 * ((x - m1) / s1) ** 2 + math.log(s2 / s1)


def _scalar_pdf(density: GaussianDensity):
    mean, std = density.mean.tolist(), density.std.tolist()
    norms = [1.0 / (s * math.sqrt(2.0 * math.pi)) for s in std]

    def pdf(*xs):
        return math.prod(c * math.exp(-0.5 * ((x - m) / s) ** 2) for x, m, s, c in zip(xs, mean, std, norms))
    return pdf


def _gaussian_overlap_quadrature(a: GaussianDensity, b: GaussianDensity) -> float:
    tolerance = ORACLE_CONFIG["quad_abs_tol"]
    pdf_a, pdf_b = _scalar_pdf(a), _scalar_pdf(b)
    if a.dim == 1:
        lo, hi = _bounds(a, b, 0)
        points = [x for x in _crossings_1d(a, b) if lo < x < hi]
        value, _ = integrate.quad(
            lambda x: min(pdf_a(x), pdf_b(x)), lo, hi,
            points=points or None, epsabs=tolerance, limit=200,
        )
        return value
    if a.dim == 2:
        x_lo, x_hi = _bounds(a, b, 0)
        y_lo, y_hi = _bounds(a, b, 1)

        def slice_overlap(x):
            # 固定x后, min的转折点是 log a_1(y) - log b_1(y) = log b_0(x) - log a_0(x) 的根
            offset = _log_ratio(b, a, 0, x)
            points = [y for y in _crossings_1d(a, b, 1, offset) if y_lo < y < y_hi]
            value, _ = integrate.quad(
                lambda y: min(pdf_a(x, y), pdf_b(x, y)), y_lo, y_hi,
                points=points or None, epsabs=tolerance, limit=200,
            )
            return value

        x_points = [x for x in _crossings_1d(a, b) if x_lo < x < x_hi]
        value, _ = integrate.quad(slice_overlap, x_lo, x_hi, points=x_points or None, epsabs=tolerance, limit=200)
        return value
    raise DataValidationError(f"不支持{a.dim}维高斯的数值积分,只支持1维和2维")


def _gaussian_overlap_closed_form(a: GaussianDensity, b: GaussianDensity) -> float:
    """协方差相同时交叠面积为 2Φ(-Δ/2), Δ为马氏距离"""
    delta = math.sqrt(float(np.sum((a.mean - b.mean) ** 2 / a.var)))
    return float(2.0 * norm.cdf(-delta / 2.0))


def exact_intersection(scenario: Scenario, c_i: str, c_j: str, method: str = "auto") -> float:
    """
    交叠面积 ∫ min(p(x|c_i), p(x|c_j)) dx

    Args:
        method: auto 在协方差相同时使用闭式解;quadrature 强制数值积分

    Raises:
        DataValidationError: 密度族不同或维度不受支持
    """
    scenario.classes.index(c_i)
    scenario.classes.index(c_j)
    a, b = scenario.components[c_i], scenario.components[c_j]
    if a.family is not b.family:
        raise DataValidationError(f"不支持不同密度族之间的交叠面积: {c_i}={a.family.value}, {c_j}={b.family.value}")
    if a.same_as(b):
        return 1.0
    if a.family is Family.DISCRETE:
        points = set(a._lookup) | set(b._lookup)
        value = math.fsum(min(a._lookup.get(p, 0.0), b._lookup.get(p, 0.0)) for p in points)
    elif method == "auto" and np.array_equal(a.var, b.var):
        value = _gaussian_overlap_closed_form(a, b)
    else:
        value = _gaussian_overlap_quadrature(a, b)
    return min(1.0, max(0.0, value))


def exact_area_matrix(scenario: Scenario, max_workers: Optional[int] = None) -> SimilarityMatrix:
    """所有类别对的精确交叠面积,对角线为1.0"""
    pairs = scenario.classes.pairs()
    max_workers = max_workers or THREAD_POOL_CONFIG["max_workers"]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        areas = list(tqdm(executor.map(lambda pair: exact_intersection(scenario, *pair), pairs),
                          total=len(pairs), desc="计算交叠面积", disable=progress_disabled()))
    values = np.eye(len(scenario.classes))
    for (c_i, c_j), area in zip(pairs, areas):
        i, j = scenario.classes.index(c_i), scenario.classes.index(c_j)
        values[i, j] = values[j, i] = area
    return SimilarityMatrix(scenario.classes, values)


def ideal_decisions(scenario: Scenario, c_i: str, c_j: str, X) -> np.ndarray:
    """理想贝叶斯二分类器的批量形式: p(x|c_j)p(c_j) > p(x|c_i)p(c_i) 时为1,相等时为0"""
    scenario.classes.index(c_i)
    scenario.classes.index(c_j)
    log_i = scenario.components[c_i].logpdf(X) + math.log(scenario.priors[c_i])
    log_j = scenario.components[c_j].logpdf(X) + math.log(scenario.priors[c_j])
    return (log_j > log_i).astype(int)


def ideal_binary_classifier(scenario: Scenario, c_i: str, c_j: str, x) -> int:
    return int(ideal_decisions(scenario, c_i, c_j, np.asarray(x, dtype=float).reshape(1, -1))[0])


def ideal_prediction_table(scenario: Scenario, eval_set: LabeledFeatureSet) -> PredictionTable:
    """每个规范类别对一列,取值为理想分类器的0/1判定"""
    pairs = scenario.classes.pairs()
    values = np.column_stack([
        ideal_decisions(scenario, c_i, c_j, eval_set.features).astype(float) for c_i, c_j in pairs
    ])
    frame = pd.DataFrame(values, index=pd.Index(eval_set.ids, name="id"),
                         columns=pd.MultiIndex.from_tuples(pairs))
    return PredictionTable(PredictionMode.PAIRWISE, scenario.classes, frame)


def _class_counts(scenario: Scenario) -> Dict[str, int]:
    """fixed: 每类samples_per_class个;prior: 总数按先验最大余数法分配"""
    if scenario.sampling is Sampling.FIXED:
        return {label: scenario.samples_per_class for label in scenario.classes}
    total = scenario.samples_per_class * len(scenario.classes)
    quotas = {label: scenario.priors[label] * total for label in scenario.classes}
    counts = {label: int(math.floor(q)) for label, q in quotas.items()}
    remainder = total - sum(counts.values())
    by_fraction = sorted(scenario.classes, key=lambda c: (-(quotas[c] - counts[c]), c.encode('utf-8')))
    for label in by_fraction[:remainder]:
        counts[label] += 1
    return counts


def _annotate(scenario: Scenario, X, latent: str, rng: np.random.Generator) -> np.ndarray:
    labels = np.full(X.shape[0], latent, dtype=object)
    if scenario.annotation_noise <= 0 or X.shape[0] == 0:
        return labels
    redraw = rng.random(X.shape[0]) < scenario.annotation_noise
    if redraw.any():
        posterior = softmax(scenario.log_joint(X[redraw]), axis=1)
        u = rng.random(int(redraw.sum()))
        chosen = (np.cumsum(posterior, axis=1) < u[:, None]).sum(axis=1)
        chosen = np.minimum(chosen, len(scenario.classes) - 1)
        labels[redraw] = np.array(scenario.classes.labels, dtype=object)[chosen]
    return labels


def sample(scenario: Scenario) -> LabeledFeatureSet:
    """
    确定性采样,每个类别使用由 (seed, 类别下标) 派生的独立随机流

    annotation_noise=ε 时,每个样本以概率ε按后验 p(c|x) 重新抽取标注标签。
    返回的集合带有按默认比例分层的划分。
    """
    counts = _class_counts(scenario)
    blocks, ids, labels = [], [], []
    flipped = 0
    for index, label in enumerate(scenario.classes):
        rng = np.random.default_rng([scenario.seed, index])
        X = scenario.components[label].sample(rng, counts[label])
        annotated = _annotate(scenario, X, label, rng)
        flipped += int(np.sum(annotated != label))
        blocks.append(X)
        ids.extend(f"{label}_{k:05d}" for k in range(counts[label]))
        labels.extend(annotated.tolist())
    if flipped:
        logger.info(f"标注噪声改变了{flipped}个样本的标签")
    features = np.vstack(blocks)
    splits = stratified_splits(labels, scenario.classes, scenario.seed)
    return LabeledFeatureSet(scenario.classes, tuple(ids), tuple(labels), features, splits)


def validate_classim(scenario: Scenario, mode, config: Optional[TrainConfig] = None,
                     max_workers: Optional[int] = None) -> pd.DataFrame:
    """
    经验ClassSim与精确交叠面积的对照

    ideal模式在全部样本上使用理想贝叶斯成对分类器;
    ovr/multi模式在训练集上训练线性分类器、在测试集上计数。
    偏差为 2·ClassSim − 交叠面积,标准误界为各方向比例二项标准误合成后的倍数。

    Returns:
        pd.DataFrame: 每个规范类别对一行
    """
    mode = OracleMode(mode)
    config = config or TrainConfig()
    dataset = sample(scenario)
    if mode is OracleMode.IDEAL:
        if not scenario.equal_priors:
            logger.warning("先验不相等,理想模式下的ClassSim与交叠面积不再等价,报告不给出误差界判定")
        eval_set = dataset
        counts = count_misclass_pairwise_all(eval_set, ideal_prediction_table(scenario, eval_set),
                                             max_workers=max_workers)
    else:
        train, eval_set = dataset.subset(Split.TRAIN), dataset.subset(Split.TEST)
        if mode is OracleMode.OVR:
            preds = predict_ovr_all(train_ovr_all(train, config, max_workers=max_workers), eval_set)
        else:
            preds = predict(train_multi(train, train.classes, config), eval_set)
        counts = count_misclass(eval_set, preds, max_workers=max_workers)
    matrix = similarity_matrix(counts)
    areas = exact_area_matrix(scenario, max_workers=max_workers)
    multiplier = ORACLE_CONFIG["se_multiplier"]
    rows = []
    for c_i, c_j in scenario.classes.pairs():
        n_i, n_j = counts.total(c_i), counts.total(c_j)
        p_ji = counts.n(c_i, c_j) / n_i
        p_ij = counts.n(c_j, c_i) / n_j
        se = math.sqrt(p_ji * (1 - p_ji) / n_i + p_ij * (1 - p_ij) / n_j)
        value = matrix.value(c_i, c_j)
        exact = areas.value(c_i, c_j)
        deviation = 2.0 * value - exact
        bound = multiplier * se
        rows.append({
            "c_i": c_i,
            "c_j": c_j,
            "mode": mode.value,
            "class_sim": value,
            "empirical": 2.0 * value,
            "exact": exact,
            "deviation": deviation,
            "se_bound": bound,
            "within_bound": bool(abs(deviation) <= bound) if mode is OracleMode.IDEAL and scenario.equal_priors else None,
            "equal_priors": scenario.equal_priors,
            "n_i": n_i,
            "n_j": n_j,
        })
    report = pd.DataFrame(rows)
    logger.info(f"场景 {scenario.name} ({mode.value}): {len(rows)}个类别对, 最大偏差 {report['deviation'].abs().max():.5f}")
    return report
