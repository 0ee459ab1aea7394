"""
数据读写模块

特征CSV、预测JSONL、矩阵CSV/JSON的读写,运行清单和输出目录锁。
机器可读输出统一使用17位有效数字。
"""
import io
import json
import logging
import math
import os
import platform
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np
import pandas as pd

from class_similarity import (
    ClassSet,
    LabeledFeatureSet,
    PredictionMode,
    PredictionTable,
    SimilarityMatrix,
    Split,
    check_reserved_labels,
    stratified_splits,
)
from config import OUTPUT_CONFIG, VERSION
from utils import DataValidationError, UsageError, retry_on_exception, sha256_digest

logger = logging.getLogger(__name__)

FLOAT_FORMAT = f"%.{OUTPUT_CONFIG['machine_digits']}g"
LOCK_NAME = ".classim.lock"
MANIFEST_NAME = "manifest.json"


def _to_float(token: str) -> float:
    try:
        return float(token)
    except (TypeError, ValueError):
        return float('nan')


def ingest_features(path, seed: int = 0, ratios: Optional[dict] = None) -> LabeledFeatureSet:
    """
    读取特征CSV

    表头为 id,label,f0..f{D-1},可选split列。没有split列时按类别分层、
    以seed确定性地划分为训练/验证/测试集。

    Raises:
        DataValidationError: 空文件、行字段数不一致、id重复、未知划分、非有限特征、保留标签none,
            错误信息带行号
    """
    if not os.path.exists(path):
        raise DataValidationError(f"特征文件不存在: {path}")
    if os.path.getsize(path) == 0:
        raise DataValidationError(f"特征文件为空: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"特征文件为空: {path}") from None
    except pd.errors.ParserError as e:
        raise DataValidationError(f"{path}: 行字段数不一致: {e}") from None
    columns = list(frame.columns)
    if columns[:2] != ["id", "label"]:
        raise DataValidationError(f"{path}:1: 表头必须以 id,label 开头")
    feature_columns = [c for c in columns[2:] if c != "split"]
    if not feature_columns or feature_columns != [f"f{d}" for d in range(len(feature_columns))]:
        raise DataValidationError(f"{path}:1: 特征列必须依次为 f0..f{{D-1}}")
    if len(frame) == 0:
        raise DataValidationError(f"特征文件没有样本: {path}")

    features = np.column_stack([frame[c].map(_to_float).to_numpy(dtype=float) for c in feature_columns])
    seen = {}
    for row, (sample_id, label) in enumerate(zip(frame["id"], frame["label"])):
        line = row + 2
        if not isinstance(sample_id, str) or not sample_id:
            raise DataValidationError(f"{path}:{line}: id为空")
        if sample_id in seen:
            raise DataValidationError(f"{path}:{line}: id {sample_id!r} 与第{seen[sample_id]}行重复")
        seen[sample_id] = line
        if not isinstance(label, str) or not label:
            raise DataValidationError(f"{path}:{line}: 标签为空")
        try:
            check_reserved_labels([label])
        except DataValidationError as e:
            raise DataValidationError(f"{path}:{line}: {e}") from None
        if not np.all(np.isfinite(features[row])):
            raise DataValidationError(f"{path}:{line}: 特征值缺失、不是数字或不是有限值")

    labels = tuple(frame["label"])
    classes = ClassSet.from_labels(labels)
    if "split" in frame.columns:
        splits = []
        for row, tag in enumerate(frame["split"]):
            try:
                splits.append(Split(tag))
            except ValueError:
                raise DataValidationError(f"{path}:{row + 2}: 未知的划分标记 {tag!r}") from None
        splits = tuple(splits)
    else:
        splits = stratified_splits(labels, classes, seed, ratios)
        logger.info(f"特征文件没有split列,按种子{seed}分层划分")
    feature_set = LabeledFeatureSet(classes, tuple(frame["id"]), labels, features, splits)
    logger.info(f"读取特征文件 {path}: {len(feature_set)}个样本, {len(classes)}个类别, D={feature_set.dim}")
    return feature_set


def write_features(feature_set: LabeledFeatureSet, path, include_split: bool = True):
    frame = pd.DataFrame(feature_set.features, columns=[f"f{d}" for d in range(feature_set.dim)])
    frame.insert(0, "label", list(feature_set.labels))
    frame.insert(0, "id", list(feature_set.ids))
    if include_split:
        frame["split"] = [split.value for split in feature_set.splits]
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def _score(value, location):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DataValidationError(f"{location}: score必须是数字")
    value = float(value)
    if not math.isfinite(value) or not 0.0 <= value <= 1.0:
        raise DataValidationError(f"{location}: score {value!r} 不在[0,1]内")
    return value


def _label(value, classes: Optional[ClassSet], location, field_name):
    if not isinstance(value, str) or not value:
        raise DataValidationError(f"{location}: {field_name}必须是非空字符串")
    if classes is not None and value not in classes:
        raise DataValidationError(f"{location}: {field_name} {value!r} 不在类别集合中")
    return value


def ingest_predictions(path, mode, classes: Optional[ClassSet] = None) -> PredictionTable:
    """
    读取预测JSONL,每行一条记录

    ovr:      {"id","true_label","target","score"}
    multi:    {"id","true_label","scores":{类别:概率}}
    pairwise: {"id","true_label","pair":[c_i,c_j],"score"},score为c_j相对c_i的置信度

    Raises:
        DataValidationError: JSON格式错误、分数越界、覆盖不完整,错误信息带行号
    """
    mode = PredictionMode(mode)
    rows: Dict[str, dict] = {}
    true_labels: Dict[str, str] = {}
    first_line: Dict[str, int] = {}
    with open(path, 'r', encoding='utf-8') as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            location = f"{path}:{line_number}"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataValidationError(f"{location}: JSON格式错误: {e.msg}") from None
            if not isinstance(record, dict):
                raise DataValidationError(f"{location}: 每行必须是一个JSON对象")
            if "id" not in record or isinstance(record["id"], (bool, dict, list)) or record["id"] is None:
                raise DataValidationError(f"{location}: 缺少id")
            sample_id = str(record["id"])
            true_label = _label(record.get("true_label"), classes, location, "true_label")
            if true_labels.setdefault(sample_id, true_label) != true_label:
                raise DataValidationError(f"{location}: 样本 {sample_id} 的true_label与之前的记录不一致")
            first_line.setdefault(sample_id, line_number)
            scores = rows.setdefault(sample_id, {})
            if mode is PredictionMode.OVR:
                target = _label(record.get("target"), classes, location, "target")
                if target in scores:
                    raise DataValidationError(f"{location}: 样本 {sample_id} 的目标 {target!r} 重复")
                scores[target] = _score(record.get("score"), location)
            elif mode is PredictionMode.PAIRWISE:
                pair = record.get("pair")
                if not isinstance(pair, list) or len(pair) != 2:
                    raise DataValidationError(f"{location}: pair必须是两个类别组成的数组")
                pair = tuple(_label(label, classes, location, "pair") for label in pair)
                if pair[0] == pair[1]:
                    raise DataValidationError(f"{location}: pair的两个类别相同")
                if pair in scores or pair[::-1] in scores:
                    raise DataValidationError(f"{location}: 样本 {sample_id} 的类别对 {list(pair)} 重复")
                scores[pair] = _score(record.get("score"), location)
            else:
                if sample_id in first_line and first_line[sample_id] != line_number:
                    raise DataValidationError(f"{location}: 样本 {sample_id} 重复")
                values = record.get("scores")
                if not isinstance(values, dict) or not values:
                    raise DataValidationError(f"{location}: scores必须是类别到概率的对象")
                for label, value in values.items():
                    scores[_label(label, classes, location, "scores")] = _score(value, location)
    if not rows:
        raise DataValidationError(f"预测文件为空: {path}")

    classes = classes or ClassSet.from_labels(
        list(true_labels.values()) + [label for scores in rows.values() for key in scores
                                      for label in (key if isinstance(key, tuple) else (key,))]
    )
    _check_coverage(path, mode, classes, rows, true_labels, first_line)
    ids = list(rows)
    if mode is PredictionMode.PAIRWISE:
        columns = sorted({key for scores in rows.values() for key in scores},
                         key=lambda p: (p[0].encode('utf-8'), p[1].encode('utf-8')))
        reversed_pairs = [pair for pair in columns if pair[::-1] in set(columns)]
        if reversed_pairs:
            raise DataValidationError(f"{path}: 类别对 {list(reversed_pairs[0])} 在不同记录中方向不一致")
        frame = pd.DataFrame([[rows[i].get(c, np.nan) for c in columns] for i in ids],
                             index=pd.Index(ids, name="id"), columns=pd.MultiIndex.from_tuples(columns))
    else:
        frame = pd.DataFrame([[rows[i].get(c, np.nan) for c in classes] for i in ids],
                             index=pd.Index(ids, name="id"), columns=list(classes))
    try:
        table = PredictionTable(mode, classes, frame, pd.Series(true_labels, name="true_label"))
    except DataValidationError as e:
        raise DataValidationError(f"{path}: {e}") from None
    logger.info(f"读取预测文件 {path}: {mode.value}模式, {len(ids)}个样本")
    return table


def _check_coverage(path, mode, classes, rows, true_labels, first_line):
    for sample_id, scores in rows.items():
        location = f"{path}:{first_line[sample_id]}"
        if mode is PredictionMode.OVR:
            missing = [label for label in classes if label not in scores]
            if missing:
                raise DataValidationError(f"{location}: 样本 {sample_id} 缺少目标 {missing} 的分数")
        elif mode is PredictionMode.PAIRWISE:
            truth = true_labels[sample_id]
            missing = [other for other in classes if other != truth
                       and (truth, other) not in scores and (other, truth) not in scores]
            if missing:
                raise DataValidationError(f"{location}: 样本 {sample_id} 缺少与 {missing} 的类别对分数")
        else:
            missing = [label for label in classes if label not in scores]
            if missing:
                raise DataValidationError(f"{location}: 样本 {sample_id} 的概率向量缺少 {missing}")


def align_predictions(feature_set: LabeledFeatureSet, preds: PredictionTable) -> LabeledFeatureSet:
    """预测表引用的特征行组成评估集,并核对true_label"""
    feature_set.require_unique_ids()
    position = {sample_id: p for p, sample_id in enumerate(feature_set.ids)}
    selected = []
    for sample_id in preds.sample_ids():
        if sample_id not in position:
            raise DataValidationError(f"预测中的样本 {sample_id} 不在特征文件中")
        p = position[sample_id]
        if preds.true_labels is not None and preds.true_labels[sample_id] != feature_set.labels[p]:
            raise DataValidationError(
                f"样本 {sample_id} 的true_label {preds.true_labels[sample_id]!r} 与特征文件中的 {feature_set.labels[p]!r} 不一致"
            )
        selected.append(p)
    eval_set = feature_set.select(selected)
    if eval_set.classes != preds.classes:
        eval_set = LabeledFeatureSet(preds.classes, eval_set.ids, eval_set.labels,
                                     eval_set.features, eval_set.splits)
    return eval_set


def write_predictions(preds: PredictionTable, eval_set: LabeledFeatureSet, path):
    """按读取格式写出预测,样本顺序与评估集一致"""
    truth = dict(zip(eval_set.ids, eval_set.labels))
    frame = preds.scores.reindex(index=list(eval_set.ids))
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for sample_id, row in frame.iterrows():
            base = {"id": sample_id, "true_label": truth[sample_id]}
            if preds.mode is PredictionMode.MULTI:
                records = [{**base, "scores": {label: float(row[label]) for label in frame.columns}}]
            elif preds.mode is PredictionMode.OVR:
                records = [{**base, "target": label, "score": float(row[label])}
                           for label in frame.columns if not np.isnan(row[label])]
            else:
                records = [{**base, "pair": list(pair), "score": float(row[pair])}
                           for pair in frame.columns if not np.isnan(row[pair])]
            for record in records:
                f.write(json.dumps(record, ensure_ascii=False) + "\n")


def _metric_name(matrix: SimilarityMatrix, metric: Optional[str]) -> str:
    return metric or ("pd" if matrix.distance else "classsim")


def write_matrix(matrix: SimilarityMatrix, path, fmt: str = "csv", metric: Optional[str] = None):
    """
    csv: 首行 "# metric=<名称> distance=<true|false>",随后为 class,<类别...> 表头和各行数值
    json: {"metric","distance","classes","values"}
    """
    metric = _metric_name(matrix, metric)
    if fmt == "json":
        document = {"metric": metric, "distance": matrix.distance, "classes": list(matrix.classes),
                    "values": matrix.values.tolist()}
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(document, f, ensure_ascii=False, indent=2)
            f.write("\n")
        return
    buffer = io.StringIO()
    buffer.write(f"# metric={metric} distance={'true' if matrix.distance else 'false'}\n")
    matrix.to_frame().to_csv(buffer, float_format=FLOAT_FORMAT, index_label="class", lineterminator="\n")
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(buffer.getvalue())


def _parse_flags(first_line: str, path) -> dict:
    if not first_line.startswith("#"):
        raise DataValidationError(f"{path}:1: 矩阵文件首行必须是 '# metric=... distance=...'")
    flags = {}
    for token in first_line[1:].split():
        key, _, value = token.partition("=")
        flags[key] = value
    if flags.get("distance") not in ("true", "false"):
        raise DataValidationError(f"{path}:1: distance标记必须是true或false")
    return flags


def read_matrix(path) -> SimilarityMatrix:
    """读取write_matrix写出的CSV或JSON矩阵"""
    if not os.path.exists(path):
        raise DataValidationError(f"矩阵文件不存在: {path}")
    if str(path).endswith(".json"):
        with open(path, 'r', encoding='utf-8') as f:
            try:
                document = json.load(f)
            except json.JSONDecodeError as e:
                raise DataValidationError(f"{path}: JSON格式错误: {e}") from None
        try:
            labels = [str(label) for label in document["classes"]]
            values = np.array(document["values"], dtype=float)
            distance = document["distance"]
        except (KeyError, TypeError, ValueError) as e:
            raise DataValidationError(f"{path}: 矩阵文档无效: {type(e).__name__} {e}") from None
        if not isinstance(distance, bool):
            raise DataValidationError(f"{path}: distance必须是true或false")
        classes = ClassSet(tuple(labels))
        if list(classes) != labels:
            raise DataValidationError(f"{path}: 类别必须按规范顺序排列")
        return SimilarityMatrix(classes, values, distance)
    with open(path, 'r', encoding='utf-8') as f:
        flags = _parse_flags(f.readline().rstrip("\n"), path)
    try:
        frame = pd.read_csv(path, skiprows=1, index_col=0, dtype={"class": str},
                            keep_default_na=False, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataValidationError(f"{path}: 矩阵解析失败: {e}") from None
    labels = [str(label) for label in frame.index]
    if labels != [str(c) for c in frame.columns]:
        raise DataValidationError(f"{path}: 行列类别不一致")
    classes = ClassSet(tuple(labels))
    if list(classes) != labels:
        raise DataValidationError(f"{path}: 类别必须按规范顺序排列")
    try:
        values = frame.to_numpy(dtype=float)
    except ValueError as e:
        raise DataValidationError(f"{path}: 矩阵含有非数字: {e}") from None
    return SimilarityMatrix(classes, values, distance=flags["distance"] == "true")


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"无法序列化的类型: {type(value).__name__}")


def write_table(frame: pd.DataFrame, path, fmt: str = "csv"):
    """报告类表格: csv 使用17位有效数字, json 为记录数组"""
    if fmt == "json":
        records = frame.astype(object).where(frame.notna(), None).to_dict(orient="records")
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(records, f, ensure_ascii=False, indent=2, default=_json_default)
            f.write("\n")
        return
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


@dataclass
class RunManifest:
    command: str
    seed: int
    config: dict
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    version: str = VERSION
    python: str = platform.python_version()
    wall_time: float = 0.0

    def add_input(self, path):
        self.inputs[os.path.basename(path)] = sha256_digest(path)

    def add_output(self, out_dir, name):
        self.outputs[name] = sha256_digest(os.path.join(out_dir, name))

    def write(self, out_dir):
        with open(os.path.join(out_dir, MANIFEST_NAME), 'w', encoding='utf-8') as f:
            json.dump(asdict(self), f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")


class OutputLock:
    """输出目录的排他锁,目录内存在锁文件时重试,最终失败视为用法错误"""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, LOCK_NAME)
        self._fd = None

    def __enter__(self):
        @retry_on_exception(retries=OUTPUT_CONFIG["lock_retries"], delay=OUTPUT_CONFIG["lock_delay"],
                            exceptions=(FileExistsError,))
        def acquire():
            return os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)

        try:
            self._fd = acquire()
        except FileExistsError:
            raise UsageError(f"输出目录正被另一个进程写入: {self.path}") from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, exc_type, exc, tb):
        os.close(self._fd)
        os.remove(self.path)
        return False
