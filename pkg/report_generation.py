"""
报告生成模块

相似类排行表("类别:分数",保留3位小数)、两级模型准确率报告、
oracle验证报告、对比表和可选的热力图。
"""
import logging
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Optional

import pandas as pd

from class_similarity import SimilarityMatrix, ranking, top_k
from config import NONE_LABEL, OUTPUT_CONFIG

logger = logging.getLogger(__name__)

RULE = "═" * 78
THIN_RULE = "─" * 56
QUANTUM = Decimal(1).scaleb(-OUTPUT_CONFIG["human_decimals"])


def format_score(value: float) -> str:
    """3位小数,银行家舍入,基于最短十进制表示"""
    return str(Decimal(repr(float(value))).quantize(QUANTUM, rounding=ROUND_HALF_EVEN))


def format_entry(label: str, value: float) -> str:
    return f"{label}:{format_score(value)}"


def _banner(title: str) -> str:
    return f"╔{RULE}\n║ {title}\n╚{RULE}\n"


def top_k_frame(matrix: SimilarityMatrix, k: Optional[int] = None, full: bool = False) -> pd.DataFrame:
    """每个类别一行,第n列为排名第n的 "类别:分数";full=True 时给出完整排行"""
    rows = []
    for target in matrix.classes:
        entries = ranking(matrix, target) if full else top_k(matrix, target, k)
        row = {"class": target}
        row.update({f"top{n}": format_entry(label, value) for n, (label, value) in enumerate(entries, 1)})
        rows.append(row)
    return pd.DataFrame(rows)


def render_top_k(matrix: SimilarityMatrix, k: Optional[int] = None, full: bool = False,
                 title: Optional[str] = None) -> str:
    frame = top_k_frame(matrix, k, full)
    kind = "距离(升序)" if matrix.distance else "相似度(降序)"
    title = title or f"相似类排行 - {kind}"
    lines = [_banner(title)]
    width = max(len(label) for label in matrix.classes)
    for _, row in frame.iterrows():
        cells = [row[column] for column in frame.columns if column != "class"]
        lines.append(f"{row['class']:<{width}} │ " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def side_by_side_frame(left: SimilarityMatrix, right: SimilarityMatrix, k: Optional[int] = None,
                       full: bool = False, names=("left", "right"),
                       correlation: Optional[pd.Series] = None) -> pd.DataFrame:
    """两种矩阵的排行并排,可附加逐行秩相关"""
    left_frame = top_k_frame(left, k, full).set_index("class")
    right_frame = top_k_frame(right, k, full).set_index("class")
    left_frame.columns = [f"{names[0]}_{c}" for c in left_frame.columns]
    right_frame.columns = [f"{names[1]}_{c}" for c in right_frame.columns]
    frame = left_frame.join(right_frame)
    if correlation is not None:
        frame["spearman"] = correlation.reindex(frame.index)
    return frame.reset_index()


def render_side_by_side(frame: pd.DataFrame, names, summary: dict) -> str:
    lines = [_banner(f"排行对比 - {names[0]} vs {names[1]}")]
    for _, row in frame.iterrows():
        lines.append(f"【{row['class']}】")
        for name in names:
            cells = [row[c] for c in frame.columns if c.startswith(f"{name}_top") and isinstance(row[c], str)]
            lines.append(f"  {name:<10}: " + "  ".join(cells))
        if "spearman" in frame.columns:
            rho = row["spearman"]
            lines.append(f"  {'spearman':<10}: {'n/a' if pd.isna(rho) else format_score(rho)}")
    if summary:
        lines.append(THIN_RULE)
        for key, value in summary.items():
            text = format_score(value) if isinstance(value, float) else str(value)
            lines.append(f"{key}: {text}")
    return "\n".join(lines) + "\n"


def accuracy_frame(*reports) -> pd.DataFrame:
    return pd.DataFrame([{
        "router": report.router,
        "accuracy": report.accuracy,
        "correct": report.correct,
        "total": report.total,
        NONE_LABEL: report.none_count,
    } for report in reports])


def per_class_frame(*reports) -> pd.DataFrame:
    labels = list(reports[0].per_class_recall)
    frame = pd.DataFrame({"class": labels})
    for report in reports:
        frame[report.router] = [report.per_class_recall[label] for label in labels]
    return frame


def render_accuracy(baseline, two_level, changes: pd.DataFrame) -> str:
    """准确率对比报告(纯文本)"""
    improved = int((changes["change"] == "improved").sum()) if len(changes) else 0
    degraded = int((changes["change"] == "degraded").sum()) if len(changes) else 0
    lines = [
        _banner("两级模型评估报告"),
        "【准确率】",
        THIN_RULE,
        f"{'模型':<12}{'准确率':>10}{'正确/总数':>16}{NONE_LABEL:>8}",
    ]
    for report in (baseline, two_level):
        lines.append(f"{report.router:<12}{format_score(report.accuracy):>10}"
                     f"{f'{report.correct}/{report.total}':>16}{report.none_count:>8}")
    lines.append(f"变化: {format_score(two_level.accuracy - baseline.accuracy)} "
                 f"(改善{improved}个, 变差{degraded}个)")
    lines += ["", "【各类别召回率】", THIN_RULE]
    for label in baseline.per_class_recall:
        lines.append(f"{label:<16}{format_score(baseline.per_class_recall[label]):>10}"
                     f"{format_score(two_level.per_class_recall[label]):>10}")
    return "\n".join(lines) + "\n"


def render_validation(report: pd.DataFrame, scenario_name: str) -> str:
    lines = [_banner(f"ClassSim 验证报告 - 场景 {scenario_name} ({report['mode'].iloc[0]})")]
    lines.append(f"{'类别对':<20}{'2·ClassSim':>12}{'交叠面积':>12}{'偏差':>10}{'误差界':>10}  结论")
    for _, row in report.iterrows():
        verdict = {True: "通过", False: "超出"}.get(row["within_bound"], "-")
        lines.append(f"{row['c_i'] + '/' + row['c_j']:<20}{format_score(row['empirical']):>12}"
                     f"{format_score(row['exact']):>12}{format_score(row['deviation']):>10}"
                     f"{format_score(row['se_bound']):>10}  {verdict}")
    if not bool(report["equal_priors"].iloc[0]):
        lines.append("注意: 先验不相等,不对偏差做误差界判定")
    return "\n".join(lines) + "\n"


def save_heatmap(matrix: SimilarityMatrix, path, title: Optional[str] = None):
    """相似度热力图,不属于主输出"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import seaborn as sns

    size = max(4.0, 0.6 * len(matrix.classes) + 2)
    fig, ax = plt.subplots(figsize=(size, size * 0.85))
    sns.heatmap(matrix.to_frame(), annot=len(matrix.classes) <= 16, fmt=".3f",
                cmap="mako_r" if matrix.distance else "rocket_r", square=True, ax=ax)
    ax.set_title(title or ("PD" if matrix.distance else "ClassSim"))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    logger.info(f"热力图已保存到 {path}")
