"""
classim 命令行入口

子命令:
    sim             计算ClassSim矩阵和相似类排行
    pd              计算参数距离矩阵
    twolevel build  根据ClassSim矩阵构建两级模型
    twolevel eval   比较基线路由与两级路由的测试准确率
    oracle run      在已知密度的合成场景上验证ClassSim
    oracle sample   把合成场景导出为特征CSV
    compare         两个矩阵的排行对比
"""
import argparse
import logging
import os
import sys
import time
from dataclasses import replace

from class_similarity import (
    PredictionMode,
    Split,
    count_misclass,
    mean_similarity,
    merge_candidates,
    similarity_matrix,
)
from config import OUTPUT_CONFIG, SIMILARITY_CONFIG, TWO_LEVEL_CONFIG, VERSION
from data_io import (
    OutputLock,
    RunManifest,
    align_predictions,
    ingest_features,
    ingest_predictions,
    read_matrix,
    write_features,
    write_matrix,
    write_predictions,
    write_table,
)
from generative_oracle import exact_area_matrix, load_scenario, sample, validate_classim
from linear_classifiers import (
    TrainConfig,
    predict,
    predict_ovr_all,
    predict_pairwise_all,
    train_multi,
    train_ovr_all,
    train_pairwise_all,
)
from parametric_distance import pd_matrix, rank_correlation
from report_generation import (
    accuracy_frame,
    per_class_frame,
    render_accuracy,
    render_side_by_side,
    render_top_k,
    render_validation,
    save_heatmap,
    side_by_side_frame,
    top_k_frame,
)
from two_level_model import (
    build_two_level,
    compare_routers,
    evaluate,
    load_order_file,
    load_two_level,
    save_two_level,
    select_similar,
)
from utils import ClassimError, DataValidationError, UsageError, log_section, setup_logging

logger = logging.getLogger(__name__)


class ClassimArgumentParser(argparse.ArgumentParser):
    """参数错误抛出UsageError,由main统一输出单行错误"""

    def error(self, message):
        raise UsageError(message)


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要正整数: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"需要正整数: {text!r}")
    return value


def _seed(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed必须是整数: {text!r}") from None
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed必须是64位无符号整数: {text!r}")
    return value


def _add_global_flags(parser, suppress=False):
    default = (lambda value: argparse.SUPPRESS) if suppress else (lambda value: value)
    parser.add_argument("--seed", type=_seed, default=default(None), help="随机种子(划分与训练)")
    parser.add_argument("--threads", type=_positive_int, default=default(None), help="并行线程数")
    parser.add_argument("--format", choices=["csv", "json"], default=default(OUTPUT_CONFIG["format"]),
                        help="机器可读输出格式")


def _train_config(args) -> TrainConfig:
    config = TrainConfig.from_toml(args.train_config) if getattr(args, "train_config", None) else TrainConfig()
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def _split_seed(args) -> int:
    return args.seed if args.seed is not None else 0


def _finish(out_dir, manifest: RunManifest, outputs, started):
    for name in outputs:
        manifest.add_output(out_dir, name)
    manifest.wall_time = round(time.time() - started, 3)
    manifest.write(out_dir)
    logger.info(f"结果已保存到 {out_dir}")


def _top_k(args, classes) -> int:
    """未指定--top-k时取默认值,类别数不足时截到|C|-1"""
    if args.top_k is not None:
        return args.top_k
    return max(1, min(SIMILARITY_CONFIG["top_k"], len(classes) - 1))


def _write_ranking(out_dir, matrix, args, fmt, outputs):
    k = _top_k(args, matrix.classes)
    matrix_name = f"{'distance' if matrix.distance else 'similarity'}.{fmt}"
    write_matrix(matrix, os.path.join(out_dir, matrix_name), fmt)
    write_table(top_k_frame(matrix, k), os.path.join(out_dir, f"top_k.{fmt}"), fmt)
    text = render_top_k(matrix, k)
    with open(os.path.join(out_dir, "top_k.txt"), 'w', encoding='utf-8') as f:
        f.write(text)
    outputs += [matrix_name, f"top_k.{fmt}", "top_k.txt"]
    return text


def compute_predictions(mode: PredictionMode, train, eval_set, config: TrainConfig, threads=None):
    """在训练集上训练内置线性分类器,并对评估集打分"""
    if mode is PredictionMode.PAIRWISE:
        return predict_pairwise_all(train_pairwise_all(train, config, max_workers=threads), eval_set)
    if mode is PredictionMode.OVR:
        return predict_ovr_all(train_ovr_all(train, config, max_workers=threads), eval_set)
    return predict(train_multi(train, train.classes, config), eval_set)


def run_sim(args) -> int:
    if args.predictions and args.train_config:
        raise UsageError("--predictions 与 --train-config 不能同时使用")
    started = time.time()
    mode = PredictionMode(args.mode)
    os.makedirs(args.out_dir, exist_ok=True)
    with OutputLock(args.out_dir):
        log_section("读取数据")
        features = ingest_features(args.features, seed=_split_seed(args))
        manifest = RunManifest(command="sim", seed=_split_seed(args),
                               config={"mode": mode.value, "top_k": _top_k(args, features.classes)})
        manifest.add_input(args.features)
        if args.predictions:
            preds = ingest_predictions(args.predictions, mode, features.classes)
            eval_set = align_predictions(features, preds)
            manifest.add_input(args.predictions)
            manifest.config["eval_split"] = "predictions"
        else:
            config = _train_config(args)
            manifest.config.update({"train": config.to_dict(), "eval_split": Split.VALIDATION.value})
            log_section("训练分类器")
            train, eval_set = features.subset(Split.TRAIN), features.subset(Split.VALIDATION)
            preds = compute_predictions(mode, train, eval_set, config, args.threads)
        log_section("计算ClassSim")
        matrix = similarity_matrix(count_misclass(eval_set, preds, max_workers=args.threads))
        outputs = []
        write_predictions(preds, eval_set, os.path.join(args.out_dir, "predictions.jsonl"))
        outputs.append("predictions.jsonl")
        print(_write_ranking(args.out_dir, matrix, args, args.format, outputs))
        if args.heatmap:
            save_heatmap(matrix, os.path.join(args.out_dir, "heatmap.png"))
        _finish(args.out_dir, manifest, outputs, started)
    return 0


def run_pd(args) -> int:
    started = time.time()
    os.makedirs(args.out_dir, exist_ok=True)
    with OutputLock(args.out_dir):
        features = ingest_features(args.features, seed=_split_seed(args))
        manifest = RunManifest(command="pd", seed=_split_seed(args),
                               config={"top_k": _top_k(args, features.classes)})
        manifest.add_input(args.features)
        log_section("计算参数距离")
        matrix = pd_matrix(features, max_workers=args.threads)
        outputs = []
        print(_write_ranking(args.out_dir, matrix, args, args.format, outputs))
        _finish(args.out_dir, manifest, outputs, started)
    return 0


def run_twolevel_build(args) -> int:
    started = time.time()
    os.makedirs(args.out_dir, exist_ok=True)
    with OutputLock(args.out_dir):
        features = ingest_features(args.features, seed=_split_seed(args))
        matrix = read_matrix(args.sim)
        if matrix.classes != features.classes:
            raise DataValidationError("相似度矩阵与特征文件的类别集合不一致")
        order = load_order_file(args.order_file, features.classes) if args.order_file else None
        config = _train_config(args)
        manifest = RunManifest(command="twolevel build", seed=_split_seed(args), config={
            "threshold": args.threshold, "train": config.to_dict(), "order": list(order or features.classes),
        })
        for path in filter(None, [args.features, args.sim, args.order_file]):
            manifest.add_input(path)
        sets = select_similar(matrix, args.threshold)
        for label, members in sets.sets.items():
            logger.info(f"C_sim({label}) = {list(members)}")
        log_section("训练两级模型")
        model = build_two_level(features.subset(Split.TRAIN), sets, config,
                                second_train=features.subset(Split.TRAIN, Split.VALIDATION),
                                order=order, max_workers=args.threads)
        outputs = save_two_level(model, args.out_dir)
        _finish(args.out_dir, manifest, outputs, started)
        print(f"两级模型: {len(model.first_level)}个第一级分类器, {len(model.second_level)}个第二级分类器")
    return 0


def run_twolevel_eval(args) -> int:
    started = time.time()
    out_dir = args.out_dir or os.path.join(args.model_dir, "eval")
    os.makedirs(out_dir, exist_ok=True)
    with OutputLock(out_dir):
        model = load_two_level(args.model_dir)
        features = ingest_features(args.features, seed=_split_seed(args))
        if features.classes != model.classes:
            raise DataValidationError("特征文件与模型的类别集合不一致")
        test = features.subset(Split.TEST)
        manifest = RunManifest(command="twolevel eval", seed=_split_seed(args),
                               config={"model_dir": os.path.basename(os.path.normpath(args.model_dir))})
        manifest.add_input(args.features)
        log_section("评估")
        baseline = evaluate(model.baseline(), test, max_workers=args.threads)
        two_level = evaluate(model, test, max_workers=args.threads)
        changes = compare_routers(baseline, two_level)
        fmt = args.format
        tables = {
            f"accuracy.{fmt}": accuracy_frame(baseline, two_level),
            f"per_class.{fmt}": per_class_frame(baseline, two_level),
            f"confusion_baseline.{fmt}": baseline.confusion.reset_index(),
            f"confusion_two_level.{fmt}": two_level.confusion.reset_index(),
            f"improved.{fmt}": changes,
        }
        for name, frame in tables.items():
            write_table(frame, os.path.join(out_dir, name), fmt)
        text = render_accuracy(baseline, two_level, changes)
        with open(os.path.join(out_dir, "accuracy.txt"), 'w', encoding='utf-8') as f:
            f.write(text)
        print(text)
        _finish(out_dir, manifest, [*tables, "accuracy.txt"], started)
    return 0


def _load_scenario(args):
    scenario = load_scenario(args.scenario)
    return replace(scenario, seed=args.seed) if args.seed is not None else scenario


def run_oracle(args) -> int:
    started = time.time()
    scenario = _load_scenario(args)
    os.makedirs(args.out_dir, exist_ok=True)
    with OutputLock(args.out_dir):
        config = _train_config(args)
        manifest = RunManifest(command="oracle run", seed=scenario.seed,
                               config={"mode": args.mode, "train": config.to_dict()})
        manifest.add_input(args.scenario)
        log_section(f"ORACLE验证 - {scenario.name}")
        report = validate_classim(scenario, args.mode, config, max_workers=args.threads)
        fmt = args.format
        write_table(report, os.path.join(args.out_dir, f"report.{fmt}"), fmt)
        write_matrix(exact_area_matrix(scenario, max_workers=args.threads),
                     os.path.join(args.out_dir, f"area.{fmt}"), fmt, metric="area")
        text = render_validation(report, scenario.name)
        with open(os.path.join(args.out_dir, "report.txt"), 'w', encoding='utf-8') as f:
            f.write(text)
        print(text)
        _finish(args.out_dir, manifest, [f"report.{fmt}", f"area.{fmt}", "report.txt"], started)
    return 0


def run_oracle_sample(args) -> int:
    scenario = _load_scenario(args)
    dataset = sample(scenario)
    directory = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(directory, exist_ok=True)
    write_features(dataset, args.out)
    logger.info(f"场景 {scenario.name}: {len(dataset)}个样本已写入 {args.out}")
    return 0


def run_compare(args) -> int:
    started = time.time()
    left, right = read_matrix(args.left), read_matrix(args.right)
    if left.classes != right.classes:
        raise DataValidationError("两个矩阵的类别集合不一致")
    names = ("left", "right")
    correlation = None
    summary = {}
    if left.distance != right.distance:
        similarity, distance = (right, left) if left.distance else (left, right)
        correlation = rank_correlation(similarity, distance)
        summary["mean_spearman"] = float(correlation.mean(skipna=True))
    elif not left.distance:
        candidates = merge_candidates(left, TWO_LEVEL_CONFIG["similar_threshold"])
        pairs = [(c_i, c_j) for c_i, c_j, _ in candidates]
        summary["candidate_pairs"] = len(pairs)
        if pairs:
            summary["left_mean_similarity"] = mean_similarity(left, pairs)
            summary["right_mean_similarity"] = mean_similarity(right, pairs)
    os.makedirs(args.out_dir, exist_ok=True)
    k = None if args.full else _top_k(args, left.classes)
    with OutputLock(args.out_dir):
        manifest = RunManifest(command="compare", seed=_split_seed(args),
                               config={"top_k": k, "full": args.full})
        manifest.add_input(args.left)
        manifest.add_input(args.right)
        frame = side_by_side_frame(left, right, k, args.full, names, correlation)
        fmt = args.format
        write_table(frame, os.path.join(args.out_dir, f"compare.{fmt}"), fmt)
        text = render_side_by_side(frame, names, summary)
        with open(os.path.join(args.out_dir, "compare.txt"), 'w', encoding='utf-8') as f:
            f.write(text)
        print(text)
        _finish(args.out_dir, manifest, [f"compare.{fmt}", "compare.txt"], started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = ClassimArgumentParser(prog="classim", description="基于误分类统计的类间相似度工具")
    parser.add_argument("--version", action="version", version=f"classim {VERSION}")
    _add_global_flags(parser)
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("sim", help="计算ClassSim矩阵")
    _add_global_flags(sim, suppress=True)
    sim.add_argument("--features", required=True)
    sim.add_argument("--mode", required=True, choices=[m.value for m in PredictionMode])
    sim.add_argument("--predictions")
    sim.add_argument("--train-config")
    sim.add_argument("--out-dir", required=True)
    sim.add_argument("--top-k", type=_positive_int, help=f"相似类排行长度,默认{SIMILARITY_CONFIG['top_k']}")
    sim.add_argument("--heatmap", action="store_true", help="额外输出heatmap.png")
    sim.set_defaults(handler=run_sim)

    pd_parser = commands.add_parser("pd", help="计算参数距离矩阵")
    _add_global_flags(pd_parser, suppress=True)
    pd_parser.add_argument("--features", required=True)
    pd_parser.add_argument("--out-dir", required=True)
    pd_parser.add_argument("--top-k", type=_positive_int, help=f"相似类排行长度,默认{SIMILARITY_CONFIG['top_k']}")
    pd_parser.set_defaults(handler=run_pd)

    twolevel = commands.add_parser("twolevel", help="两级模型")
    twolevel_commands = twolevel.add_subparsers(dest="twolevel_command", required=True)
    build = twolevel_commands.add_parser("build", help="构建两级模型")
    _add_global_flags(build, suppress=True)
    build.add_argument("--features", required=True)
    build.add_argument("--sim", required=True)
    build.add_argument("--threshold", type=float, default=TWO_LEVEL_CONFIG["similar_threshold"])
    build.add_argument("--order-file")
    build.add_argument("--train-config")
    build.add_argument("--out-dir", required=True)
    build.set_defaults(handler=run_twolevel_build)
    evaluate_parser = twolevel_commands.add_parser("eval", help="评估两级模型")
    _add_global_flags(evaluate_parser, suppress=True)
    evaluate_parser.add_argument("--model-dir", required=True)
    evaluate_parser.add_argument("--features", required=True)
    evaluate_parser.add_argument("--out-dir")
    evaluate_parser.set_defaults(handler=run_twolevel_eval)

    oracle = commands.add_parser("oracle", help="合成场景")
    oracle_commands = oracle.add_subparsers(dest="oracle_command", required=True)
    run = oracle_commands.add_parser("run", help="验证ClassSim与交叠面积")
    _add_global_flags(run, suppress=True)
    run.add_argument("--scenario", required=True)
    run.add_argument("--mode", required=True, choices=["ideal", "ovr", "multi"])
    run.add_argument("--train-config")
    run.add_argument("--out-dir", required=True)
    run.set_defaults(handler=run_oracle)
    sample_parser = oracle_commands.add_parser("sample", help="导出场景样本")
    _add_global_flags(sample_parser, suppress=True)
    sample_parser.add_argument("--scenario", required=True)
    sample_parser.add_argument("--out", required=True)
    sample_parser.set_defaults(handler=run_oracle_sample)

    compare = commands.add_parser("compare", help="两个矩阵的排行对比")
    _add_global_flags(compare, suppress=True)
    compare.add_argument("--left", required=True)
    compare.add_argument("--right", required=True)
    compare.add_argument("--out-dir", required=True)
    depth = compare.add_mutually_exclusive_group()
    depth.add_argument("--top-k", type=_positive_int, default=None)
    depth.add_argument("--full", action="store_true", help="输出完整排行")
    compare.set_defaults(handler=run_compare)
    return parser


def main(argv=None) -> int:
    """主函数入口,返回退出码"""
    try:
        args = build_parser().parse_args(argv)
        setup_logging()
        return args.handler(args)
    except ClassimError as e:
        error = e
    except OSError as e:
        error = DataValidationError(f"{e.strerror}: {e.filename}")
    reason = " ".join(str(error).split())
    print(f"classim: error kind={error.kind} code={error.exit_code} reason={reason}", file=sys.stderr)
    return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
