"""
配置文件,存储全局配置参数
包含相似度计算、分类器训练、两级模型和输出格式的默认值
"""
import os

# 默认配置
DEFAULT = {
    # ClassSim计算配置
    "similarity": {
        "ovr_threshold": 0.5,          # OVR分类器判定阈值(严格大于)
        "top_k": 3,                    # 相似类排行默认取前三
        "multi_sum_tolerance": 1e-9    # 多分类概率向量求和容差
    },

    # 两级模型配置
    "two_level": {
        "similar_threshold": 0.1,      # 相似类集合阈值
        "first_threshold": 0.5,
        "second_threshold": 0.5,
        "none_label": "none"           # 保留标签,所有分类器都不触发时返回
    },

    # 数据集划分 (训练 : 验证 : 测试 = 0.8×0.8 : 0.8×0.2 : 0.2)
    "split": {
        "train": 0.64,
        "validation": 0.16,
        "test": 0.20
    },

    # 线性分类器训练配置
    "train": {
        "learning_rate": 0.5,
        "epochs": 200,
        "l2": 1e-3,
        "seed": 0,
        "class_weighting": "none",     # none 或 balanced
        "min_step": 1e-12              # 步长减半的下限,低于此值视为收敛
    },

    # 生成模型oracle配置
    "oracle": {
        "quad_abs_tol": 1e-9,
        "sigma_span": 12.0,            # 积分区间取均值±12个标准差
        "se_multiplier": 3.0           # 偏差允许的标准误倍数
    },

    # 线程池配置
    "thread_pool": {
        "max_workers": os.cpu_count() or 1
    },

    # 输出配置
    "output": {
        "machine_digits": 17,          # 机器可读输出的有效数字
        "human_decimals": 3,           # 人类可读表格的小数位数
        "format": "csv",
        "lock_retries": 3,
        "lock_delay": 1
    }
}

# 导出实际使用的配置
SIMILARITY_CONFIG = DEFAULT["similarity"]
TWO_LEVEL_CONFIG = DEFAULT["two_level"]
SPLIT_CONFIG = DEFAULT["split"]
TRAIN_CONFIG = DEFAULT["train"]
ORACLE_CONFIG = DEFAULT["oracle"]
THREAD_POOL_CONFIG = DEFAULT["thread_pool"]
OUTPUT_CONFIG = DEFAULT["output"]

NONE_LABEL = TWO_LEVEL_CONFIG["none_label"]
VERSION = "1.0.0"
