import os
import sys
import time
import hashlib
import logging
from functools import wraps

LOG_LEVELS = {
    "error": logging.ERROR,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

logger = logging.getLogger(__name__)


class ClassimError(Exception):
    """所有可预期错误的基类,携带退出码供命令行使用"""
    exit_code = 1
    kind = "error"


class UsageError(ClassimError):
    exit_code = 2
    kind = "usage"


class DataValidationError(ClassimError, ValueError):
    exit_code = 3
    kind = "data_validation"


class NumericalError(ClassimError, ArithmeticError):
    exit_code = 4
    kind = "numerical"


def setup_logging(level_name=None):
    """
    配置日志,只输出到标准错误

    Args:
        level_name (str): error/info/debug,默认读取环境变量CLASSIM_LOG
    """
    level_name = (level_name or os.environ.get("CLASSIM_LOG", "info")).strip().lower()
    level = LOG_LEVELS.get(level_name)
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(
        '%(asctime)s | %(levelname)-8s | %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    ))
    root.addHandler(handler)
    root.setLevel(level if level is not None else logging.INFO)
    if level is None:
        logger.warning(f"未知的CLASSIM_LOG取值 {level_name!r},使用info级别")
    return root.level


def progress_disabled():
    """日志级别高于INFO时关闭进度条"""
    return logging.getLogger().getEffectiveLevel() > logging.INFO


def log_section(title):
    """添加日志分隔符"""
    logger.info(f"{'=' * 80}")
    logger.info(f"{' ' * 10}{title.upper()}")
    logger.info(f"{'=' * 80}")


def retry_on_exception(retries=3, delay=1, exceptions=(Exception,)):
    """
    重试装饰器,用于处理暂时性失败(例如输出目录的锁文件被占用)

    Args:
        retries (int): 最大尝试次数
        delay (float): 重试间隔(秒),按尝试次数递增
        exceptions (tuple): 需要重试的异常类型
    """
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            for attempt in range(retries):
                try:
                    return func(*args, **kwargs)
                except exceptions as e:
                    if attempt < retries - 1:  # 如果不是最后一次尝试
                        wait_time = delay * (attempt + 1)  # 递增等待时间
                        logger.warning(f"调用 {func.__name__} 失败 (尝试 {attempt + 1}/{retries}): {str(e)}")
                        logger.info(f"等待 {wait_time} 秒后重试...")
                        time.sleep(wait_time)
                    else:
                        logger.error(f"调用 {func.__name__} 最终失败: {str(e)}")
                        raise
        return wrapper
    return decorator


def sha256_digest(path):
    """计算文件内容的sha256摘要"""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(65536), b''):
            digest.update(chunk)
    return f"sha256:{digest.hexdigest()}"


def canonical_sort(labels):
    """按UTF-8字节序排序类别标签"""
    return sorted(labels, key=lambda s: s.encode('utf-8'))
