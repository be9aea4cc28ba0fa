from dotenv import load_dotenv
import logging
import os

# 加载环境变量
env_path = os.path.join(os.path.dirname(__file__), ".env")
load_dotenv(env_path)


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    try:
        return max(0, int(value))
    except ValueError:
        logging.getLogger(__name__).warning(f"环境变量 {name}={value!r} 不是整数，使用默认值 {default}")
        return default


def create_app():
    """读取环境配置并初始化日志，返回运行配置字典"""

    # 先配置基础日志（这样后续的日志才能正常显示）
    logging.basicConfig(
        level=logging.INFO,  # 先设置为 INFO，稍后从环境变量读取
        format="[%(asctime)s] [%(levelname)s] %(name)s : %(message)s",
    )

    config = {}
    config["WORKING_DIR"] = os.getcwd()
    config["LOG_LEVEL"] = os.getenv("HSINET_LOG_LEVEL", "INFO")
    # 0 表示串行（完全确定）模式
    config["THREADS"] = _env_int("HSINET_THREADS", 0)
    config["CONFIG_PATH"] = os.getenv("HSINET_CONFIG") or None
    config["OUTPUT_DIR"] = os.getenv("HSINET_OUTPUT_DIR", os.path.join(os.getcwd(), "runs"))

    # 更新日志级别（从环境变量读取）
    log_level = getattr(logging, config["LOG_LEVEL"].upper(), logging.INFO)
    logging.getLogger().setLevel(log_level)

    logging.getLogger(__name__).debug(
        f"运行配置: 线程 {config['THREADS']}, 配置文件 {config['CONFIG_PATH']}, 输出目录 {config['OUTPUT_DIR']}"
    )
    return config
