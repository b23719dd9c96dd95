# src/lane_resim/config.py
import os
import logging
from pydantic_settings import BaseSettings, SettingsConfigDict

# 获取脚本的基础目录
SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
BASE_DIR = os.path.dirname(SCRIPT_DIR) # 这将是 'src' 目录

class Settings(BaseSettings):
    """
    运行时设置。只影响路径、日志与并行度，不影响任何实验结果；
    实验参数全部来自 TOML 实验配置文件（见 schemas/experiment.py）。
    """
    # 从项目的根目录（'src' 的上一级）加载 .env 文件
    model_config = SettingsConfigDict(env_file=os.path.join(BASE_DIR, '..', '.env'), extra='ignore')

    # --- 服务器配置 ---
    HOST_NAME: str = "0.0.0.0"
    SERVER_PORT: int = 8443
    DATA_DIR: str = os.path.join(BASE_DIR, '..', 'data')
    TEMP_DIR: str = os.path.join(BASE_DIR, '..', 'temp')

    # --- 日志配置 ---
    LOG_LEVEL: str = "INFO"
    # 为空时只输出到 stderr，需要落盘时再指定文件路径
    LOG_FILE: str = ""

    # --- 并行配置 ---
    MAX_WORKERS: int = 4
    # 按需渲染帧的 LRU 缓存容量（帧数）
    FRAME_CACHE_SIZE: int = 64

    # --- 任务重试配置 ---
    TASK_MAX_RETRIES: int = 3
    TASK_RETRY_DELAY: int = 5
    TASK_RESULT_TTL: int = 3600


def setup_logging(level: str | None = None, log_file: str | None = None):
    """进程级日志配置，CLI 启动与服务 lifespan 各调用一次。"""
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    target = settings.LOG_FILE if log_file is None else log_file
    if target:
        handlers.append(logging.FileHandler(target, 'a', 'utf-8'))
    logging.basicConfig(
        level=(level or settings.LOG_LEVEL).upper(),
        format='%(asctime)s - %(levelname)s - %(threadName)s - %(message)s',
        handlers=handlers,
        force=True,
    )


# 创建一个可供全局导入的 settings 单例
settings = Settings()
