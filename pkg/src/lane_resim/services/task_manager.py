# src/lane_resim/services/task_manager.py
import uuid
import time
import logging
from threading import Lock, Timer
from typing import Any, Callable

from ..config import settings
from ..utils.report_io import ArtifactError

# 只有读写文件类的错误才值得重试；领域错误重跑只会得到同样的结果
RETRYABLE_ERRORS: tuple[type[BaseException], ...] = (OSError, ArtifactError)


# --- 任务状态常量 ---
class TaskStatus:
    PENDING = "pending"
    PROCESSING = "processing"
    COMPLETED = "completed"
    FAILED = "failed"


# --- 内存中的任务存储 ---
_task_storage: dict[str, dict[str, Any]] = {}
_task_lock = Lock()


def create_task(kind: str = "") -> str:
    """创建一个新任务，返回其唯一ID"""
    task_id = str(uuid.uuid4())
    with _task_lock:
        _task_storage[task_id] = {"status": TaskStatus.PENDING, "kind": kind, "result": None, "error": None}
    logging.info(f"已创建新任务: {task_id} ({kind or '未命名'})")
    return task_id


def get_task(task_id: str) -> dict[str, Any] | None:
    """获取任务信息（副本）"""
    with _task_lock:
        task = _task_storage.get(task_id)
        return dict(task) if task is not None else None


def remove_task(task_id: str):
    with _task_lock:
        if _task_storage.pop(task_id, None) is not None:
            logging.info(f"已按计划清理缓存的任务结果: {task_id}")


def schedule_task_cleanup(task_id: str, delay_seconds: int | None = None):
    """在 delay_seconds 秒后移除任务；计时器是守护线程，不阻止进程退出"""
    delay = settings.TASK_RESULT_TTL if delay_seconds is None else delay_seconds
    with _task_lock:
        task = _task_storage.get(task_id)
        if task is None or task.get("cleanup_scheduled"):
            return
        task["cleanup_scheduled"] = True
    cleanup_timer = Timer(delay, remove_task, args=[task_id])
    cleanup_timer.daemon = True
    cleanup_timer.start()
    logging.info(f"任务 {task_id} 的结果将缓存 {delay} 秒后自动清理。")


def _set(task_id: str, **fields):
    with _task_lock:
        if task_id in _task_storage:
            _task_storage[task_id].update(fields)


def run_task_in_background(task_id: str, target_func: Callable, *args, **kwargs):
    """
    在后台执行目标函数。I/O 类错误按 TASK_MAX_RETRIES 重试，
    其余错误立即把任务标记为失败。
    """
    try:
        _set(task_id, status=TaskStatus.PROCESSING)
        logging.info(f"任务 {task_id} 开始执行...")
        attempts = max(1, settings.TASK_MAX_RETRIES)
        for attempt in range(attempts):
            try:
                result = target_func(*args, **kwargs)
                _set(task_id, status=TaskStatus.COMPLETED, result=result)
                logging.info(f"任务 {task_id} 在尝试 {attempt + 1} 次后成功完成。")
                return
            except RETRYABLE_ERRORS as e:
                is_last_attempt = attempt == attempts - 1
                logging.error(f"任务 {task_id} 尝试第 {attempt + 1}/{attempts} 次失败: {e}", exc_info=is_last_attempt)
                if is_last_attempt:
                    _set(task_id, status=TaskStatus.FAILED, error=str(e))
                    return
                time.sleep(settings.TASK_RETRY_DELAY)
            except Exception as e:
                logging.error(f"任务 {task_id} 失败（不可重试）: {e}", exc_info=True)
                _set(task_id, status=TaskStatus.FAILED, error=f"{type(e).__name__}: {e}")
                return
    except Exception as e:
        logging.critical(f"执行任务 {task_id} 的后台处理器发生致命错误: {e}", exc_info=True)
        _set(task_id, status=TaskStatus.FAILED, error="任务执行器发生致命内部错误。")
