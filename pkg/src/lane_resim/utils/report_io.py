# src/lane_resim/utils/report_io.py

import os
import json
import hashlib
import logging
from pathlib import Path
from typing import Any


class ArtifactError(Exception):
    """自定义产物读写异常"""
    pass


def canonical_json(data: Any) -> str:
    """排序键、无多余空白的 JSON，用于计算哈希"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def canonical_hash(data: Any) -> str:
    """配置哈希：规范 JSON 的 sha256 前 32 位十六进制"""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()[:32]


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str | Path, data: dict[str, Any]) -> Path:
    """
    按插入顺序写出 JSON 产物（固定字段顺序，便于 diff）。
    先写临时文件再替换，避免留下半个文件。

    Args:
        path: 目标路径，父目录不存在时自动创建。
        data: 可 JSON 序列化的字典；NaN/inf 不允许出现。

    Returns:
        Path: 实际写入的路径。
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, ensure_ascii=False, allow_nan=False)
            f.write("\n")
        os.replace(tmp, target)
    except (OSError, ValueError) as e:
        logging.error(f"写出产物 {target} 失败: {e}", exc_info=True)
        cleanup_temp_file(tmp)
        raise ArtifactError(f"写出 {target} 失败: {e}") from e
    logging.info(f"已写出产物: {target}")
    return target


def read_json(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ArtifactError(f"产物文件不存在: {path}") from e
    except json.JSONDecodeError as e:
        raise ArtifactError(f"产物文件 {path} 不是合法的 JSON: {e}") from e


def cleanup_temp_file(filepath: str | Path | None):
    """安全地清理单个临时文件。"""
    if filepath and os.path.exists(filepath):
        try:
            os.remove(filepath)
            logging.info(f"已清理临时文件: {filepath}")
        except OSError as e:
            logging.error(f"清理临时文件失败: {filepath}, 错误: {e}")
