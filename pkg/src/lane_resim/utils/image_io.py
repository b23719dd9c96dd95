# src/lane_resim/utils/image_io.py

import logging
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageIOError(Exception):
    """自定义图像读写异常"""
    pass


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """[0,1] 浮点 → 8 位，四舍五入（0.5 向上）"""
    return np.clip(np.floor(np.asarray(pixels, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    """8 位 → (H, W, C) float32，取值 k/255"""
    arr = np.asarray(raw)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr.astype(np.float64) / 255.0).astype(np.float32)


def save_pnm(path: str | Path, pixels: np.ndarray) -> Path:
    """
    写出二进制 PGM（单通道）或 PPM（三通道），maxval 255。
    pixels 为 (H, W, C) 或 (H, W)，取值 [0,1]。
    """
    arr = np.asarray(pixels)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 3 and arr.shape[2] != 3:
        raise ImageIOError(f"不支持的通道数: {arr.shape[2]}")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    try:
        # uint8 的二维数组对应 L，(H, W, 3) 对应 RGB
        Image.fromarray(to_uint8(arr)).save(target, format="PPM")
    except OSError as e:
        logging.error(f"写出图像 {target} 失败: {e}", exc_info=True)
        raise ImageIOError(f"写出图像 {target} 失败: {e}") from e
    return target


def load_pnm(path: str | Path) -> np.ndarray:
    """读取 PGM/PPM，返回 (H, W, C) float32"""
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                raise ImageIOError(f"{path} 的像素格式 {img.mode} 不是 8 位灰度或 RGB")
            raw = np.array(img)
    except FileNotFoundError as e:
        raise ImageIOError(f"图像文件不存在: {path}") from e
    except (UnidentifiedImageError, OSError) as e:
        raise ImageIOError(f"无法解析图像 {path}: {e}") from e
    return from_uint8(raw)
