# src/lane_resim/services/policy.py
"""
驾驶策略接口与三种策略：中心线“神谕”、复现 MAPA 的“作弊者”，以及
图块 → 轨迹的岭回归模型（桌面规模下代替神经网络）。
"""
import struct
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import scipy.linalg

from ..schemas.world import MAX_LABEL_OFFSET_M
from ..utils.polyline import Polyline
from .augmentation import SampleStoreError, SampleStoreReader
from .geometry import ImageBuffer, VehiclePose
from .labels import LABEL_POINTS, LABEL_SPACING_M, LabelError, TrajectoryLabel, extract_local_trajectory, label_to_prediction_targets
from .patches import pool_features, pooled_size


class PolicyError(Exception):
    """自定义策略/模型异常"""
    pass


MODEL_MAGIC = b"PNRM"
MODEL_VERSION = 1
MODEL_HEADER = struct.Struct("<4sIIIIIIIId32s")
_PATCH_KINDS = ("regular", "multires")


@dataclass(frozen=True)
class PrivilegedState:
    """只有特权策略可以读取的真值"""
    pose: VehiclePose
    centerline: Polyline
    human_path: Polyline


@dataclass(frozen=True)
class PolicyInput:
    patch: ImageBuffer | None
    privileged: PrivilegedState | None = None


@dataclass(frozen=True, eq=False)
class TrajectoryPrediction:
    """车辆系中 x = 1..100 m 处的横向偏移 y（左正）"""
    y: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=np.float64).ravel()
        if not np.all(np.isfinite(y)):
            raise PolicyError("预测值包含非有限数")
        if np.any(np.abs(y) >= MAX_LABEL_OFFSET_M):
            raise PolicyError(f"预测横向偏移超出 ±{MAX_LABEL_OFFSET_M} m: max |y| = {np.abs(y).max():.2f}")
        y.flags.writeable = False
        object.__setattr__(self, "y", y)

    @property
    def stations(self) -> np.ndarray:
        return LABEL_SPACING_M * np.arange(1, len(self.y) + 1, dtype=np.float64)


class Policy(Protocol):
    name: str
    uses_patch: bool

    def predict(self, inp: PolicyInput) -> TrajectoryPrediction: ...


def _follow_path(path: Polyline, pose: VehiclePose) -> TrajectoryPrediction:
    try:
        return TrajectoryPrediction(label_to_prediction_targets(extract_local_trajectory(path, pose)))
    except LabelError as e:
        raise PolicyError(f"特权路径不足: {e}") from e


def _privileged(inp: PolicyInput) -> PrivilegedState:
    if inp.privileged is None:
        raise PolicyError("特权策略需要真值输入")
    return inp.privileged


class OraclePolicy:
    """沿真值中心线行驶"""
    name = "oracle"
    uses_patch = False

    def predict(self, inp: PolicyInput) -> TrajectoryPrediction:
        state = _privileged(inp)
        return _follow_path(state.centerline, state.pose)


class CheaterPolicy:
    """完美解读变换伪影的网络：复现录制的人类轨迹"""
    name = "cheater"
    uses_patch = False

    def predict(self, inp: PolicyInput) -> TrajectoryPrediction:
        state = _privileged(inp)
        return _follow_path(state.human_path, state.pose)


def oracle_policy(inp: PolicyInput) -> TrajectoryPrediction:
    return OraclePolicy().predict(inp)


def cheater_policy(inp: PolicyInput) -> TrajectoryPrediction:
    return CheaterPolicy().predict(inp)


class OffsetPolicy:
    """在基础策略的输出上叠加常数横向偏置"""

    def __init__(self, base: Policy, offset_m: float):
        self.base = base
        self.offset_m = float(offset_m)
        self.name = f"{base.name}{self.offset_m:+.3f}m"
        self.uses_patch = base.uses_patch

    def predict(self, inp: PolicyInput) -> TrajectoryPrediction:
        return TrajectoryPrediction(self.base.predict(inp).y + self.offset_m)


# --- 岭回归模型 ---

@dataclass(frozen=True, eq=False)
class RidgeModel:
    """
    weights 形状 (label_dims, feature_dims + 1)，最后一列为偏置。
    特征是图块按 pool 做面积平均池化后的展开向量。
    """
    weights: np.ndarray
    ridge_lambda: float
    patch_kind: str
    patch_shape: tuple[int, int, int]   # (宽, 高, 通道)
    pool: int
    config_hash: str = ""

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if self.patch_kind not in _PATCH_KINDS:
            raise PolicyError(f"未知的图块类型: {self.patch_kind}")
        pw, ph, ch = self.patch_shape
        expected = pooled_size((pw, ph), ch, self.pool) + 1
        if w.ndim != 2 or w.shape[1] != expected:
            raise PolicyError(f"权重形状 {w.shape} 与图块 {self.patch_shape}、池化 {self.pool} 不一致（应有 {expected} 列）")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def label_dims(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dims(self) -> int:
        return self.weights.shape[1] - 1

    def features(self, patch: ImageBuffer | np.ndarray) -> np.ndarray:
        img = patch if isinstance(patch, ImageBuffer) else ImageBuffer(patch)
        if (img.width, img.height, img.channels) != tuple(self.patch_shape):
            raise PolicyError(f"图块尺寸 {(img.width, img.height, img.channels)} 与模型 {self.patch_shape} 不一致")
        return pool_features(img, self.pool)

    def same_as(self, other: "RidgeModel") -> bool:
        return (np.array_equal(self.weights, other.weights) and self.ridge_lambda == other.ridge_lambda
                and self.patch_kind == other.patch_kind and tuple(self.patch_shape) == tuple(other.patch_shape)
                and self.pool == other.pool and self.config_hash == other.config_hash)


def predict(model: RidgeModel, patch: ImageBuffer | np.ndarray) -> TrajectoryPrediction:
    """仿射映射 W·[特征; 1]"""
    f = model.features(patch)
    return TrajectoryPrediction(model.weights[:, :-1] @ f + model.weights[:, -1])


class RidgePolicy:
    """非特权策略：只读取图块"""
    uses_patch = True

    def __init__(self, model: RidgeModel, name: str = "ridge"):
        self.model = model
        self.name = name

    def predict(self, inp: PolicyInput) -> TrajectoryPrediction:
        if inp.patch is None:
            raise PolicyError("岭回归策略需要图块输入")
        return predict(self.model, inp.patch)


def _targets(labels: np.ndarray, y_only: bool) -> np.ndarray:
    if y_only:
        return labels.astype(np.float64)
    return np.stack([label_to_prediction_targets(TrajectoryLabel(row.reshape(LABEL_POINTS, 3).astype(np.float64)))
                     for row in labels])


@dataclass
class NormalEquations:
    """以首个样本为平移量累加的中心化正规方程"""
    n: int
    mean_x: np.ndarray
    mean_y: np.ndarray
    cxx: np.ndarray
    cxy: np.ndarray


def accumulate_normal_equations(store_path: str | Path, pool: int) -> tuple[NormalEquations, "SampleStoreReader"]:
    """单次顺序扫描样本库，累加 Gram 矩阵"""
    reader = SampleStoreReader(store_path)
    h = reader.header
    if len(reader) == 0:
        raise PolicyError(f"样本库 {store_path} 为空")
    shift_x = shift_y = None
    n = 0
    sx = sy = sxx = sxy = None
    for batch in reader.iter_batches():
        x = np.stack([pool_features(ImageBuffer(p.reshape(h.patch_h, h.patch_w, h.channels)), pool)
                      for p in batch["patch"]])
        y = _targets(np.asarray(batch["label"]), h.y_only)
        if shift_x is None:
            shift_x, shift_y = x[0].copy(), y[0].copy()
            sx = np.zeros_like(shift_x)
            sy = np.zeros_like(shift_y)
            sxx = np.zeros((len(shift_x), len(shift_x)))
            sxy = np.zeros((len(shift_x), len(shift_y)))
        dx = x - shift_x
        dy = y - shift_y
        n += len(x)
        sx += dx.sum(axis=0)
        sy += dy.sum(axis=0)
        sxx += dx.T @ dx
        sxy += dx.T @ dy
    mx, my = sx / n, sy / n
    eq = NormalEquations(
        n=n, mean_x=shift_x + mx, mean_y=shift_y + my,
        cxx=sxx - n * np.outer(mx, mx), cxy=sxy - n * np.outer(mx, my),
    )
    return eq, reader


def train_ridge(store_path: str | Path, ridge_lambda: float, pool: int = 5, config_hash: str = "") -> RidgeModel:
    """
    解 (XcᵀXc + λI)W = XcᵀYc（Xc、Yc 为中心化后的特征与目标），偏置不参与正则化。
    """
    if ridge_lambda < 0:
        raise PolicyError(f"λ 不能为负: {ridge_lambda}")
    try:
        eq, reader = accumulate_normal_equations(store_path, pool)
    except SampleStoreError as e:
        raise PolicyError(f"无法读取样本库: {e}") from e
    h = reader.header
    a = eq.cxx + ridge_lambda * np.eye(len(eq.cxx))
    try:
        w = scipy.linalg.solve(a, eq.cxy, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
        raise PolicyError(f"正规方程奇异（λ={ridge_lambda}），数据退化: {e}") from e
    bias = eq.mean_y - w.T @ eq.mean_x
    model = RidgeModel(
        weights=np.column_stack([w.T, bias]), ridge_lambda=float(ridge_lambda),
        patch_kind="multires" if h.multires else "regular",
        patch_shape=(h.patch_w, h.patch_h, h.channels), pool=pool, config_hash=config_hash,
    )
    logging.info(f"岭回归训练完成: {eq.n} 个样本, {model.feature_dims} 维特征, λ={ridge_lambda}")
    return model


def normal_equation_residual(model: RidgeModel, store_path: str | Path) -> float:
    """‖(XcᵀXc + λI)W − XcᵀYc‖∞，用于检验求解精度"""
    eq, _ = accumulate_normal_equations(store_path, model.pool)
    w = model.weights[:, :-1].T
    lhs = (eq.cxx + model.ridge_lambda * np.eye(len(eq.cxx))) @ w
    return float(np.max(np.abs(lhs - eq.cxy)))


# --- 模型文件 ---

def save_model(model: RidgeModel, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    pw, ph, ch = model.patch_shape
    header = MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.label_dims, model.feature_dims, pw, ph, ch,
                               model.pool, _PATCH_KINDS.index(model.patch_kind), model.ridge_lambda,
                               model.config_hash.encode("ascii").ljust(32, b"\0")[:32])
    try:
        with open(target, "wb") as f:
            f.write(header)
            f.write(model.weights.astype("<f8").tobytes())
    except OSError as e:
        logging.error(f"写出模型 {target} 失败: {e}", exc_info=True)
        raise PolicyError(f"写出模型 {target} 失败: {e}") from e
    logging.info(f"模型已写出: {target}")
    return target


def load_model(path: str | Path) -> RidgeModel:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise PolicyError(f"模型文件不存在: {path}") from e
    if len(raw) < MODEL_HEADER.size:
        raise PolicyError(f"模型文件 {path} 头部不完整")
    magic, version, ld, fd, pw, ph, ch, pool, kind, lam, chash = MODEL_HEADER.unpack(raw[:MODEL_HEADER.size])
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise PolicyError(f"{path} 不是受支持的模型文件 (magic={magic!r}, version={version})")
    body = raw[MODEL_HEADER.size:]
    if len(body) != ld * (fd + 1) * 8 or kind >= len(_PATCH_KINDS):
        raise PolicyError(f"模型文件 {path} 已损坏：权重长度 {len(body)} 字节与头部不一致")
    weights = np.frombuffer(body, dtype="<f8").reshape(ld, fd + 1)
    return RidgeModel(weights=weights, ridge_lambda=lam, patch_kind=_PATCH_KINDS[kind], patch_shape=(pw, ph, ch),
                      pool=pool, config_hash=chash.rstrip(b"\0").decode("ascii"))


def load_policy(spec: str) -> Policy:
    """解析 oracle | cheater | model:<文件>"""
    if spec == "oracle":
        return OraclePolicy()
    if spec == "cheater":
        return CheaterPolicy()
    if spec.startswith("model:") and len(spec) > len("model:"):
        path = spec[len("model:"):]
        return RidgePolicy(load_model(path), name=Path(path).stem)
    raise PolicyError(f"无法识别的策略: {spec!r}（可选 oracle | cheater | model:<文件>）")
