# src/lane_resim/services/labels.py
"""
轨迹标签：路径上 100 个间隔 1 m 的点，表示在车辆局部坐标系（x 向前、y 向左）中。
"""
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ..utils.polyline import Polyline, PolylineError
from .geometry import VehiclePose


class LabelError(Exception):
    """自定义标签构建异常"""
    pass


LABEL_POINTS = 100
LABEL_SPACING_M = 1.0
CENTERLINE_SPACING_M = 0.25


class ManeuverTag(IntEnum):
    LANE_STABLE = 0
    LANE_CHANGE_LEFT_1 = 1
    LANE_CHANGE_LEFT_2 = 2
    LANE_CHANGE_RIGHT_1 = 3
    LANE_CHANGE_RIGHT_2 = 4
    SPLIT_LEFT = 5
    SPLIT_RIGHT = 6

    @property
    def slug(self) -> str:
        return self.name.lower()


@dataclass(frozen=True, eq=False)
class TrajectoryLabel:
    points: np.ndarray  # (N, 3)，车辆坐标系，z 恒为 0
    maneuver: ManeuverTag = ManeuverTag.LANE_STABLE

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
            raise LabelError(f"标签点的形状必须为 (N, 3)，收到 {pts.shape}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @property
    def x(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.points[:, 1]

    def flatten(self) -> np.ndarray:
        return self.points.ravel()


# --- 刚体变换 ---

def _rot(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def to_vehicle_frame(pose: VehiclePose, points: np.ndarray) -> np.ndarray:
    """世界系 (N, 2) → 车辆系"""
    rel = np.atleast_2d(np.asarray(points, dtype=np.float64)) - np.array([pose.x, pose.y])
    return rel @ _rot(pose.heading)


def from_vehicle_frame(pose: VehiclePose, points: np.ndarray) -> np.ndarray:
    """车辆系 (N, 2) → 世界系"""
    local = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return local @ _rot(pose.heading).T + np.array([pose.x, pose.y])


def perturb_pose(pose: VehiclePose, shift_m: float, yaw_rad: float) -> VehiclePose:
    """把车辆向右平移 shift_m（负值向左），再绕后轴转 yaw_rad（逆时针为正）"""
    return VehiclePose(
        pose.x + shift_m * np.sin(pose.heading),
        pose.y - shift_m * np.cos(pose.heading),
        pose.heading + yaw_rad,
    )


def relabel(label: TrajectoryLabel, shift_m: float, yaw_rad: float) -> TrajectoryLabel:
    """把原车辆系中的标签改写到扰动后的虚拟车辆系中"""
    origin = np.array([0.0, -shift_m])
    xy = (label.points[:, :2] - origin) @ _rot(yaw_rad)
    return TrajectoryLabel(np.column_stack([xy, label.points[:, 2]]), label.maneuver)


def unrelabel(label: TrajectoryLabel, shift_m: float, yaw_rad: float) -> TrajectoryLabel:
    """relabel 的逆变换"""
    xy = label.points[:, :2] @ _rot(yaw_rad).T + np.array([0.0, -shift_m])
    return TrajectoryLabel(np.column_stack([xy, label.points[:, 2]]), label.maneuver)


# --- 标签构建 ---

def centerline_from_edges(left: Polyline, right: Polyline, spacing: float = CENTERLINE_SPACING_M) -> Polyline:
    """
    两条车道边界按弧长比例一一对应（对应点数取较短边界的长度决定），
    取中点得到中心线，再按 spacing 重采样。
    """
    if left is None or right is None or len(left) < 2 or len(right) < 2:
        raise LabelError("车道边界为空")
    short = min(left.length, right.length)
    n = max(2, int(np.ceil(short / spacing)) + 1)
    frac = np.linspace(0.0, 1.0, n)
    lp = left.point_at(frac * left.length)
    rp = right.point_at(frac * right.length)

    tangent = np.gradient(lp, axis=0)
    gap = rp - lp
    cross = tangent[:, 0] * gap[:, 1] - tangent[:, 1] * gap[:, 0]
    tol = 1e-9 * max(1.0, short)
    if np.any(cross > tol) and np.any(cross < -tol):
        raise LabelError("车道边界相交")
    try:
        return Polyline((lp + rp) / 2.0).resample(spacing)
    except PolylineError as e:
        raise LabelError(f"无法由边界构造中心线: {e}") from e


def extract_local_trajectory(path: Polyline, pose: VehiclePose, n: int = LABEL_POINTS,
                             spacing: float = LABEL_SPACING_M, anchor_station: float | None = None,
                             maneuver: ManeuverTag = ManeuverTag.LANE_STABLE) -> TrajectoryLabel:
    """
    把后轴中心投影到路径上（或使用给定的 anchor_station），沿弧长向前取
    n 个点，每个点刚体变换到车辆系。第一个点在投影点前方 spacing 处。
    """
    s0 = float(path.project(np.array([[pose.x, pose.y]])).station[0]) if anchor_station is None else float(anchor_station)
    stations = s0 + spacing * np.arange(1, n + 1)
    if stations[-1] > path.length + 1e-9:
        raise LabelError(f"路径前方只剩 {path.length - s0:.2f} m，不足 {n * spacing:.1f} m")
    local = to_vehicle_frame(pose, path.point_at(stations))
    return TrajectoryLabel(np.column_stack([local, np.zeros(n)]), maneuver)


def _interp_linear(x: np.ndarray, xp: np.ndarray, fp: np.ndarray) -> np.ndarray:
    """分段线性插值，两端按首/末线段外推"""
    y = np.interp(x, xp, fp)
    lo = x < xp[0]
    hi = x > xp[-1]
    y[lo] = fp[0] + (x[lo] - xp[0]) * (fp[1] - fp[0]) / (xp[1] - xp[0])
    y[hi] = fp[-1] + (x[hi] - xp[-1]) * (fp[-1] - fp[-2]) / (xp[-1] - xp[-2])
    return y


def label_to_prediction_targets(label: TrajectoryLabel, n: int = LABEL_POINTS,
                                spacing: float = LABEL_SPACING_M) -> np.ndarray:
    """标签 → 在 x = 1..n m 处的横向偏移 y"""
    if np.any(np.diff(label.x) <= 0):
        raise LabelError("标签点的 x 坐标不是严格递增，无法按前向距离取值")
    xs = spacing * np.arange(1, n + 1, dtype=np.float64)
    return _interp_linear(xs, label.x, label.y)
