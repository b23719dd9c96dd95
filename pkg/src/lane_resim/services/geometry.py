# src/lane_resim/services/geometry.py
"""
相机模型与地平面投影变换。

坐标约定:
    - 车辆/世界坐标系: x 向前, y 向左, z 向上（右手系），地面为 z=0
    - 相机坐标系: x 向右, y 向下, z 向前
    - 像素坐标: u 向右, v 向下，整数坐标为像素中心
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ..schemas.geometry import CameraIntrinsics, CameraPose, LensModel


class GeometryError(Exception):
    """自定义几何/相机模型异常"""
    pass


# 相机三个轴（右、下、前）在机体坐标系中的表示，按列排列
CAM_AXES = np.array([[0.0, 0.0, 1.0],
                     [-1.0, 0.0, 0.0],
                     [0.0, -1.0, 0.0]])

MIN_CAMERA_HEIGHT_M = 1e-9
MIN_HOMOGRAPHY_DET = 1e-12


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """
    不可变的浮点栅格，形状 (H, W, C)，C ∈ {1, 3}，取值 [0, 1]。
    构造时复制并冻结数据，可以在线程之间自由共享。
    """
    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise GeometryError(f"图像形状必须为 (H, W, 1|3)，收到 {np.shape(self.pixels)}")
        arr = np.array(arr, dtype=np.float32, order="C")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise GeometryError("图像像素必须是 [0, 1] 内的有限值")
        arr.flags.writeable = False
        object.__setattr__(self, "pixels", arr)

    @classmethod
    def constant(cls, width: int, height: int, value: float, channels: int = 1) -> "ImageBuffer":
        return cls(np.full((height, width, channels), value, dtype=np.float32))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def same_as(self, other: "ImageBuffer") -> bool:
        """逐位相等"""
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))


@dataclass(frozen=True, eq=False)
class WarpResult:
    image: ImageBuffer
    valid_mask: np.ndarray
    valid_fraction: float


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 射影变换，构造时归一化为单位 Frobenius 范数且 H[2,2] > 0"""
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise GeometryError(f"单应矩阵必须是有限的 3x3 矩阵，收到形状 {m.shape}")
        norm = np.linalg.norm(m)
        if norm == 0:
            raise GeometryError("单应矩阵为零矩阵")
        m = m / norm
        pivot = m[2, 2] if abs(m[2, 2]) > 1e-12 else m.flat[np.argmax(np.abs(m))]
        if pivot < 0:
            m = -m
        if abs(np.linalg.det(m)) <= MIN_HOMOGRAPHY_DET:
            raise GeometryError(f"单应矩阵不可逆 (det={np.linalg.det(m):.3e})")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """把 (N, 2) 像素坐标映射到目标图像"""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        h = np.hstack([pts, np.ones((len(pts), 1))]) @ self.matrix.T
        return h[:, :2] / h[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        """self ∘ other：先做 other 再做 self"""
        return Homography(self.matrix @ other.matrix)


class VehiclePose(NamedTuple):
    """平面车辆位姿：后轴中心 (x, y) 与航向角（弧度，逆时针为正）"""
    x: float
    y: float
    heading: float


# --- 位姿与投影 ---

def camera_rotation(pose: CameraPose) -> np.ndarray:
    """相机到世界的旋转 R_wc，列为相机三个轴在世界系中的方向"""
    return pose.rotation() @ CAM_AXES


def compose_pose(vehicle: VehiclePose, camera: CameraPose) -> CameraPose:
    """车辆在世界中的位姿 ∘ 相机在车辆中的位姿 → 相机在世界中的位姿"""
    c, s = np.cos(vehicle.heading), np.sin(vehicle.heading)
    cx, cy, cz = camera.position
    return CameraPose(
        position=(float(vehicle.x + c * cx - s * cy), float(vehicle.y + s * cx + c * cy), float(cz)),
        yaw=float(vehicle.heading + camera.yaw),
        pitch=camera.pitch,
        roll=camera.roll,
    )


def project_points(points: np.ndarray, pose: CameraPose, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """
    把 (N, 3) 世界点投影到像素。

    Returns:
        tuple: (N, 2) 像素坐标, (N,) 深度；深度 <= 0 的点像素坐标无意义。
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p_cam = (pts - np.asarray(pose.position)) @ camera_rotation(pose)
    depth = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([intr.fx * p_cam[:, 0] / depth + intr.cx,
                       intr.fy * p_cam[:, 1] / depth + intr.cy], axis=1)
    return uv, depth


def pixel_rays(pose: CameraPose, intr: CameraIntrinsics, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """像素 (u, v) 的视线方向（世界系，未归一化，相机系 z 分量为 1）"""
    rays = np.stack([(np.asarray(u, dtype=np.float64) - intr.cx) / intr.fx,
                     (np.asarray(v, dtype=np.float64) - intr.cy) / intr.fy,
                     np.ones(np.shape(u))], axis=-1)
    return rays @ camera_rotation(pose).T


def ground_points_from_pixels(pixels: np.ndarray, pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    """像素反投影到地面 z=0；视线不与地面相交的像素返回 NaN"""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    d = pixel_rays(pose, intr, px[:, 0], px[:, 1])
    t = np.asarray(pose.position)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(d[:, 2] < 0, -t[2] / d[:, 2], np.nan)
    return t[None, :2] + lam[:, None] * d[:, :2]


def horizon_row(pose: CameraPose, intr: CameraIntrinsics) -> float:
    """地平线在主点所在列上的行坐标；无侧倾时为 cy - fy·tan(pitch)"""
    r = camera_rotation(pose)
    if abs(r[2, 1]) < 1e-12:
        raise GeometryError("相机光轴竖直，图像中不存在地平线")
    return float(intr.cy - intr.fy * r[2, 2] / r[2, 1])


def _ground_matrix(pose: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    """地面点 (x, y, 1) → 齐次像素，G = K·R_wcᵀ·[e1 e2 -t]"""
    tx, ty, tz = pose.position
    if tz <= MIN_CAMERA_HEIGHT_M:
        raise GeometryError(f"相机高度 {tz} m 退化（必须在地面以上）")
    basis = np.array([[1.0, 0.0, -tx],
                      [0.0, 1.0, -ty],
                      [0.0, 0.0, -tz]])
    return intr.matrix() @ camera_rotation(pose).T @ basis


def _rotation_matrix(src: CameraPose, dst: CameraPose, intr: CameraIntrinsics) -> np.ndarray:
    k = intr.matrix()
    return k @ camera_rotation(dst).T @ camera_rotation(src) @ np.linalg.inv(k)


def ground_plane_homography(src: CameraPose, dst: CameraPose, intr: CameraIntrinsics) -> Homography:
    """地面点在 src 图像中的像素 → 在 dst 图像中的像素"""
    return Homography(_ground_matrix(dst, intr) @ np.linalg.inv(_ground_matrix(src, intr)))


def rotation_homography(src: CameraPose, dst: CameraPose, intr: CameraIntrinsics) -> Homography:
    """无穷远点的映射，与平移无关"""
    return Homography(_rotation_matrix(src, dst, intr))


# --- 采样 ---

def bilinear_sample(pixels: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    双线性采样。0 ≤ x ≤ W-1 且 0 ≤ y ≤ H-1 时有效，否则填 0。
    整数坐标处的结果与原像素逐位相等。
    """
    h, w = pixels.shape[:2]
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.where(valid, xs, 0.0)
    yc = np.where(valid, ys, 0.0)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xc - x0)[..., None]
    fy = (yc - y0)[..., None]
    top = (1.0 - fx) * pixels[y0, x0] + fx * pixels[y0, x1]
    bottom = (1.0 - fx) * pixels[y1, x0] + fx * pixels[y1, x1]
    out = (1.0 - fy) * top + fy * bottom
    return np.where(valid[..., None], out, 0.0), valid


def pixel_grid(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) 网格，形状 (H, W)"""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def _check_raster(img: ImageBuffer, intr: CameraIntrinsics):
    if (img.width, img.height) != (intr.width, intr.height):
        raise GeometryError(f"图像尺寸 {img.width}x{img.height} 与相机栅格 {intr.width}x{intr.height} 不一致")


def _apply_raw(m: np.ndarray, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = m[0, 0] * u + m[0, 1] * v + m[0, 2]
    y = m[1, 0] * u + m[1, 1] * v + m[1, 2]
    w = m[2, 0] * u + m[2, 1] * v + m[2, 2]
    return x, y, w


def warp_viewpoint(img: ImageBuffer, src: CameraPose, dst: CameraPose, intr: CameraIntrinsics) -> WarpResult:
    """
    平地假设下的视角变换：把 src 位姿拍到的图像重投影到 dst 位姿。

    地平线以下的像素用地平面单应，地平线及以上的像素视为无穷远点，
    用只含旋转的单应。源相机背后或栅格之外的位置填 0，并记入有效掩码。
    """
    _check_raster(img, intr)
    if src == dst:
        return WarpResult(ImageBuffer(img.pixels), np.ones((img.height, img.width), dtype=bool), 1.0)

    u, v = pixel_grid(intr.width, intr.height)
    ground = pixel_rays(dst, intr, u, v)[..., 2] < 0

    # 未归一化的矩阵保留了深度符号：w = z_src / z_dst
    m_ground = _ground_matrix(src, intr) @ np.linalg.inv(_ground_matrix(dst, intr))
    xg, yg, wg = _apply_raw(m_ground, u, v)
    if src.same_orientation(dst):
        xr, yr, wr = u, v, np.ones_like(u)
    else:
        xr, yr, wr = _apply_raw(_rotation_matrix(dst, src, intr), u, v)

    x = np.where(ground, xg, xr)
    y = np.where(ground, yg, yr)
    w = np.where(ground, wg, wr)
    in_front = w > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = np.where(in_front, x / w, np.nan)
        ys = np.where(in_front, y / w, np.nan)
    # 旋转相同时天空部分是恒等映射，直接使用整数坐标
    if src.same_orientation(dst):
        xs = np.where(ground, xs, u)
        ys = np.where(ground, ys, v)

    values, inside = bilinear_sample(img.pixels, xs, ys)
    mask = in_front & inside
    fraction = float(mask.mean())
    logging.debug(f"视角变换完成，有效像素比例 {fraction:.4f}")
    return WarpResult(ImageBuffer(values), mask, fraction)


# --- 镜头 ---

def undistort_normalized(lens: LensModel, xd: np.ndarray, yd: np.ndarray,
                         iterations: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """用牛顿迭代求解 r·f(r²) = r_d，返回无畸变的归一化坐标"""
    rd = np.hypot(xd, yd)
    if lens.is_identity:
        return np.asarray(xd, dtype=np.float64), np.asarray(yd, dtype=np.float64)
    r = rd.copy()
    for _ in range(iterations):
        r2 = r * r
        g = r * lens.factor(r2) - rd
        dg = 1.0 + r2 * (3 * lens.k1 + r2 * (5 * lens.k2 + r2 * 7 * lens.k3))
        r = r - g / dg
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(rd > 0, r / rd, 1.0)
    return xd * scale, yd * scale


def rectify_pinhole(img: ImageBuffer, lens: LensModel, src: CameraIntrinsics, dst: CameraIntrinsics) -> ImageBuffer:
    """
    把带径向畸变的图像重采样为理想针孔相机 dst 的图像。
    dst 的每个像素对应的归一化坐标乘以畸变因子后，在 src 图像中双线性采样。
    """
    _check_raster(img, src)
    if lens.is_identity and src == dst:
        return ImageBuffer(img.pixels)
    r_max = dst.max_normalized_radius()
    if not lens.is_monotone(r_max):
        raise GeometryError(f"畸变函数在目标栅格半径 [0, {r_max:.3f}] 上不单调")
    u, v = pixel_grid(dst.width, dst.height)
    xn = (u - dst.cx) / dst.fx
    yn = (v - dst.cy) / dst.fy
    f = lens.factor(xn * xn + yn * yn)
    values, _ = bilinear_sample(img.pixels, src.fx * xn * f + src.cx, src.fy * yn * f + src.cy)
    return ImageBuffer(values)


def quantize_unit(values: np.ndarray) -> np.ndarray:
    """8 位传感器量化：四舍五入到 k/255"""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5), 0, 255) / 255.0
