# src/lane_resim/schemas/geometry.py
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

# --- 标准虚拟相机：后轴上方 1.47 m，后轴前方 1.77 m，沿车辆中线 ---
STANDARD_CAMERA_HEIGHT_M = 1.47
STANDARD_CAMERA_FORWARD_M = 1.77

CAMERA_IDS = ("left", "center", "right")


class CameraIntrinsics(BaseModel):
    """针孔相机内参，单位均为像素"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    fx: float = Field(320.0, gt=0, description="水平焦距")
    fy: float = Field(320.0, gt=0, description="垂直焦距")
    cx: float = Field(192.0, description="主点列坐标")
    cy: float = Field(48.0, description="主点行坐标")
    width: int = Field(384, ge=1)
    height: int = Field(216, ge=1)

    @model_validator(mode='after')
    def _principal_point_inside(self):
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"主点 ({self.cx}, {self.cy}) 不在 {self.width}x{self.height} 栅格内")
        return self

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def max_normalized_radius(self) -> float:
        """栅格四角在归一化坐标下的最大半径"""
        xs = np.array([0.0, self.width - 1.0]) - self.cx
        ys = np.array([0.0, self.height - 1.0]) - self.cy
        return float(np.max(np.hypot(xs[:, None] / self.fx, ys[None, :] / self.fy)))


class LensModel(BaseModel):
    """径向畸变 r_d = r·(1 + k1·r² + k2·r⁴ + k3·r⁶)，作用于归一化坐标"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    r_max: float = Field(1.0, gt=0, description="需要保证单调的归一化半径上限")

    @model_validator(mode='after')
    def _monotone(self):
        if not self.is_monotone(self.r_max):
            raise ValueError(f"畸变函数在 [0, {self.r_max}] 上不单调: k=({self.k1}, {self.k2}, {self.k3})")
        return self

    @property
    def is_identity(self) -> bool:
        return self.k1 == 0.0 and self.k2 == 0.0 and self.k3 == 0.0

    def factor(self, r2: np.ndarray) -> np.ndarray:
        return 1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))

    def is_monotone(self, r_max: float, samples: int = 2048) -> bool:
        r2 = np.linspace(0.0, r_max, samples) ** 2
        slope = 1.0 + r2 * (3 * self.k1 + r2 * (5 * self.k2 + r2 * 7 * self.k3))
        return bool(np.all(slope > 0))


class CameraPose(BaseModel):
    """
    相机位姿。位置单位为米；车辆坐标系原点在后轴中心，x 向前、y 向左、z 向上。
    姿态为 yaw/pitch/roll（弧度），pitch 为正表示低头。
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    position: tuple[float, float, float] = (STANDARD_CAMERA_FORWARD_M, 0.0, STANDARD_CAMERA_HEIGHT_M)
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def rotation(self) -> np.ndarray:
        """机体旋转 Rz(yaw)·Ry(pitch)·Rx(roll)"""
        cy, sy = np.cos(self.yaw), np.sin(self.yaw)
        cp, sp = np.cos(self.pitch), np.sin(self.pitch)
        cr, sr = np.cos(self.roll), np.sin(self.roll)
        rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
        ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
        rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
        return rz @ ry @ rx

    def same_orientation(self, other: "CameraPose") -> bool:
        return (self.yaw, self.pitch, self.roll) == (other.yaw, other.pitch, other.roll)


STANDARD_POSE = CameraPose()


class CameraRig(BaseModel):
    """三台实装相机（左/中/右，横向错开）与标准虚拟相机"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    intrinsics: CameraIntrinsics = Field(default_factory=CameraIntrinsics)
    lens: LensModel = Field(default_factory=LensModel)
    camera_offset_m: float = Field(0.5, ge=0, description="左右相机相对中线的横向距离")
    standard: CameraPose = STANDARD_POSE

    @model_validator(mode='after')
    def _mounted_above_ground(self):
        if self.standard.position[2] <= 0:
            raise ValueError("相机必须安装在地面以上 (z > 0)")
        return self

    @property
    def cameras(self) -> dict[str, CameraPose]:
        x, y, z = self.standard.position
        orientation = dict(yaw=self.standard.yaw, pitch=self.standard.pitch, roll=self.standard.roll)
        return {
            "left": CameraPose(position=(x, y + self.camera_offset_m, z), **orientation),
            "center": self.standard,
            "right": CameraPose(position=(x, y - self.camera_offset_m, z), **orientation),
        }
