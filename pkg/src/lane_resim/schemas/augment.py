# src/lane_resim/schemas/augment.py
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .geometry import CAMERA_IDS
from .patches import PatchConfig

# 与 ResimConfig 的默认有效范围一致
MAX_VALID_SHIFT_M = 1.5
MAX_VALID_YAW_DEG = 10.0


class AugmentSpec(BaseModel):
    """
    离线增强参数。平移为正表示车辆被虚拟地移向右侧，偏航为正表示向左转。
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    shift_max_m: float = Field(1.0, ge=0, le=MAX_VALID_SHIFT_M, description="平移服从 U(-max, max)")
    yaw_max_deg: float = Field(5.0, ge=0, le=MAX_VALID_YAW_DEG, description="偏航服从 U(-max, max)")
    camera_weights: dict[str, float] = Field(
        default_factory=lambda: {"left": 1.0 / 3.0, "center": 1.0 / 3.0, "right": 1.0 / 3.0})
    label_source: Literal["centerline", "human_path"] = "centerline"
    patch: PatchConfig = Field(default_factory=PatchConfig)
    y_only_labels: bool = Field(True, description="标签只存 x=1..100 m 处的横向偏移")
    samples_per_frame: int = Field(4, ge=1)
    frame_stride: int = Field(1, ge=1, description="每隔多少帧取一帧做增强")
    min_valid_fraction: float = Field(0.7, gt=0, le=1)
    max_attempts: int = Field(8, ge=1)
    seed: int | None = Field(None, description="为空时使用实验的全局种子")

    @field_validator('camera_weights')
    @classmethod
    def _weights_are_distribution(cls, value: dict[str, float]) -> dict[str, float]:
        unknown = set(value) - set(CAMERA_IDS)
        if unknown:
            raise ValueError(f"未知的相机: {sorted(unknown)}")
        if any(w < 0 for w in value.values()):
            raise ValueError("相机权重不能为负")
        if abs(sum(value.values()) - 1.0) > 1e-9:
            raise ValueError(f"相机权重之和必须为 1，当前为 {sum(value.values())}")
        return value

    def weight_vector(self) -> list[float]:
        """按 CAMERA_IDS 顺序排列的权重"""
        return [float(self.camera_weights.get(cam, 0.0)) for cam in CAMERA_IDS]
