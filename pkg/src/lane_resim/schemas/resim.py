# src/lane_resim/schemas/resim.py
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .patches import PatchConfig


class VehicleSpec(BaseModel):
    """运动学单车模型尺寸，原点在后轴中心"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    wheelbase_m: float = Field(2.85, gt=0)
    track_m: float = Field(1.6, gt=0)


class ResimConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    dt_s: float = Field(0.05, gt=0, le=0.2)
    max_warp_offset_m: float = Field(1.5, gt=0, description="超过此横向偏差则无法合成传感器画面")
    max_warp_yaw_deg: float = Field(10.0, gt=0)
    cooldown_m: float = Field(50.0, gt=0, description="故障复位后抑制新故障的距离")
    lookahead_time_s: float = Field(1.2, gt=0)
    min_lookahead_m: float = Field(8.0, gt=0)
    max_steering_rad: float = Field(0.5, gt=0)
    horizon_m: float = Field(100.0, gt=0, description="结束时前方仍需保留的录制路径长度")

    @model_validator(mode='after')
    def _cooldown_beyond_lookahead(self):
        if self.cooldown_m <= self.min_lookahead_m:
            raise ValueError(f"cooldown_m ({self.cooldown_m}) 必须大于前视距离 ({self.min_lookahead_m})")
        return self

    def lookahead(self, speed_mps: float) -> float:
        return max(self.min_lookahead_m, speed_mps * self.lookahead_time_s)


class ResimSection(BaseModel):
    """实验配置中的 [resim] 段"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    config: ResimConfig = Field(default_factory=ResimConfig)
    vehicle: VehicleSpec = Field(default_factory=VehicleSpec)
    patch: PatchConfig = Field(default_factory=PatchConfig)
    camera: str = "center"
