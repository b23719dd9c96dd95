# src/lane_resim/schemas/world.py
import math
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# 轨迹标签的前视长度与横向偏移上限；弯道必须让 100 m 处的中心线点落在上限以内
LABEL_HORIZON_M = 100.0
MAX_LABEL_OFFSET_M = 20.0


def arc_label_offset(radius_m: float) -> float:
    """沿半径为 radius_m 的圆弧前行 LABEL_HORIZON_M 后的横向偏移（切线坐标系）"""
    r = abs(radius_m)
    return r * (1.0 - math.cos(min(LABEL_HORIZON_M / r, math.pi)))


class StraightSegment(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal["straight"] = "straight"
    length_m: float = Field(..., gt=0)


class ArcSegment(BaseModel):
    """圆弧段，radius_m 为正表示左转"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal["arc"] = "arc"
    radius_m: float
    angle_rad: float = Field(..., gt=0)

    @field_validator('radius_m')
    @classmethod
    def _radius_large_enough(cls, value: float) -> float:
        if abs(value) <= 10.0:
            raise ValueError(f"圆弧半径的绝对值必须大于 10 m，收到 {value}")
        if arc_label_offset(value) >= MAX_LABEL_OFFSET_M:
            raise ValueError(f"圆弧半径 {value} m 过小: {LABEL_HORIZON_M:.0f} m 处的中心线横向偏移 "
                             f"{arc_label_offset(value):.2f} m 超出 ±{MAX_LABEL_OFFSET_M} m")
        return value

    @property
    def length_m(self) -> float:
        return abs(self.radius_m) * self.angle_rad


class ForkSegment(BaseModel):
    """
    分岔段（匝道）：主车道保持直行，分岔一侧的车道线在此段不喷涂，
    另画一条逐渐分离的匝道边线。
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal["fork"] = "fork"
    length_m: float = Field(..., gt=0)
    side: Literal["left", "right"] = "right"
    divergence_m: float = Field(3.7, gt=0, description="段末匝道边线相对车道边界的横向距离")


RoadSegment = Annotated[Union[StraightSegment, ArcSegment, ForkSegment], Field(discriminator="kind")]


class MarkingSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    dash_length_m: float = Field(3.0, gt=0)
    gap_m: float = Field(9.0, ge=0)
    line_width_m: float = Field(0.15, gt=0)
    left_style: Literal["dashed", "solid"] = "dashed"
    right_style: Literal["dashed", "solid"] = "solid"
    albedo: float = Field(0.85, ge=0, le=1)


class BillboardSpec(BaseModel):
    """路侧立柱（电线杆），专门用来制造平地假设下的变换伪影"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    enabled: bool = True
    spacing_min_m: float = Field(40.0, gt=0)
    spacing_max_m: float = Field(120.0, gt=0)
    offset_min_m: float = Field(3.0, ge=0, description="到车道边界的最小横向距离")
    offset_max_m: float = Field(6.0, ge=0)
    height_m: float = Field(6.0, gt=0)
    width_m: float = Field(0.3, gt=0)
    albedo: float = Field(0.95, ge=0, le=1)

    @model_validator(mode='after')
    def _ranges(self):
        if self.spacing_max_m < self.spacing_min_m or self.offset_max_m < self.offset_min_m:
            raise ValueError("立柱间距/偏移范围的上限不能小于下限")
        return self


class RoadSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    segments: list[RoadSegment] = Field(..., min_length=1)
    lane_width_m: float = Field(3.7, gt=0)
    shoulder_m: float = Field(2.5, ge=0)
    vehicle_track_m: float = Field(1.6, gt=0, description="用于校验车道宽度的车辆轮距")
    asphalt_albedo: float = Field(0.35, ge=0, le=1)
    grass_albedo: float = Field(0.22, ge=0, le=1)
    texture_contrast: float = Field(0.06, ge=0, le=0.2)
    markings: MarkingSpec = Field(default_factory=MarkingSpec)
    billboards: BillboardSpec = Field(default_factory=BillboardSpec)

    @model_validator(mode='after')
    def _lane_wider_than_vehicle(self):
        if self.lane_width_m <= self.vehicle_track_m:
            raise ValueError(f"车道宽度 {self.lane_width_m} m 必须大于轮距 {self.vehicle_track_m} m")
        return self

    @property
    def length_m(self) -> float:
        return float(sum(seg.length_m for seg in self.segments))


class DriveSpec(BaseModel):
    """人类驾驶（采集车）参数"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    speed_mps: float = Field(20.0, gt=0)
    lateral_noise_sd_m: float = Field(0.2, ge=0)
    correlation_length_m: float = Field(50.0, gt=0)
    dt_s: float = Field(0.05, gt=0)
    frame_rate_hz: float = Field(10.0, gt=0)
    # 轨迹末端留给标签/预测的前视余量
    end_margin_m: float = Field(120.0, ge=0)


class WorldConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    road: RoadSpec = Field(default_factory=lambda: RoadSpec(segments=[
        StraightSegment(length_m=400.0),
        ArcSegment(radius_m=300.0, angle_rad=0.6),
        StraightSegment(length_m=300.0),
        ArcSegment(radius_m=-300.0, angle_rad=0.5),
        StraightSegment(length_m=400.0),
    ]))
    drive: DriveSpec = Field(default_factory=DriveSpec)
