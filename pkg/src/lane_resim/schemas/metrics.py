# src/lane_resim/schemas/metrics.py
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class MapaInputs(BaseModel):
    """
    左/右偏置两次重仿真的平均横向偏移（米，左为正）。
    y_hl / y_hr 为对应录制中人类驾驶的平均偏移。
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    y_l: float = Field(..., description="左偏录制上策略的平均偏移")
    y_r: float = Field(..., description="右偏录制上策略的平均偏移")
    y_hl: float = Field(..., gt=0, description="左偏录制中人类的平均偏移")
    y_hr: float = Field(..., lt=0, description="右偏录制中人类的平均偏移")


class MetricSummary(BaseModel):
    """一次重仿真的指标汇总，字段顺序即报告中的输出顺序"""
    model_config = ConfigDict(extra='forbid')

    distance_m: float = Field(..., ge=0)
    failures: int = Field(..., ge=0)
    mdbf_km: float | None = Field(None, ge=0, description="无故障时为空，见 mdbf_infinite")
    mdbf_infinite: bool = False
    precision_pct: float = Field(..., le=100)
    comfort_score: float
    mapa_pct: float | None = None
    failures_by_cause: dict[str, int] = Field(default_factory=dict)
    config_hash: str = ""


class MapaProtocol(BaseModel):
    """
    左/右偏置测试协议。偏置量以轮胎余量 (车道宽 - 轮距)/2 的比例给出，
    保证有偏置的人类驾驶仍在车道内。
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    bias_fraction: float = Field(0.8, gt=0, lt=1)
    lateral_noise_sd_m: float = Field(0.05, ge=0)
    camera: Literal["left", "center", "right"] = "center"


class MetricsConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    comfort_k: float = Field(20.0, gt=0, description="舒适度刻度，单位 1/(m/s³)")
    discrepancy_threshold_m: float = Field(0.5, gt=0, description="人类轨迹偏离中心线超过此值即列入差异报告")
    mapa: MapaProtocol = Field(default_factory=MapaProtocol)

    @model_validator(mode='after')
    def _noise_below_bias(self):
        # 噪声过大时偏置录制的符号不再稳定
        if self.mapa.lateral_noise_sd_m >= 0.5:
            raise ValueError(f"MAPA 协议的噪声标准差过大: {self.mapa.lateral_noise_sd_m}")
        return self
