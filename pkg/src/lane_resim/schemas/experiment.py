# src/lane_resim/schemas/experiment.py
import tomllib
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..utils.report_io import canonical_hash
from .augment import AugmentSpec
from .geometry import CameraRig
from .metrics import MetricsConfig
from .resim import ResimSection
from .world import WorldConfig


class ConfigError(Exception):
    """实验配置文件无法读取或解析"""
    pass


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid', populate_by_name=True)

    ridge_lambda: float = Field(1.0, ge=0, alias="lambda")
    pool: int = Field(5, ge=1, description="特征池化因子，1 表示直接展开图块")


class ExperimentConfig(BaseModel):
    """
    TOML 实验配置。所有段都禁止未知键，避免拼写错误被静默忽略。
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    seed: int = Field(0, ge=0, lt=2**63)
    world: WorldConfig = Field(default_factory=WorldConfig)
    rig: CameraRig = Field(default_factory=CameraRig)
    augment: AugmentSpec = Field(default_factory=AugmentSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    resim: ResimSection = Field(default_factory=ResimSection)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)

    @model_validator(mode='after')
    def _vehicle_fits_lane(self):
        if self.resim.vehicle.track_m >= self.world.road.lane_width_m:
            raise ValueError(
                f"车辆轮距 {self.resim.vehicle.track_m} m 不小于车道宽度 {self.world.road.lane_width_m} m")
        return self

    @property
    def augment_seed(self) -> int:
        return self.seed if self.augment.seed is None else self.augment.seed

    def config_hash(self) -> str:
        return canonical_hash(self.model_dump(mode="json", by_alias=True))


def load_experiment_config(path: str | Path | None, seed: int | None = None) -> ExperimentConfig:
    """
    读取并校验 TOML 实验配置；path 为空时使用全部默认值。
    --seed 覆盖配置文件里的 seed。
    """
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"实验配置文件不存在: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"实验配置文件 {path} 不是合法的 TOML: {e}") from e
    if seed is not None:
        data["seed"] = seed
    return ExperimentConfig.model_validate(data)
