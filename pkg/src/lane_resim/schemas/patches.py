# src/lane_resim/schemas/patches.py
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class RoiSpec(BaseModel):
    """常规 ROI：53° 水平视场，顶边对齐地平线，底行覆盖 7.6 m 宽的地面"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    hfov_deg: float = Field(53.0, gt=0, lt=180)
    bottom_width_m: float = Field(7.6, gt=0)
    out_w: int = Field(209, ge=1)
    out_h: int = Field(65, ge=1)

    @property
    def pixels_per_degree(self) -> float:
        return self.out_w / self.hfov_deg


class MultiResSpec(BaseModel):
    """
    多分辨率图块参数。源区域尺寸自上而下线性增大；
    ratio_w / ratio_h 为底部源区域与顶部源区域的宽/高之比。
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    roi_bw: float = Field(360.0, gt=0, description="梯形 ROI 底边宽度（源像素）")
    roi_h: float = Field(120.0, gt=0, description="梯形 ROI 高度（源像素）")
    patch_w: int = Field(209, ge=1)
    patch_h: int = Field(113, ge=1)
    ratio_w: float = Field(2.0, ge=1.0)
    ratio_h: float = Field(8.0, ge=1.0)

    @model_validator(mode='after')
    def _check_sizes(self):
        if self.roi_bw < self.patch_w:
            raise ValueError(f"roi_bw ({self.roi_bw}) 不能小于 patch_w ({self.patch_w})")
        if self.roi_h < self.patch_h:
            raise ValueError(f"roi_h ({self.roi_h}) 不能小于 patch_h ({self.patch_h})")
        if self.patch_h == 1 and self.ratio_h != 1.0:
            raise ValueError("patch_h 为 1 时 ratio_h 只能为 1")
        if self.patch_h == 1 and self.ratio_w != 1.0:
            raise ValueError("patch_h 为 1 时 ratio_w 只能为 1")
        return self

    @property
    def roi_top_width(self) -> float:
        # 由 ratio_w 推出，不单独配置
        return self.roi_bw / self.ratio_w

    def compute_ratio(self, regular_out_h: int = 65) -> float:
        """相对常规图块（同宽）的像素数之比"""
        return self.patch_h / regular_out_h


class SourceAreaCoeffs(BaseModel):
    """dW(i) = a_w·i + b_w，dH(i) = a_h·i + b_h，i 为行号"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    a_w: float
    b_w: float
    a_h: float
    b_h: float

    def dw(self, rows: np.ndarray | int) -> np.ndarray:
        return self.a_w * np.asarray(rows, dtype=np.float64) + self.b_w

    def dh(self, rows: np.ndarray | int) -> np.ndarray:
        return self.a_h * np.asarray(rows, dtype=np.float64) + self.b_h

    def row_edges(self, patch_h: int) -> np.ndarray:
        """各行源区域的上边界偏移（闭式累加，长度 patch_h + 1）"""
        i = np.arange(patch_h + 1, dtype=np.float64)
        return self.a_h * (i * (i - 1.0) / 2.0) + self.b_h * i


class PatchConfig(BaseModel):
    """图块类型及其参数"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    kind: Literal["regular", "multires"] = "regular"
    roi: RoiSpec = Field(default_factory=RoiSpec)
    multires: MultiResSpec = Field(default_factory=MultiResSpec)

    @property
    def shape(self) -> tuple[int, int]:
        """(宽, 高)"""
        if self.kind == "multires":
            return self.multires.patch_w, self.multires.patch_h
        return self.roi.out_w, self.roi.out_h
