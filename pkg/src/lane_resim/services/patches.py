# src/lane_resim/services/patches.py
"""
ROI 裁剪与多分辨率图块。

源区域统一用“像素边界坐标”描述：像素 k 覆盖 [k-0.5, k+0.5)。
常规图块、多分辨率图块和均匀下采样共用同一个按面积加权的重采样核心，
因此 ratio_w = ratio_h = 1 的多分辨率图块与均匀下采样逐位相等。
"""
from dataclasses import dataclass

import numpy as np

from ..schemas.geometry import CameraIntrinsics, CameraPose
from ..schemas.patches import MultiResSpec, PatchConfig, RoiSpec, SourceAreaCoeffs
from .geometry import ImageBuffer, horizon_row, project_points


class PatchError(Exception):
    """自定义图块构建异常"""
    pass


_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class RoiGeometry:
    """源图像中的矩形 ROI：中心列、顶边、宽、高（像素边界坐标）"""
    center_x: float
    top_y: float
    width: float
    height: float


def _overlap_weights(edges: np.ndarray, n: int) -> np.ndarray:
    """区间 [e_j, e_{j+1}) 与像素 [k-0.5, k+0.5) 的重叠长度，形状 (len(edges)-1, n)"""
    lo = edges[:-1, None]
    hi = edges[1:, None]
    k = np.arange(n, dtype=np.float64)[None, :]
    return np.clip(np.minimum(hi, k + 0.5) - np.maximum(lo, k - 0.5), 0.0, None)


def _resample(img: ImageBuffer, center_x: float, top_y: float, coeffs: SourceAreaCoeffs,
              out_w: int, out_h: int) -> ImageBuffer:
    """
    第 i 行的源区域高 dH(i)、宽 dW(i)，整行以 center_x 为中心水平排布；
    每个输出像素取其源区域的精确面积加权平均。
    """
    height, width, channels = img.pixels.shape
    rows = np.arange(out_h)
    row_edges = top_y + coeffs.row_edges(out_h)
    dw = coeffs.dw(rows)
    if np.any(dw <= 0) or np.any(coeffs.dh(rows) <= 0):
        raise PatchError("源区域尺寸必须为正")
    half_w = out_w * dw / 2.0
    if (row_edges[0] < -0.5 - _EDGE_TOL or row_edges[-1] > height - 0.5 + _EDGE_TOL
            or np.any(center_x - half_w < -0.5 - _EDGE_TOL) or np.any(center_x + half_w > width - 0.5 + _EDGE_TOL)):
        raise PatchError(
            f"ROI 超出源图像 {width}x{height}: 行 [{row_edges[0]:.3f}, {row_edges[-1]:.3f}], "
            f"最大半宽 {half_w.max():.3f}，中心列 {center_x:.3f}")

    wv = _overlap_weights(row_edges, height)
    rowsum = wv.sum(axis=1)
    # 先做竖直方向加权：每个输出行得到一条 (W, C) 的源行
    collapsed = (wv @ img.pixels.reshape(height, width * channels).astype(np.float64)).reshape(out_h, width, channels)
    out = np.empty((out_h, out_w, channels), dtype=np.float64)
    j = np.arange(out_w + 1, dtype=np.float64)
    for i in range(out_h):
        col_edges = center_x - half_w[i] + j * dw[i]
        wh = _overlap_weights(col_edges, width)
        out[i] = (wh @ collapsed[i]) / (wh.sum(axis=1)[:, None] * rowsum[i])
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def uniform_downsample(img: ImageBuffer, center_x: float, top_y: float, roi_w: float, roi_h: float,
                       out_w: int, out_h: int) -> ImageBuffer:
    """常规面积平均下采样：所有源区域大小相同"""
    coeffs = SourceAreaCoeffs(a_w=0.0, b_w=roi_w / out_w, a_h=0.0, b_h=roi_h / out_h)
    return _resample(img, center_x, top_y, coeffs, out_w, out_h)


def regular_roi_geometry(roi: RoiSpec, pose: CameraPose, intr: CameraIntrinsics) -> RoiGeometry:
    """
    顶边对齐地平线；宽度对应水平视场 hfov；
    最后一行的像素中心落在地面宽度恰为 bottom_width_m 的深度上。
    """
    if pose.roll != 0.0:
        raise PatchError("ROI 裁剪要求相机无侧倾")
    half = np.tan(np.radians(roi.hfov_deg) / 2.0)
    width = 2.0 * intr.fx * half
    depth = roi.bottom_width_m / (2.0 * half)
    v_h = horizon_row(pose, intr)
    x, y, _ = pose.position
    ground = np.array([[x + depth * np.cos(pose.yaw), y + depth * np.sin(pose.yaw), 0.0]])
    uv, z = project_points(ground, pose, intr)
    if z[0] <= 0:
        raise PatchError("ROI 底边的地面点不在相机前方")
    v_b = float(uv[0, 1])
    height = (v_b - v_h) / (1.0 - 1.0 / (2.0 * roi.out_h))
    return RoiGeometry(center_x=intr.cx, top_y=v_h, width=width, height=height)


def crop_roi(img: ImageBuffer, roi: RoiSpec, pose: CameraPose, intr: CameraIntrinsics) -> ImageBuffer:
    """标准相机图像 → out_w × out_h 常规图块"""
    if (img.width, img.height) != (intr.width, intr.height):
        raise PatchError(f"图像尺寸 {img.width}x{img.height} 与相机栅格不一致")
    g = regular_roi_geometry(roi, pose, intr)
    return uniform_downsample(img, g.center_x, g.top_y, g.width, g.height, roi.out_w, roi.out_h)


def solve_multires_coeffs(spec: MultiResSpec) -> SourceAreaCoeffs:
    """
    由底行宽度、宽/高比例与总高度约束求出源区域尺寸的线性系数（闭式解）。
    """
    dw_last = spec.roi_bw / spec.patch_w
    dw0 = dw_last / spec.ratio_w
    dh0 = 2.0 * spec.roi_h / (spec.patch_h * (1.0 + spec.ratio_h))
    dh_last = spec.ratio_h * dh0
    steps = spec.patch_h - 1
    a_w = (dw_last - dw0) / steps if steps > 0 else 0.0
    a_h = (dh_last - dh0) / steps if steps > 0 else 0.0
    if min(dw0, dw_last, dh0, dh_last) <= 0:
        raise PatchError(f"参数导致非正的源区域: dW0={dw0}, dH0={dh0}")
    return SourceAreaCoeffs(a_w=a_w, b_w=dw0, a_h=a_h, b_h=dh0)


def source_area_table(coeffs: SourceAreaCoeffs, patch_w: int, patch_h: int) -> dict[str, np.ndarray]:
    """
    重采样核心实际使用的逐行源区域：行边界、行高、列宽。
    """
    edges = coeffs.row_edges(patch_h)
    widths = coeffs.dw(np.arange(patch_h))
    col_edges = (np.arange(patch_w + 1)[None, :] - patch_w / 2.0) * widths[:, None]
    return {"row_edges": edges, "row_heights": np.diff(edges), "col_widths": np.diff(col_edges, axis=1)}


def multires_constraint_residuals(spec: MultiResSpec, coeffs: SourceAreaCoeffs) -> dict[str, float]:
    """六个约束的残差（绝对值）：两个线性形式与四个边界条件"""
    rows = np.arange(spec.patch_h)
    table = source_area_table(coeffs, spec.patch_w, spec.patch_h)
    dw = coeffs.dw(rows)
    dh = coeffs.dh(rows)
    return {
        "linear_w": float(np.max(np.abs(table["col_widths"] - (coeffs.a_w * rows + coeffs.b_w)[:, None]))),
        "linear_h": float(np.max(np.abs(table["row_heights"] - (coeffs.a_h * rows + coeffs.b_h)))),
        "bottom_width": float(abs(dw[-1] - spec.roi_bw / spec.patch_w)),
        "ratio_w": float(abs(dw[-1] / dw[0] - spec.ratio_w)),
        "ratio_h": float(abs(dh[-1] / dh[0] - spec.ratio_h)),
        "total_height": float(abs(table["row_edges"][-1] - spec.roi_h)),
    }


def multires_origin(pose: CameraPose, intr: CameraIntrinsics) -> tuple[float, float]:
    """梯形 ROI 顶边中心：主点列、地平线行"""
    return intr.cx, horizon_row(pose, intr)


def build_multires_patch(img: ImageBuffer, spec: MultiResSpec, roi_origin: tuple[float, float]) -> ImageBuffer:
    """
    多分辨率图块：源区域自上而下线性增大，每个源区域平均成一个像素。
    roi_origin 为梯形 ROI 顶边中心 (列, 行)。
    """
    coeffs = solve_multires_coeffs(spec)
    center_x, top_y = roi_origin
    return _resample(img, center_x, top_y, coeffs, spec.patch_w, spec.patch_h)


def make_patch(img: ImageBuffer, cfg: PatchConfig, pose: CameraPose, intr: CameraIntrinsics) -> ImageBuffer:
    """按配置生成标准相机图像的图块"""
    if cfg.kind == "multires":
        return build_multires_patch(img, cfg.multires, multires_origin(pose, intr))
    return crop_roi(img, cfg.roi, pose, intr)


def pool_features(patch: ImageBuffer, pool: int) -> np.ndarray:
    """
    面积平均池化并展开为一维 float64 特征：图块等分为 ceil(H/pool) × ceil(W/pool)
    个区块，区块边界不落在像素边界上时按重叠面积加权。pool=1 时直接展开。
    """
    if pool < 1:
        raise PatchError(f"池化因子必须 ≥ 1，收到 {pool}")
    pixels = patch.pixels.astype(np.float64)
    if pool == 1:
        return pixels.ravel()
    h, w, c = pixels.shape
    out_h, out_w = -(-h // pool), -(-w // pool)
    wv = _overlap_weights(-0.5 + np.linspace(0.0, h, out_h + 1), h)
    wh = _overlap_weights(-0.5 + np.linspace(0.0, w, out_w + 1), w)
    wv /= wv.sum(axis=1, keepdims=True)
    wh /= wh.sum(axis=1, keepdims=True)
    pooled = np.einsum("ik,klc,jl->ijc", wv, pixels, wh)
    return pooled.ravel()


def pooled_size(shape: tuple[int, int], channels: int, pool: int) -> int:
    """pool_features 输出的特征维数，shape 为 (宽, 高)"""
    w, h = shape
    if pool == 1:
        return w * h * channels
    return (-(-w // pool)) * (-(-h // pool)) * channels


