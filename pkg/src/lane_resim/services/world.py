# src/lane_resim/services/world.py
"""
程序化道路场景、人类驾驶轨迹、地平面渲染器与录制。

渲染器是其余模块的“真值”：每个像素投射一条视线，地平线以下与地面求交
后按道路几何着色，路侧立柱（竖直矩形）遮挡地面，天空为常数 0.5。
"""
import logging
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.ndimage import gaussian_filter1d

from ..config import settings
from ..schemas.geometry import CAMERA_IDS, CameraIntrinsics, CameraPose, CameraRig, LensModel
from ..schemas.world import ArcSegment, ForkSegment, RoadSpec, StraightSegment
from ..utils.image_io import ImageIOError, load_pnm, save_pnm
from ..utils.polyline import Polyline
from ..utils.report_io import ArtifactError, read_json, write_json
from .geometry import (ImageBuffer, VehiclePose, camera_rotation, compose_pose, pixel_grid,
                       quantize_unit, undistort_normalized)


class WorldError(Exception):
    """自定义场景/录制异常"""
    pass


STATION_SPACING_M = 0.25
SKY_VALUE = 0.5
MANIFEST_NAME = "manifest.json"
RECORDING_FORMAT = "lane-resim-recording"
RECORDING_VERSION = 1

# 平滑人类横向偏移所用的高斯核标准差（米）
_SMOOTHING_SIGMA_M = 2.0
# 渲染时只考虑这个距离内的立柱
_BILLBOARD_RANGE_M = 400.0


# --- 场景 ---

@dataclass(frozen=True)
class Billboard:
    """竖直矩形立柱，始终正对相机"""
    base: tuple[float, float]
    height_m: float
    width_m: float
    albedo: float


@dataclass(frozen=True)
class ForkZone:
    """分岔段：[start, end) 弧长区间内 side 一侧（+1 左，-1 右）的车道线不喷涂"""
    start: float
    end: float
    side: int
    divergence_m: float

    def ramp_offset(self, s: np.ndarray) -> np.ndarray:
        """匝道边线相对车道边界的横向距离（区间外为 0）"""
        u = np.clip((np.asarray(s) - self.start) / (self.end - self.start), 0.0, 1.0)
        return self.divergence_m * u * u


@dataclass(frozen=True, eq=False)
class WorldScene:
    spec: RoadSpec
    seed: int
    centerline: Polyline
    left_boundary: Polyline
    right_boundary: Polyline
    forks: tuple[ForkZone, ...]
    billboards: tuple[Billboard, ...]
    texture_salt: int

    @property
    def length_m(self) -> float:
        return self.centerline.length

    def summary(self) -> dict:
        return {
            "length_m": self.length_m,
            "centerline_vertices": len(self.centerline),
            "forks": len(self.forks),
            "billboards": len(self.billboards),
            "lane_width_m": self.spec.lane_width_m,
        }


def _segment_samples(seg, x0: float, y0: float, theta0: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """单段的解析采样：局部弧长 0..L（0.25 m 网格 + 精确终点），返回点、航向、长度"""
    length = seg.length_m
    u = np.arange(0.0, length, STATION_SPACING_M)
    if length - u[-1] > 1e-9:
        u = np.append(u, length)
    else:
        u[-1] = length
    if isinstance(seg, ArcSegment):
        r = seg.radius_m
        theta = theta0 + u / r
        pts = np.stack([x0 + r * (np.sin(theta) - np.sin(theta0)),
                        y0 + r * (np.cos(theta0) - np.cos(theta))], axis=1)
    elif isinstance(seg, (StraightSegment, ForkSegment)):
        theta = np.full_like(u, theta0)
        pts = np.stack([x0 + u * np.cos(theta0), y0 + u * np.sin(theta0)], axis=1)
    else:
        raise WorldError(f"未知的道路段类型: {type(seg).__name__}")
    return pts, theta, u


def build_road(spec: RoadSpec, seed: int) -> WorldScene:
    """
    依次拼接各段得到中心线（段间位置与航向连续），按解析法向偏移出左右边界，
    再用种子确定纹理和立柱位置。
    """
    x, y, theta, s0 = 0.0, 0.0, 0.0, 0.0
    points, headings = [], []
    forks = []
    for k, seg in enumerate(spec.segments):
        pts, th, u = _segment_samples(seg, x, y, theta)
        if k > 0:
            pts, th = pts[1:], th[1:]
        points.append(pts)
        headings.append(th)
        if isinstance(seg, ForkSegment):
            forks.append(ForkZone(start=s0, end=s0 + seg.length_m, side=1 if seg.side == "left" else -1,
                                  divergence_m=seg.divergence_m))
        x, y = float(pts[-1, 0]), float(pts[-1, 1])
        theta = float(th[-1])
        s0 += seg.length_m

    pts = np.concatenate(points)
    th = np.concatenate(headings)
    steps = np.hypot(*np.diff(pts, axis=0).T)
    if np.any(steps > STATION_SPACING_M + 1e-9) or np.any(steps <= 0):
        raise WorldError("道路段拼接不连续")
    normals = np.stack([-np.sin(th), np.cos(th)], axis=1)
    centerline = Polyline(pts, normals=normals)
    half = spec.lane_width_m / 2.0

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    billboards = _place_billboards(spec, centerline, tuple(forks), rng)
    salt = int(np.random.SeedSequence([seed, 2]).generate_state(1, dtype=np.uint64)[0])

    scene = WorldScene(
        spec=spec, seed=seed, centerline=centerline,
        left_boundary=centerline.offset(half), right_boundary=centerline.offset(-half),
        forks=tuple(forks), billboards=billboards, texture_salt=salt,
    )
    logging.info(f"道路已生成: 长度 {scene.length_m:.1f} m, {len(spec.segments)} 段, "
                 f"{len(forks)} 处分岔, {len(billboards)} 根立柱")
    return scene


def _fork_extra(forks: tuple[ForkZone, ...], s: np.ndarray, side: int) -> np.ndarray:
    extra = np.zeros_like(np.asarray(s, dtype=np.float64))
    for z in forks:
        if z.side == side:
            inside = (s >= z.start) & (s < z.end)
            extra = np.where(inside, np.maximum(extra, z.ramp_offset(s)), extra)
    return extra


def _place_billboards(spec: RoadSpec, centerline: Polyline, forks: tuple[ForkZone, ...],
                      rng: np.random.Generator) -> tuple[Billboard, ...]:
    cfg = spec.billboards
    if not cfg.enabled:
        return ()
    out = []
    side = 1 if rng.random() < 0.5 else -1
    s = rng.uniform(cfg.spacing_min_m, cfg.spacing_max_m)
    while s < centerline.length - 1.0:
        lateral = spec.lane_width_m / 2.0 + rng.uniform(cfg.offset_min_m, cfg.offset_max_m)
        lateral += float(_fork_extra(forks, np.array([s]), side)[0])
        base = centerline.point_at(s) + side * lateral * centerline.normal_at(s)
        out.append(Billboard(base=(float(base[0]), float(base[1])), height_m=cfg.height_m,
                             width_m=cfg.width_m, albedo=cfg.albedo))
        side = -side
        s += rng.uniform(cfg.spacing_min_m, cfg.spacing_max_m)
    return tuple(out)


# --- 地面着色 ---

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xC2B2AE3D27D4EB4F)
_M3 = np.uint64(0xBF58476D1CE4E5B9)
_M4 = np.uint64(0x94D049BB133111EB)


def _hash_unit(i: np.ndarray, j: np.ndarray, salt: int) -> np.ndarray:
    """整数格点 → [0, 1) 的确定性哈希（splitmix64 终结器）"""
    with np.errstate(over="ignore"):
        z = (i.astype(np.uint64) * _M1) ^ (j.astype(np.uint64) * _M2) ^ np.uint64(salt)
        z ^= z >> np.uint64(30)
        z *= _M3
        z ^= z >> np.uint64(27)
        z *= _M4
        z ^= z >> np.uint64(31)
    return (z >> np.uint64(11)).astype(np.float64) / 2.0 ** 53


def _value_noise(x: np.ndarray, y: np.ndarray, cell: float, salt: int) -> np.ndarray:
    """格点值噪声，smoothstep 插值，取值 [-1, 1]"""
    gx, gy = x / cell, y / cell
    i0, j0 = np.floor(gx), np.floor(gy)
    fx, fy = gx - i0, gy - j0
    sx, sy = fx * fx * (3 - 2 * fx), fy * fy * (3 - 2 * fy)
    i0, j0 = i0.astype(np.int64), j0.astype(np.int64)
    n00 = _hash_unit(i0, j0, salt)
    n10 = _hash_unit(i0 + 1, j0, salt)
    n01 = _hash_unit(i0, j0 + 1, salt)
    n11 = _hash_unit(i0 + 1, j0 + 1, salt)
    top = n00 + sx * (n10 - n00)
    bottom = n01 + sx * (n11 - n01)
    return 2.0 * (top + sy * (bottom - top)) - 1.0


def _interval_overlap(a_lo, a_hi, b_lo, b_hi):
    return np.clip(np.minimum(a_hi, b_hi) - np.maximum(a_lo, b_lo), 0.0, None)


def _dash_cumulative(s: np.ndarray, dash: float, period: float) -> np.ndarray:
    """[0, s] 内已喷涂的长度"""
    return np.floor(s / period) * dash + np.minimum(np.mod(s, period), dash)


def ground_albedo(scene: WorldScene, xy: np.ndarray, foot_lat: np.ndarray, foot_lon: np.ndarray) -> np.ndarray:
    """
    地面点的反照率。foot_lat / foot_lon 为像素在地面上的横向/纵向足迹（米），
    车道线、路面边缘按足迹做盒式滤波，纹理在足迹大于格子尺寸时淡出。
    """
    spec = scene.spec
    mk = spec.markings
    proj = scene.centerline.project(xy)
    s, d = proj.station, proj.offset
    half = spec.lane_width_m / 2.0
    lat_lo, lat_hi = d - foot_lat / 2.0, d + foot_lat / 2.0
    lon_lo, lon_hi = s - foot_lon / 2.0, s + foot_lon / 2.0

    left_extra = _fork_extra(scene.forks, s, 1)
    right_extra = _fork_extra(scene.forks, s, -1)
    asphalt = _interval_overlap(lat_lo, lat_hi, -(half + right_extra + spec.shoulder_m),
                                half + left_extra + spec.shoulder_m) / foot_lat
    albedo = spec.grass_albedo + asphalt * (spec.asphalt_albedo - spec.grass_albedo)

    x, y = xy[:, 0], xy[:, 1]
    footprint = np.maximum(foot_lat, foot_lon)
    for cell, weight, salt_offset in ((2.0, 0.6, 0), (0.5, 0.4, 1)):
        fade = np.clip(1.0 - 2.0 * footprint / cell, 0.0, 1.0)
        albedo = albedo + spec.texture_contrast * weight * fade * _value_noise(x, y, cell, scene.texture_salt + salt_offset)

    period = mk.dash_length_m + mk.gap_m
    coverage = np.zeros_like(d)
    for side, style in ((1, mk.left_style), (-1, mk.right_style)):
        lateral = _interval_overlap(lat_lo, lat_hi, side * half - mk.line_width_m / 2.0,
                                    side * half + mk.line_width_m / 2.0) / foot_lat
        if style == "dashed" and mk.gap_m > 0:
            longitudinal = (_dash_cumulative(lon_hi, mk.dash_length_m, period)
                            - _dash_cumulative(lon_lo, mk.dash_length_m, period)) / foot_lon
        else:
            longitudinal = np.ones_like(d)
        for z in scene.forks:
            if z.side == side:
                longitudinal = longitudinal - _interval_overlap(lon_lo, lon_hi, z.start, z.end) / foot_lon
        coverage = np.maximum(coverage, lateral * np.clip(longitudinal, 0.0, 1.0))
    for z in scene.forks:
        # 匝道边线：实线，仅在分岔段内
        edge = z.side * (half + z.ramp_offset(s))
        lateral = _interval_overlap(lat_lo, lat_hi, edge - mk.line_width_m / 2.0, edge + mk.line_width_m / 2.0) / foot_lat
        longitudinal = _interval_overlap(lon_lo, lon_hi, z.start, z.end) / foot_lon
        coverage = np.maximum(coverage, lateral * longitudinal)
    albedo = albedo + coverage * (mk.albedo - albedo)
    return np.clip(albedo, 0.0, 1.0)


# --- 渲染 ---

@dataclass(frozen=True, eq=False)
class RenderLayers:
    image: ImageBuffer
    ground_range: np.ndarray     # 视线到地面交点的距离，天空/立柱处为 inf
    billboard_mask: np.ndarray


def _camera_rays(intr: CameraIntrinsics, lens: LensModel | None) -> np.ndarray:
    """相机坐标系下每个像素的视线 (H, W, 3)，z 分量为 1"""
    u, v = pixel_grid(intr.width, intr.height)
    xn = (u - intr.cx) / intr.fx
    yn = (v - intr.cy) / intr.fy
    if lens is not None and not lens.is_identity:
        xn, yn = undistort_normalized(lens, xn, yn)
    return np.stack([xn, yn, np.ones_like(xn)], axis=-1)


def render_frame_layers(scene: WorldScene, cam: CameraPose, intr: CameraIntrinsics,
                        lens: LensModel | None = None) -> RenderLayers:
    """渲染一帧并返回辅助图层（地面距离、立柱掩码），用于一致性检验"""
    c = np.asarray(cam.position, dtype=np.float64)
    if c[2] <= 0:
        raise WorldError(f"相机必须在地面以上，收到 z={c[2]}")
    d = _camera_rays(intr, lens) @ camera_rotation(cam).T
    height, width = d.shape[:2]
    image = np.full((height, width), SKY_VALUE)
    ground = d[..., 2] < 0
    ground_range = np.full((height, width), np.inf)

    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.where(ground, -c[2] / d[..., 2], np.inf)
    ray_len = np.linalg.norm(d, axis=-1)
    if np.any(ground):
        lam_g = lam[ground]
        hit = c[None, :2] + lam_g[:, None] * d[ground][:, :2]
        rng = lam_g * ray_len[ground]
        foot_lat = np.maximum(rng / intr.fx, 1e-3)
        foot_lon = np.clip(rng * rng / (intr.fy * c[2]), 1e-3, 1e3)
        image[ground] = ground_albedo(scene, hit, foot_lat, foot_lon)
        ground_range[ground] = rng

    billboard = np.zeros((height, width), dtype=bool)
    depth = lam.copy()
    forward = d[intr.height // 2, intr.width // 2, :2]
    for b in scene.billboards:
        base = np.asarray(b.base)
        to_base = base - c[:2]
        dist = float(np.hypot(*to_base))
        if dist < 0.5 or dist > _BILLBOARD_RANGE_M or float(to_base @ forward) <= 0:
            continue
        n_hat = -to_base / dist
        t_hat = np.array([-n_hat[1], n_hat[0]])
        denom = d[..., 0] * n_hat[0] + d[..., 1] * n_hat[1]
        facing = denom < 0
        # 只对朝向广告牌的射线求交点，其余射线保持 inf
        lam_b = np.full((height, width), np.inf)
        lam_b[facing] = -dist / denom[facing]
        hit = np.zeros((height, width), dtype=bool)
        lf, df = lam_b[facing], d[facing]
        px = c[0] + lf * df[:, 0] - base[0]
        py = c[1] + lf * df[:, 1] - base[1]
        pz = c[2] + lf * df[:, 2]
        hit[facing] = (np.abs(px * t_hat[0] + py * t_hat[1]) <= b.width_m / 2.0) & (pz >= 0) & (pz <= b.height_m) & (lf < depth[facing])
        image[hit] = b.albedo
        depth = np.where(hit, lam_b, depth)
        billboard |= hit
    ground_range[billboard] = np.inf
    return RenderLayers(image=ImageBuffer(quantize_unit(image)), ground_range=ground_range, billboard_mask=billboard)


def render_frame(scene: WorldScene, cam: CameraPose, intr: CameraIntrinsics, lens: LensModel | None = None) -> ImageBuffer:
    return render_frame_layers(scene, cam, intr, lens).image


# --- 人类驾驶 ---

@dataclass(frozen=True, eq=False)
class EgoTrace:
    """等时间间隔的车辆位姿序列（后轴中心，世界系）"""
    dt: float
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    lateral_offset: np.ndarray
    human_path: Polyline
    bias_m: float = 0.0

    def __len__(self) -> int:
        return len(self.t)

    def pose(self, i: int) -> VehiclePose:
        return VehiclePose(float(self.x[i]), float(self.y[i]), float(self.heading[i]))


def quantize_decimal(values: np.ndarray, digits: int = 12) -> np.ndarray:
    """按十进制小数位截断，使清单中的文本表示与内存中的值完全一致"""
    return np.array([float(f"{v:.{digits}f}") for v in np.asarray(values, dtype=np.float64)])


def _filtered_variance_factor(rho: float, sigma_samples: float) -> float:
    """AR(1) 过程经高斯滤波后方差与原方差之比"""
    radius = int(4.0 * sigma_samples + 0.5)
    k = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (k / sigma_samples) ** 2)
    g /= g.sum()
    lags = np.abs(k[:, None] - k[None, :])
    return float(g @ (rho ** lags) @ g)


def simulate_human_drive(scene: WorldScene, speed_mps: float, lateral_noise_sd_m: float, seed: int,
                         correlation_length_m: float = 50.0, dt_s: float = 0.05,
                         bias_m: float = 0.0, end_margin_m: float = 120.0) -> EgoTrace:
    """
    人类驾驶：中心线 + 平滑的均值回复横向偏移（Ornstein–Uhlenbeck，经高斯平滑后
    按理论方差重新缩放到指定标准差），可选常数偏置（左正）。车辆沿该路径匀速行驶。
    """
    if speed_mps <= 0:
        raise WorldError(f"车速必须为正，收到 {speed_mps}")
    ds = STATION_SPACING_M
    s = np.arange(0.0, scene.length_m, ds)
    offset = np.zeros_like(s)
    if lateral_noise_sd_m > 0:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        rho = float(np.exp(-ds / correlation_length_m))
        innov = rng.standard_normal(len(s))
        e = np.empty_like(s)
        e[0] = innov[0]
        scale = np.sqrt(1.0 - rho * rho)
        for k in range(1, len(s)):
            e[k] = rho * e[k - 1] + scale * innov[k]
        sigma_samples = _SMOOTHING_SIGMA_M / ds
        smoothed = gaussian_filter1d(e, sigma_samples, mode="reflect")
        offset = lateral_noise_sd_m * smoothed / np.sqrt(_filtered_variance_factor(rho, sigma_samples))
    offset = offset + bias_m

    path_pts = scene.centerline.point_at(s) + offset[:, None] * scene.centerline.normal_at(s)
    human_path = Polyline(path_pts)
    tangents = np.gradient(path_pts, axis=0)
    vertex_heading = np.unwrap(np.arctan2(tangents[:, 1], tangents[:, 0]))

    drive_length = human_path.length - end_margin_m
    if drive_length <= 0:
        raise WorldError(f"道路长度 {scene.length_m:.1f} m 不足以容纳 {end_margin_m} m 的前视余量")
    n = int(np.floor(drive_length / (speed_mps * dt_s))) + 1
    t = np.arange(n) * dt_s
    arc = speed_mps * t
    pts = human_path.point_at(arc)
    heading = np.interp(arc, human_path.stations, vertex_heading)
    trace = EgoTrace(
        dt=dt_s, t=quantize_decimal(t),
        x=quantize_decimal(pts[:, 0]), y=quantize_decimal(pts[:, 1]), heading=quantize_decimal(heading),
        speed=np.full(n, float(speed_mps)),
        lateral_offset=np.interp(arc, human_path.stations, offset),
        human_path=human_path, bias_m=float(bias_m),
    )
    logging.info(f"人类驾驶轨迹已生成: {n} 个时刻, 偏移标准差 {lateral_noise_sd_m} m, 偏置 {bias_m:+.3f} m")
    return trace


# --- 录制 ---

class FrameSource(Protocol):
    def frame(self, tick: int, camera: str) -> ImageBuffer: ...


class _LruCache:
    """线程安全的小型 LRU 缓存"""

    def __init__(self, capacity: int):
        self._capacity = max(1, capacity)
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get_or_create(self, key, factory):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                return self._data[key]
        value = factory()
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self._capacity:
                self._data.popitem(last=False)
        return value


class RenderedFrames:
    """按需渲染录制帧"""

    def __init__(self, scene: WorldScene, rig: CameraRig, poses: list[VehiclePose], cache_size: int | None = None):
        self.scene = scene
        self.rig = rig
        self.poses = poses
        self._cameras = rig.cameras
        self._cache = _LruCache(settings.FRAME_CACHE_SIZE if cache_size is None else cache_size)

    def frame(self, tick: int, camera: str) -> ImageBuffer:
        def _render():
            cam = compose_pose(self.poses[tick], self._cameras[camera])
            return render_frame(self.scene, cam, self.rig.intrinsics, self.rig.lens)
        return self._cache.get_or_create((tick, camera), _render)


class DiskFrames:
    """从录制目录读取 PGM/PPM 帧"""

    def __init__(self, directory: Path, files: list[dict[str, str]], cache_size: int | None = None):
        self.directory = directory
        self.files = files
        self._cache = _LruCache(settings.FRAME_CACHE_SIZE if cache_size is None else cache_size)

    def frame(self, tick: int, camera: str) -> ImageBuffer:
        def _load():
            try:
                return ImageBuffer(load_pnm(self.directory / self.files[tick][camera]))
            except (ImageIOError, KeyError) as e:
                raise WorldError(f"读取第 {tick} 帧 {camera} 相机失败: {e}") from e
        return self._cache.get_or_create((tick, camera), _load)


@dataclass(frozen=True, eq=False)
class Recording:
    recording_id: int
    rig: CameraRig
    cameras: tuple[str, ...]
    frame_rate_hz: float
    t: np.ndarray
    poses: tuple[VehiclePose, ...]
    speed: np.ndarray
    centerline: Polyline
    left_boundary: Polyline
    right_boundary: Polyline
    trace: EgoTrace
    frames: FrameSource
    forks: tuple[ForkZone, ...] = ()
    config_hash: str = ""
    lane_width_m: float = field(default=3.7)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def frame_count(self) -> int:
        return len(self.t) * len(self.cameras)

    @property
    def human_path(self) -> Polyline:
        return self.trace.human_path

    def frame(self, tick: int, camera: str = "center") -> ImageBuffer:
        if camera not in self.cameras:
            raise WorldError(f"录制中没有 {camera} 相机")
        return self.frames.frame(tick, camera)

    def camera_pose_world(self, tick: int, camera: str = "center") -> CameraPose:
        return compose_pose(self.poses[tick], self.rig.cameras[camera])

    @cached_property
    def frame_stations(self) -> np.ndarray:
        """各帧车辆在中心线上的投影弧长"""
        xy = np.array([[p.x, p.y] for p in self.poses])
        return self.centerline.project(xy).station


def record(scene: WorldScene, trace: EgoTrace, rig: CameraRig, frame_rate_hz: float,
           cameras: tuple[str, ...] = CAMERA_IDS, duration_s: float | None = None,
           recording_id: int = 0, config_hash: str = "") -> Recording:
    """
    以 frame_rate_hz 从轨迹中取样；帧按需渲染（见 save_recording 的落盘）。
    帧间隔必须是轨迹时间步长的整数倍。
    """
    step_f = (1.0 / frame_rate_hz) / trace.dt
    step = int(round(step_f))
    if step < 1 or abs(step - step_f) > 1e-9:
        raise WorldError(f"帧间隔 1/{frame_rate_hz} s 不是轨迹步长 {trace.dt} s 的整数倍")
    unknown = set(cameras) - set(CAMERA_IDS)
    if unknown:
        raise WorldError(f"未知的相机: {sorted(unknown)}")
    ticks = np.arange(0, len(trace), step)
    if duration_s is not None:
        n = int(round(duration_s * frame_rate_hz))
        if n > len(ticks):
            raise WorldError(f"轨迹只覆盖 {len(ticks)} 帧，请求 {n} 帧")
        ticks = ticks[:n]
    poses = tuple(trace.pose(int(i)) for i in ticks)
    rec = Recording(
        recording_id=recording_id, rig=rig, cameras=tuple(c for c in CAMERA_IDS if c in cameras),
        frame_rate_hz=float(frame_rate_hz), t=trace.t[ticks], poses=poses, speed=trace.speed[ticks],
        centerline=scene.centerline, left_boundary=scene.left_boundary, right_boundary=scene.right_boundary,
        trace=trace, frames=RenderedFrames(scene, rig, list(poses)), forks=scene.forks,
        config_hash=config_hash, lane_width_m=scene.spec.lane_width_m,
    )
    logging.info(f"录制 {recording_id}: {len(ticks)} 个时刻 × {len(rec.cameras)} 台相机 = {rec.frame_count} 帧")
    return rec


def _polyline_json(line: Polyline) -> dict:
    return {"points": line.points.tolist(), "normals": line.normals.tolist()}


def _polyline_from_json(data: dict) -> Polyline:
    return Polyline(np.array(data["points"]), normals=np.array(data["normals"]))


def save_recording(rec: Recording, directory: str | Path) -> Path:
    """渲染（或读取）全部帧并写出录制目录：清单 + 每台相机每个时刻一个 PGM/PPM"""
    out = Path(directory)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    jobs = [(i, cam) for i in range(len(rec)) for cam in rec.cameras]

    def _write(job):
        i, cam = job
        rel = f"frames/{i:06d}_{cam}.pgm"
        save_pnm(out / rel, rec.frame(i, cam).pixels)
        return rel

    with ThreadPoolExecutor(max_workers=settings.MAX_WORKERS) as pool:
        written = list(pool.map(_write, jobs))
    files = [dict(zip(rec.cameras, written[i * len(rec.cameras):(i + 1) * len(rec.cameras)])) for i in range(len(rec))]

    trace = rec.trace
    manifest = {
        "format": RECORDING_FORMAT,
        "version": RECORDING_VERSION,
        "config_hash": rec.config_hash,
        "recording_id": rec.recording_id,
        "frame_rate_hz": rec.frame_rate_hz,
        "cameras": list(rec.cameras),
        "lane_width_m": rec.lane_width_m,
        "rig": rec.rig.model_dump(mode="json"),
        "frames": [
            {"tick": i, "t": float(rec.t[i]), "x": p.x, "y": p.y, "heading": p.heading,
             "speed": float(rec.speed[i]), "files": files[i]}
            for i, p in enumerate(rec.poses)
        ],
        "trace": {
            "dt": trace.dt, "bias_m": trace.bias_m,
            "t": trace.t.tolist(), "x": trace.x.tolist(), "y": trace.y.tolist(),
            "heading": trace.heading.tolist(), "speed": trace.speed.tolist(),
            "lateral_offset": trace.lateral_offset.tolist(),
        },
        "forks": [{"start": z.start, "end": z.end, "side": z.side, "divergence_m": z.divergence_m} for z in rec.forks],
        "ground_truth": {
            "centerline": _polyline_json(rec.centerline),
            "left_boundary": _polyline_json(rec.left_boundary),
            "right_boundary": _polyline_json(rec.right_boundary),
            "human_path": _polyline_json(trace.human_path),
        },
    }
    write_json(out / MANIFEST_NAME, manifest)
    logging.info(f"录制 {rec.recording_id} 已写入 {out}（{len(written)} 个图像文件）")
    return out


def load_recording(directory: str | Path) -> Recording:
    src = Path(directory)
    try:
        m = read_json(src / MANIFEST_NAME)
    except ArtifactError as e:
        raise WorldError(f"无法读取录制清单: {e}") from e
    if m.get("format") != RECORDING_FORMAT or m.get("version") != RECORDING_VERSION:
        raise WorldError(f"{src} 不是受支持的录制格式 (format={m.get('format')}, version={m.get('version')})")
    try:
        gt = m["ground_truth"]
        tr = m["trace"]
        trace = EgoTrace(
            dt=tr["dt"], t=np.array(tr["t"]), x=np.array(tr["x"]), y=np.array(tr["y"]),
            heading=np.array(tr["heading"]), speed=np.array(tr["speed"]),
            lateral_offset=np.array(tr["lateral_offset"]),
            human_path=_polyline_from_json(gt["human_path"]), bias_m=tr["bias_m"],
        )
        frames = m["frames"]
        rec = Recording(
            recording_id=m["recording_id"], rig=CameraRig.model_validate(m["rig"]),
            cameras=tuple(m["cameras"]), frame_rate_hz=m["frame_rate_hz"],
            t=np.array([f["t"] for f in frames]),
            poses=tuple(VehiclePose(f["x"], f["y"], f["heading"]) for f in frames),
            speed=np.array([f["speed"] for f in frames]),
            centerline=_polyline_from_json(gt["centerline"]),
            left_boundary=_polyline_from_json(gt["left_boundary"]),
            right_boundary=_polyline_from_json(gt["right_boundary"]),
            trace=trace, frames=DiskFrames(src, [f["files"] for f in frames]),
            forks=tuple(ForkZone(**z) for z in m["forks"]),
            config_hash=m["config_hash"], lane_width_m=m["lane_width_m"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise WorldError(f"录制清单 {src / MANIFEST_NAME} 字段缺失或格式错误: {e}") from e
    logging.info(f"已加载录制 {rec.recording_id}: {len(rec)} 个时刻，来自 {src}")
    return rec

