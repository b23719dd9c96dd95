# src/lane_resim/services/resim.py
"""
增强重仿真器：仿真车辆在录制上闭环行驶。每一步取最近的录制帧，
按仿真位姿做视角变换合成画面，策略给出轨迹，纯追踪控制器转向，
运动学单车模型积分，车轮压线即记一次故障并复位到中心线。
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from ..schemas.patches import PatchConfig
from ..schemas.resim import ResimConfig, VehicleSpec
from ..utils.polyline import Polyline
from ..utils.report_io import ArtifactError, read_json, write_json
from .geometry import ImageBuffer, VehiclePose, WarpResult, compose_pose, rectify_pinhole, warp_viewpoint
from .labels import to_vehicle_frame
from .patches import make_patch
from .policy import Policy, PolicyError, PolicyInput, PrivilegedState, TrajectoryPrediction
from .world import Recording


class ResimError(Exception):
    """自定义重仿真异常"""
    pass


class WarpInvalid(ResimError):
    """仿真位姿离录制位姿太远，无法合成画面"""
    pass


FailureCause = Literal["boundary_touch", "warp_invalid", "invalid_prediction"]
FAILURE_CAUSES: tuple[str, ...] = ("boundary_touch", "warp_invalid", "invalid_prediction")
REPORT_FORMAT = "lane-resim-report"
# 报告中保存的预测采样站点（米）
PREDICTION_SAMPLE_STATIONS = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)


@dataclass(frozen=True)
class SimState:
    pose: VehiclePose
    speed: float
    steering: float = 0.0
    distance: float = 0.0


@dataclass(frozen=True)
class FailureEvent:
    distance_m: float
    cause: str
    step: int


@dataclass
class ResimReport:
    policy: str
    recording_id: int
    dt_s: float
    distance_m: float = 0.0
    failures: list[FailureEvent] = field(default_factory=list)
    t: list[float] = field(default_factory=list)
    x: list[float] = field(default_factory=list)
    y: list[float] = field(default_factory=list)
    heading: list[float] = field(default_factory=list)
    lateral_offset: list[float] = field(default_factory=list)
    lateral_accel: list[float] = field(default_factory=list)
    steering: list[float] = field(default_factory=list)
    frame: list[int] = field(default_factory=list)
    in_cooldown: list[bool] = field(default_factory=list)
    predictions: list[list[float]] = field(default_factory=list)
    config_hash: str = ""

    @property
    def steps(self) -> int:
        return len(self.t)

    def failure_counts(self) -> dict[str, int]:
        counts = {cause: 0 for cause in FAILURE_CAUSES}
        for ev in self.failures:
            counts[ev.cause] += 1
        return counts

    def same_as(self, other: "ResimReport") -> bool:
        return report_to_dict(self) == report_to_dict(other)


# --- 单步组件 ---

def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _heading_from_normal(n: np.ndarray) -> float:
    return float(math.atan2(-n[0], n[1]))


def sim_station(rec: Recording, pose: VehiclePose) -> tuple[float, float]:
    """仿真位姿在中心线上的 (弧长, 横向偏移)"""
    proj = rec.centerline.project(np.array([[pose.x, pose.y]]))
    return float(proj.station[0]), float(proj.offset[0])


def nearest_frame(rec: Recording, pose: VehiclePose, hint: int | None = None) -> int:
    """
    按中心线弧长找最近的录制帧；距离相同时取较小的下标。
    hint 为上一步的帧下标，车辆单调前进时只需向后搜索。
    """
    if len(rec) == 0:
        raise ResimError("录制为空")
    stations = rec.frame_stations
    s, _ = sim_station(rec, pose)
    lo = 0
    if hint is not None and 0 <= hint < len(stations) and stations[hint] <= s:
        lo = hint
    k = int(np.searchsorted(stations[lo:], s, side="left")) + lo
    candidates = [i for i in (k - 1, k) if 0 <= i < len(stations)]
    return min(candidates, key=lambda i: (abs(stations[i] - s), i))


def relative_pose(rec: Recording, frame: int, pose: VehiclePose) -> VehiclePose:
    """仿真车辆在录制车辆坐标系中的位姿"""
    ref = rec.poses[frame]
    local = to_vehicle_frame(ref, np.array([[pose.x, pose.y]]))[0]
    return VehiclePose(float(local[0]), float(local[1]), _wrap_angle(pose.heading - ref.heading))


def check_warp_bounds(rel: VehiclePose, config: ResimConfig):
    if abs(rel.y) > config.max_warp_offset_m or abs(math.degrees(rel.heading)) > config.max_warp_yaw_deg:
        raise WarpInvalid(f"相对录制位姿偏差过大: 横向 {rel.y:+.3f} m, 偏航 {math.degrees(rel.heading):+.2f}°")


def synth_view(rec: Recording, pose: VehiclePose, camera: str = "center", config: ResimConfig | None = None,
               frame: int | None = None) -> WarpResult:
    """把最近帧从录制相机位姿变换到仿真相机位姿"""
    config = config or ResimConfig()
    k = nearest_frame(rec, pose) if frame is None else frame
    rel = relative_pose(rec, k, pose)
    check_warp_bounds(rel, config)
    rig = rec.rig
    img = rec.frame(k, camera)
    if not rig.lens.is_identity:
        img = rectify_pinhole(img, rig.lens, rig.intrinsics, rig.intrinsics)
    mounted = rig.cameras[camera]
    return warp_viewpoint(img, mounted, compose_pose(rel, mounted), rig.intrinsics)


def step_vehicle(state: SimState, steering: float, spec: VehicleSpec, dt: float) -> SimState:
    """
    后轴运动学单车模型：航向角速度 = v·tan(δ)/轴距。
    转角在一步内恒定，按圆弧精确积分。
    """
    x, y, h = state.pose
    v = state.speed
    kappa = math.tan(steering) / spec.wheelbase_m
    if abs(kappa) < 1e-12:
        x1 = x + v * dt * math.cos(h)
        y1 = y + v * dt * math.sin(h)
        h1 = h
    else:
        h1 = h + v * kappa * dt
        x1 = x + (math.sin(h1) - math.sin(h)) / kappa
        y1 = y + (math.cos(h) - math.cos(h1)) / kappa
    return SimState(VehiclePose(x1, y1, h1), v, steering, state.distance + v * dt)


def pure_pursuit(prediction: TrajectoryPrediction, spec: VehicleSpec, lookahead: float) -> float:
    """
    纯追踪：取预测轨迹在 x = L 处的点 (L, y_L)，弦长 ℓ² = L² + y_L²，
    转角 = atan(2·轴距·y_L / ℓ²)。左偏预测得到正（左）转角。
    """
    xs = prediction.stations
    if not xs[0] <= lookahead <= xs[-1]:
        raise ResimError(f"前视距离 {lookahead:.2f} m 超出预测范围 [{xs[0]}, {xs[-1]}]")
    y_l = float(np.interp(lookahead, xs, prediction.y))
    return math.atan(2.0 * spec.wheelbase_m * y_l / (lookahead * lookahead + y_l * y_l))


def wheel_positions(pose: VehiclePose, spec: VehicleSpec) -> np.ndarray:
    """后左、后右、前左、前右四个车轮的世界坐标"""
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    half = spec.track_m / 2.0
    local = np.array([[0.0, half], [0.0, -half], [spec.wheelbase_m, half], [spec.wheelbase_m, -half]])
    return local @ np.array([[c, s], [-s, c]]) + np.array([pose.x, pose.y])


def detect_failure(state: SimState, spec: VehicleSpec, left: Polyline, right: Polyline) -> FailureCause | None:
    """任一车轮到达左边界左侧或右边界右侧即为压线"""
    wheels = wheel_positions(state.pose, spec)
    if np.any(left.project(wheels).offset >= 0.0) or np.any(right.project(wheels).offset <= 0.0):
        return "boundary_touch"
    return None


# --- 闭环 ---

def _centerline_pose(centerline: Polyline, station: float) -> VehiclePose:
    p = centerline.point_at(station)
    return VehiclePose(float(p[0]), float(p[1]), _heading_from_normal(centerline.normal_at(station)))


def _reset(rec: Recording, state: SimState) -> SimState:
    """复位到当前弧长处的中心线，航向与中心线一致"""
    s_now, _ = sim_station(rec, state.pose)
    return SimState(_centerline_pose(rec.centerline, s_now), state.speed, 0.0, state.distance)


def run_resim(rec: Recording, policy: Policy, patch: PatchConfig, vehicle: VehicleSpec, config: ResimConfig,
              camera: str = "center", config_hash: str = "", max_steps: int | None = None) -> ResimReport:
    """
    从首帧的中心线位置出发闭环行驶，直到前方录制路径不足 horizon_m 或越过最后一帧。

    故障（压线、无法合成画面、策略给出越界预测）后复位到中心线，并在 cooldown_m 内不再记新故障。
    冷却期内的故障只复位；冷却期结束时若期间发生过故障，立即补记一次。
    每个冷却窗口至多记一次故障。
    策略异常不会中止重仿真，只有录制读取错误会向外抛出。
    """
    if len(rec) == 0:
        raise ResimError("录制为空")
    if camera not in rec.cameras:
        raise ResimError(f"录制中没有 {camera} 相机")
    if vehicle.track_m >= rec.lane_width_m:
        raise ResimError(f"轮距 {vehicle.track_m} m 不小于车道宽度 {rec.lane_width_m} m")
    centerline = rec.centerline
    human_end = float(centerline.project(rec.human_path.points[-1:]).station[0])
    path_end = min(centerline.length, human_end)
    last_frame_station = float(rec.frame_stations[-1])
    rig = rec.rig

    state = SimState(_centerline_pose(centerline, float(rec.frame_stations[0])), float(rec.speed[0]))
    report = ResimReport(policy=getattr(policy, "name", type(policy).__name__), recording_id=rec.recording_id,
                         dt_s=config.dt_s, config_hash=config_hash)
    cooldown_from = -math.inf
    pending: str | None = None
    frame = 0
    sample_idx = np.array(PREDICTION_SAMPLE_STATIONS) - 1
    step = 0
    logging.info(f"开始重仿真: 策略 {report.policy}, 录制 {rec.recording_id}, 相机 {camera}")

    while max_steps is None or step < max_steps:
        s, offset = sim_station(rec, state.pose)
        if s >= last_frame_station or s + config.horizon_m > path_end:
            break
        frame = nearest_frame(rec, state.pose, hint=frame)
        state = SimState(state.pose, float(rec.speed[frame]), state.steering, state.distance)
        cooling = state.distance - cooldown_from < config.cooldown_m

        report.t.append(step * config.dt_s)
        report.x.append(state.pose.x)
        report.y.append(state.pose.y)
        report.heading.append(state.pose.heading)
        report.lateral_offset.append(offset)
        report.frame.append(frame)
        report.in_cooldown.append(bool(cooling))

        cause: str | None = None
        prediction = None
        try:
            rel = relative_pose(rec, frame, state.pose)
            check_warp_bounds(rel, config)
            patch_img: ImageBuffer | None = None
            if policy.uses_patch:
                view = synth_view(rec, state.pose, camera, config, frame=frame)
                patch_img = make_patch(view.image, patch, rig.cameras[camera], rig.intrinsics)
            privileged = None if policy.uses_patch else PrivilegedState(state.pose, centerline, rec.human_path)
            prediction = policy.predict(PolicyInput(patch_img, privileged))
        except WarpInvalid as e:
            cause = "warp_invalid"
            logging.debug(f"第 {step} 步无法合成画面: {e}")
        except PolicyError as e:
            cause = "invalid_prediction"
            logging.debug(f"第 {step} 步策略输出无效: {e}")

        if prediction is not None:
            lookahead = config.lookahead(state.speed)
            steering = max(-config.max_steering_rad, min(config.max_steering_rad,
                                                         pure_pursuit(prediction, vehicle, lookahead)))
            report.predictions.append([float(v) for v in prediction.y[sample_idx]])
            report.steering.append(steering)
            report.lateral_accel.append(state.speed ** 2 * math.tan(steering) / vehicle.wheelbase_m)
            state = step_vehicle(state, steering, vehicle, config.dt_s)
            cause = detect_failure(state, vehicle, rec.left_boundary, rec.right_boundary)
        else:
            report.predictions.append([0.0] * len(sample_idx))
            report.steering.append(0.0)
            report.lateral_accel.append(0.0)
            state = step_vehicle(state, 0.0, vehicle, config.dt_s)

        cooling_now = state.distance - cooldown_from < config.cooldown_m
        if cause is not None and cooling_now:
            pending = pending or cause
            state = _reset(rec, state)
        elif cause is not None or pending is not None:
            report.failures.append(FailureEvent(state.distance, cause or pending, step))
            cooldown_from = state.distance
            pending = None
            logging.info(f"故障 #{len(report.failures)}: {report.failures[-1].cause}，已行驶 {state.distance:.1f} m")
            state = _reset(rec, state)
        step += 1

    report.distance_m = state.distance
    logging.info(f"重仿真结束: {report.steps} 步, {report.distance_m:.1f} m, {len(report.failures)} 次故障")
    return report


# --- 报告读写 ---

def report_to_dict(report: ResimReport) -> dict:
    """固定字段顺序，便于 diff"""
    return {
        "format": REPORT_FORMAT,
        "policy": report.policy,
        "recording_id": report.recording_id,
        "config_hash": report.config_hash,
        "dt_s": report.dt_s,
        "distance_m": report.distance_m,
        "failures": [{"distance_m": ev.distance_m, "cause": ev.cause, "step": ev.step} for ev in report.failures],
        "prediction_stations_m": list(PREDICTION_SAMPLE_STATIONS),
        "series": {
            "t": report.t,
            "x": report.x,
            "y": report.y,
            "heading": report.heading,
            "lateral_offset": report.lateral_offset,
            "lateral_accel": report.lateral_accel,
            "steering": report.steering,
            "frame": report.frame,
            "in_cooldown": report.in_cooldown,
            "predictions": report.predictions,
        },
    }


def report_from_dict(data: dict) -> ResimReport:
    if data.get("format") != REPORT_FORMAT:
        raise ResimError(f"不是重仿真报告: format={data.get('format')!r}")
    try:
        s = data["series"]
        report = ResimReport(
            policy=data["policy"], recording_id=data["recording_id"], dt_s=data["dt_s"],
            distance_m=data["distance_m"],
            failures=[FailureEvent(ev["distance_m"], ev["cause"], ev["step"]) for ev in data["failures"]],
            t=list(s["t"]), x=list(s["x"]), y=list(s["y"]), heading=list(s["heading"]),
            lateral_offset=list(s["lateral_offset"]), lateral_accel=list(s["lateral_accel"]),
            steering=list(s["steering"]), frame=list(s["frame"]), in_cooldown=list(s["in_cooldown"]),
            predictions=[list(p) for p in s["predictions"]], config_hash=data.get("config_hash", ""),
        )
    except (KeyError, TypeError) as e:
        raise ResimError(f"重仿真报告字段缺失: {e}") from e
    lengths = {len(getattr(report, name)) for name in
               ("t", "x", "y", "heading", "lateral_offset", "lateral_accel", "steering", "frame", "in_cooldown", "predictions")}
    if len(lengths) > 1:
        raise ResimError("重仿真报告中的时间序列长度不一致")
    return report


def save_report(report: ResimReport, path: str | Path) -> Path:
    return write_json(path, report_to_dict(report))


def load_report(path: str | Path) -> ResimReport:
    try:
        return report_from_dict(read_json(path))
    except ArtifactError as e:
        raise ResimError(f"无法读取重仿真报告: {e}") from e
