# src/lane_resim/services/metrics.py
"""
指标：故障间平均距离、精度、舒适度、MAPA 分数，以及左/右偏置 MAPA 实验。
"""
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ..schemas.geometry import CameraRig
from ..schemas.metrics import MapaInputs, MapaProtocol, MetricsConfig, MetricSummary
from ..schemas.resim import ResimSection
from ..schemas.world import DriveSpec
from .policy import Policy
from .resim import ResimReport, run_resim
from .world import Recording, WorldScene, record, simulate_human_drive


class MetricsError(Exception):
    """自定义指标计算异常"""
    pass


class Mdbf(NamedTuple):
    km: float | None
    infinite: bool
    distance_km: float


def mdbf(report: ResimReport) -> Mdbf:
    """行驶距离 / 故障次数；无故障时标记为无穷并给出行驶距离"""
    if report.distance_m <= 0:
        raise MetricsError("行驶距离必须为正")
    distance_km = report.distance_m / 1000.0
    n = len(report.failures)
    if n == 0:
        return Mdbf(None, True, distance_km)
    return Mdbf(distance_km / n, False, distance_km)


def precision(offsets) -> float:
    """100·(1 − RMS)，RMS 以米计；RMS 超过 1 m 时为负"""
    arr = np.asarray(offsets, dtype=np.float64)
    if arr.size == 0:
        raise MetricsError("精度需要非空的偏移序列")
    return float(100.0 * (1.0 - np.sqrt(np.mean(arr * arr))))


def comfort(lateral_accel, dt: float, k: float = 20.0) -> float:
    """100 − k·RMS(jerk)，jerk 用中心差分（两端单侧差分）"""
    a = np.asarray(lateral_accel, dtype=np.float64)
    if a.size < 2:
        raise MetricsError("舒适度至少需要两个样本")
    jerk = np.gradient(a, dt)
    return float(100.0 - k * np.sqrt(np.mean(jerk * jerk)))


def mapa_score(m: MapaInputs) -> float:
    """½·|(y_L − ȳ)/y_HL + (y_R − ȳ)/y_HR|·100，ȳ = (y_L + y_R)/2"""
    if m.y_hl == 0 or m.y_hr == 0:
        raise MetricsError("人类偏置不能为 0")
    y_avg = (m.y_l + m.y_r) / 2.0
    return float(50.0 * abs((m.y_l - y_avg) / m.y_hl + (m.y_r - y_avg) / m.y_hr))


def arc_weights(report: ResimReport) -> np.ndarray:
    """每步对应的行驶弧长，最后一步沿用前一步"""
    x = np.asarray(report.x)
    y = np.asarray(report.y)
    if len(x) < 2:
        return np.ones(len(x))
    w = np.hypot(np.diff(x), np.diff(y))
    return np.append(w, w[-1])


def mean_offset(report: ResimReport) -> float:
    """按弧长加权、排除复位冷却段的平均横向偏移"""
    offsets = np.asarray(report.lateral_offset)
    keep = ~np.asarray(report.in_cooldown, dtype=bool)
    w = arc_weights(report) * keep
    if w.sum() <= 0:
        raise MetricsError("排除冷却段后没有可用的行驶数据")
    return float(np.average(offsets, weights=w))


def summarize(report: ResimReport, cfg: MetricsConfig | None = None, mapa_pct: float | None = None,
              config_hash: str | None = None) -> MetricSummary:
    cfg = cfg or MetricsConfig()
    if report.steps == 0:
        raise MetricsError("报告中没有任何仿真步")
    m = mdbf(report)
    offsets = np.asarray(report.lateral_offset)
    keep = ~np.asarray(report.in_cooldown, dtype=bool)
    return MetricSummary(
        distance_m=report.distance_m,
        failures=len(report.failures),
        mdbf_km=m.km,
        mdbf_infinite=m.infinite,
        precision_pct=precision(offsets[keep] if keep.any() else offsets),
        comfort_score=comfort(report.lateral_accel, report.dt_s, cfg.comfort_k) if report.steps >= 2 else 100.0,
        mapa_pct=mapa_pct,
        failures_by_cause=report.failure_counts(),
        config_hash=report.config_hash if config_hash is None else config_hash,
    )


def label_discrepancy_report(rec: Recording, threshold_m: float) -> list[dict]:
    """人类轨迹偏离中心线超过阈值的连续帧区间"""
    xy = np.array([[p.x, p.y] for p in rec.poses])
    offsets = rec.centerline.project(xy).offset
    over = np.abs(offsets) > threshold_m
    ranges = []
    i = 0
    while i < len(over):
        if not over[i]:
            i += 1
            continue
        j = i
        while j + 1 < len(over) and over[j + 1]:
            j += 1
        seg = offsets[i:j + 1]
        ranges.append({
            "start_frame": i,
            "end_frame": j,
            "start_t": float(rec.t[i]),
            "end_t": float(rec.t[j]),
            "max_abs_offset_m": float(np.max(np.abs(seg))),
            "mean_offset_m": float(np.mean(seg)),
        })
        i = j + 1
    logging.info(f"标签差异报告: 阈值 {threshold_m} m, {len(ranges)} 个区间")
    return ranges


SERIES_COLUMNS = ("step", "t", "x", "y", "heading", "lateral_offset", "lateral_accel", "steering", "frame", "in_cooldown")


def write_series_csv(report: ResimReport, path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SERIES_COLUMNS)
        for i in range(report.steps):
            writer.writerow([i, repr(report.t[i]), repr(report.x[i]), repr(report.y[i]), repr(report.heading[i]),
                             repr(report.lateral_offset[i]), repr(report.lateral_accel[i]),
                             repr(report.steering[i]), report.frame[i], int(report.in_cooldown[i])])
    logging.info(f"时间序列已写出: {target}")
    return target


# --- MAPA 实验 ---

@dataclass
class MapaResult:
    inputs: MapaInputs
    score_pct: float
    bias_m: float
    left_report: ResimReport
    right_report: ResimReport

    def to_dict(self) -> dict:
        return {
            "mapa_pct": self.score_pct,
            "bias_m": self.bias_m,
            "y_l": self.inputs.y_l,
            "y_r": self.inputs.y_r,
            "y_hl": self.inputs.y_hl,
            "y_hr": self.inputs.y_hr,
            "left_failures": len(self.left_report.failures),
            "right_failures": len(self.right_report.failures),
            "left_distance_m": self.left_report.distance_m,
            "right_distance_m": self.right_report.distance_m,
        }


def protocol_bias(scene: WorldScene, track_m: float, protocol: MapaProtocol) -> float:
    """偏置 = bias_fraction × 轮胎余量 (车道宽 − 轮距)/2"""
    return protocol.bias_fraction * (scene.spec.lane_width_m - track_m) / 2.0


def biased_recordings(scene: WorldScene, drive: DriveSpec, rig: CameraRig, protocol: MapaProtocol,
                      track_m: float, seed: int) -> tuple[Recording, Recording, float]:
    """生成靠左/靠右行驶的两段录制（录制编号 1 / 2）"""
    bias = protocol_bias(scene, track_m, protocol)
    recs = []
    for rec_id, sign in ((1, 1.0), (2, -1.0)):
        trace = simulate_human_drive(
            scene, drive.speed_mps, protocol.lateral_noise_sd_m, seed + rec_id,
            correlation_length_m=drive.correlation_length_m, dt_s=drive.dt_s,
            bias_m=sign * bias, end_margin_m=drive.end_margin_m,
        )
        recs.append(record(scene, trace, rig, drive.frame_rate_hz, recording_id=rec_id))
    return recs[0], recs[1], bias


def human_mean_offset(rec: Recording) -> float:
    """录制中人类相对中心线的平均横向偏移（匀速，按弧长等权）"""
    xy = np.array([[p.x, p.y] for p in rec.poses])
    return float(np.mean(rec.centerline.project(xy).offset))


def run_mapa_experiment(scene: WorldScene, policy: Policy, protocol: MapaProtocol, drive: DriveSpec,
                        rig: CameraRig, resim: ResimSection, seed: int, config_hash: str = "") -> MapaResult:
    """
    两段有偏置的录制上各跑一次重仿真（并行），偏移按弧长平均且排除冷却段，
    再代入 MAPA 公式。重仿真中的故障不会中止实验。
    """
    left, right, bias = biased_recordings(scene, drive, rig, protocol, resim.vehicle.track_m, seed)
    logging.info(f"MAPA 实验开始: 策略 {getattr(policy, 'name', '?')}, 偏置 ±{bias:.3f} m")
    with ThreadPoolExecutor(max_workers=2, thread_name_prefix="mapa") as pool:
        futures = [pool.submit(run_resim, rec, policy, resim.patch, resim.vehicle, resim.config,
                               protocol.camera, config_hash) for rec in (left, right)]
        left_report, right_report = [f.result() for f in futures]
    try:
        inputs = MapaInputs(y_l=mean_offset(left_report), y_r=mean_offset(right_report),
                            y_hl=human_mean_offset(left), y_hr=human_mean_offset(right))
    except ValueError as e:
        raise MetricsError(f"MAPA 输入不合法（人类偏置符号不对？）: {e}") from e
    score = mapa_score(inputs)
    logging.info(f"MAPA = {score:.2f}% (y_L={inputs.y_l:+.3f}, y_R={inputs.y_r:+.3f}, "
                 f"y_HL={inputs.y_hl:+.3f}, y_HR={inputs.y_hr:+.3f})")
    return MapaResult(inputs=inputs, score_pct=score, bias_m=bias, left_report=left_report, right_report=right_report)
