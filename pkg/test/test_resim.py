import math
from pathlib import Path

import numpy as np
import pytest

from lane_resim.schemas.experiment import ExperimentConfig, load_experiment_config
from lane_resim.schemas.patches import PatchConfig
from lane_resim.schemas.resim import ResimConfig, VehicleSpec
from lane_resim.schemas.world import ArcSegment, BillboardSpec, RoadSpec, StraightSegment
from lane_resim.services import experiment, world
from lane_resim.services.geometry import VehiclePose
from lane_resim.services.metrics import summarize
from lane_resim.services.patches import pooled_size
from lane_resim.services.policy import (CheaterPolicy, OffsetPolicy, OraclePolicy, RidgeModel, RidgePolicy,
                                        TrajectoryPrediction)
from lane_resim.services.resim import (FAILURE_CAUSES, ResimError, SimState, WarpInvalid, check_warp_bounds,
                                       detect_failure, load_report, nearest_frame, pure_pursuit, relative_pose,
                                       run_resim, save_report, step_vehicle, synth_view, wheel_positions)
from lane_resim.utils.polyline import Polyline

VEHICLE = VehicleSpec()
CONFIG = ResimConfig()
LEFT = Polyline(np.array([[0.0, 1.85], [1000.0, 1.85]]))
RIGHT = Polyline(np.array([[0.0, -1.85], [1000.0, -1.85]]))
REFERENCE_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "mapa_story.toml"


def _resim(rec, policy, **kwargs):
    return run_resim(rec, policy, PatchConfig(), VEHICLE, CONFIG, **kwargs)


@pytest.mark.parametrize("steering", [0.02, -0.05, 0.3])
def test_constant_steering_drives_a_circle(steering):
    radius = VEHICLE.wheelbase_m / math.tan(steering)
    state = SimState(VehiclePose(0.0, 0.0, 0.0), 20.0)
    for _ in range(200):
        state = step_vehicle(state, steering, VEHICLE, 0.05)
        assert math.hypot(state.pose.x, state.pose.y - radius) == pytest.approx(abs(radius), abs=1e-6)
    assert state.distance == pytest.approx(200.0)


def test_zero_steering_drives_straight():
    state = step_vehicle(SimState(VehiclePose(1.0, 2.0, math.pi / 4), 10.0), 0.0, VEHICLE, 0.1)
    assert (state.pose.x, state.pose.y) == pytest.approx((1.0 + math.sqrt(0.5), 2.0 + math.sqrt(0.5)))
    assert state.pose.heading == math.pi / 4


@pytest.mark.parametrize("radius", [300.0, 500.0, -400.0])
def test_pure_pursuit_on_circular_prediction(radius):
    """预测轨迹是过原点的圆时，纯追踪给出恰好沿该圆行驶的转角"""
    x = np.arange(1.0, 101.0)
    r = abs(radius)
    prediction = TrajectoryPrediction(math.copysign(1.0, radius) * (r - np.sqrt(r * r - x * x)))
    steering = pure_pursuit(prediction, VEHICLE, 24.0)
    assert steering == pytest.approx(math.atan(VEHICLE.wheelbase_m / radius), abs=1e-10)


def test_pure_pursuit_checks_lookahead():
    prediction = TrajectoryPrediction(np.zeros(100))
    assert pure_pursuit(prediction, VEHICLE, 24.0) == 0.0
    for bad in (0.5, 100.5):
        with pytest.raises(ResimError):
            pure_pursuit(prediction, VEHICLE, bad)


def test_wheel_positions():
    wheels = wheel_positions(VehiclePose(0.0, 0.0, math.pi / 2), VEHICLE)
    np.testing.assert_allclose(wheels, [[-0.8, 0.0], [0.8, 0.0], [-0.8, 2.85], [0.8, 2.85]], atol=1e-12)


@pytest.mark.parametrize("y, expected", [(0.0, None), (1.0, None), (1.1, "boundary_touch"), (-1.1, "boundary_touch")])
def test_detect_failure(y, expected):
    assert detect_failure(SimState(VehiclePose(10.0, y, 0.0), 20.0), VEHICLE, LEFT, RIGHT) == expected


@pytest.mark.parametrize("yaw_deg", [3.0, -3.0])
def test_detect_failure_uses_front_wheels_under_yaw(yaw_deg):
    """偏移 1 m 时，偏航 3° 让左前轮越过 1.85 m 的左边界，-3° 则不会"""
    yaw = math.radians(yaw_deg)
    pose = VehiclePose(10.0, 1.0, yaw)
    half = VEHICLE.track_m / 2.0
    wb = VEHICLE.wheelbase_m
    front_left = (10.0 + wb * math.cos(yaw) - half * math.sin(yaw), 1.0 + wb * math.sin(yaw) + half * math.cos(yaw))
    wheels = wheel_positions(pose, VEHICLE)
    assert tuple(wheels[2]) == pytest.approx(front_left, abs=1e-12)

    touches = max(wheels[:, 1]) >= 1.85
    assert touches == (front_left[1] >= 1.85) == (yaw_deg > 0)
    expected = "boundary_touch" if touches else None
    assert detect_failure(SimState(pose, 20.0), VEHICLE, LEFT, RIGHT) == expected


def test_nearest_frame_and_relative_pose(full_recording):
    for k in (0, 7, len(full_recording) - 1):
        pose = full_recording.poses[k]
        assert nearest_frame(full_recording, pose) == k
        assert nearest_frame(full_recording, pose, hint=max(0, k - 3)) == k
        assert relative_pose(full_recording, k, pose) == (0.0, 0.0, 0.0)


class _Stations:
    """只有中心线与帧弧长的最小录制"""

    def __init__(self, stations):
        self.centerline = Polyline(np.array([[0.0, 0.0], [8.0, 0.0]]))
        self.frame_stations = np.asarray(stations, dtype=np.float64)

    def __len__(self):
        return len(self.frame_stations)


@pytest.mark.parametrize("hint", [None, 0, 1])
def test_nearest_frame_tie_takes_lower_index(hint):
    rec = _Stations([0.0, 2.0, 4.0, 6.0])
    # 弧长 3.0 与第 1、2 帧等距
    assert nearest_frame(rec, VehiclePose(3.0, 0.5, 0.0), hint=hint) == 1
    assert nearest_frame(rec, VehiclePose(3.5, 0.0, 0.0), hint=hint) == 2


def test_warp_bounds():
    check_warp_bounds(VehiclePose(0.0, 1.4, math.radians(9.0)), CONFIG)
    with pytest.raises(WarpInvalid):
        check_warp_bounds(VehiclePose(0.0, 1.6, 0.0), CONFIG)
    with pytest.raises(WarpInvalid):
        check_warp_bounds(VehiclePose(0.0, 0.0, math.radians(-11.0)), CONFIG)


def test_synth_view_at_recorded_pose_is_the_recorded_frame(short_recording):
    view = synth_view(short_recording, short_recording.poses[6], "center")
    assert view.valid_fraction == 1.0
    assert view.image.same_as(short_recording.frame(6, "center"))


def _straight_windows(segments, after_arc_m: float = 70.0, before_arc_m: float = 40.0) -> list[tuple[float, float]]:
    """直路段中离弯道足够远的弧长区间（出弯后留出收敛距离，入弯前避开前视提前转向）"""
    windows, start = [], 0.0
    for k, seg in enumerate(segments):
        end = start + seg.length_m
        if seg.kind == "straight":
            lo = start + (after_arc_m if k > 0 else 0.0)
            hi = end - (before_arc_m if k + 1 < len(segments) else 0.0)
            if hi > lo:
                windows.append((lo, hi))
        start = end
    return windows


def _straight_rms(report, rec, segments) -> tuple[float, int]:
    stations = rec.centerline.project(np.stack([report.x, report.y], axis=1)).station
    keep = np.zeros(len(stations), dtype=bool)
    for lo, hi in _straight_windows(segments):
        keep |= (stations >= lo) & (stations <= hi)
    offsets = np.asarray(report.lateral_offset)[keep]
    return float(np.sqrt(np.mean(offsets ** 2))), int(keep.sum())


def test_oracle_resim_is_clean_and_deterministic(curvy_scene, full_recording):
    report = _resim(full_recording, OraclePolicy())
    assert report.failures == []
    assert report.steps > 100
    assert report.distance_m == pytest.approx(report.steps * CONFIG.dt_s * 20.0)
    rms, n = _straight_rms(report, full_recording, curvy_scene.spec.segments)
    assert n > 50
    assert rms <= 0.05
    assert summarize(report).mdbf_infinite
    assert _resim(full_recording, OraclePolicy()).same_as(report)


def test_oracle_holds_the_centerline_on_a_straight_road(bare_scene, rig):
    trace = world.simulate_human_drive(bare_scene, 20.0, 0.2, seed=4)
    report = _resim(world.record(bare_scene, trace, rig, 10.0), OraclePolicy())
    assert report.failures == [] and report.steps > 100
    assert float(np.sqrt(np.mean(np.square(report.lateral_offset)))) <= 0.05


@pytest.mark.parametrize("source", ["default", "mapa_story"])
@pytest.mark.parametrize("policy", [OraclePolicy(), CheaterPolicy()], ids=["oracle", "cheater"])
def test_reference_worlds_resim_to_the_end(source, policy):
    """默认世界与参考配置上，特权策略都能跑完整段录制，标签不会越界"""
    cfg = ExperimentConfig() if source == "default" else load_experiment_config(REFERENCE_CONFIG)
    rec = experiment.make_recording(cfg)
    report = run_resim(rec, policy, cfg.resim.patch, cfg.resim.vehicle, cfg.resim.config, cfg.resim.camera)
    assert report.distance_m > 1000.0
    assert report.failure_counts()["invalid_prediction"] == 0
    if policy.name == "oracle":
        assert report.failures == []


def test_out_of_range_prediction_is_a_failure_not_a_crash(full_recording):
    report = _resim(full_recording, OffsetPolicy(OraclePolicy(), 25.0))
    assert report.steps > 100
    assert len(report.failures) >= 2
    assert {f.cause for f in report.failures} == {"invalid_prediction"}
    np.testing.assert_allclose(np.diff([f.distance_m for f in report.failures]), CONFIG.cooldown_m)
    # 没有可用预测时车辆直行
    assert set(report.steering) == {0.0}
    assert np.max(np.abs(report.lateral_offset)) < 0.5


def test_failures_are_separated_by_cooldown(full_recording):
    report = _resim(full_recording, OffsetPolicy(OraclePolicy(), 3.0))
    assert len(report.failures) >= 2
    assert {f.cause for f in report.failures} <= set(FAILURE_CAUSES)
    distances = [f.distance_m for f in report.failures]
    assert np.all(np.diff(distances) >= CONFIG.cooldown_m)
    assert any(report.in_cooldown)
    # 报告中的偏移始终在车道内附近（每次故障后复位）
    assert np.max(np.abs(report.lateral_offset)) < 2.5
    for f in report.failures:
        if f.step + 1 < report.steps:
            assert abs(report.lateral_offset[f.step + 1]) < 1e-9


class _SteerLeft:
    """始终预测向左 3 m 的平行轨迹"""
    name = "steer-left"
    uses_patch = False

    def predict(self, inp):
        return TrajectoryPrediction(np.full(100, 3.0))


def _steer_left_reference(steps: int, lane_half: float) -> tuple[list[float], list[float]]:
    """直路上逐步积分自行车模型，复位与冷却规则和重仿真相同；返回每步起点偏移与故障里程"""
    lookahead = CONFIG.lookahead(20.0)
    steering = math.atan(2.0 * VEHICLE.wheelbase_m * 3.0 / (lookahead ** 2 + 9.0))
    kappa = math.tan(steering) / VEHICLE.wheelbase_m
    ds = 20.0 * CONFIG.dt_s
    y = psi = distance = 0.0
    cooldown_from, pending = -math.inf, False
    offsets, failures = [], []
    for _ in range(steps):
        offsets.append(y)
        psi_next = psi + kappa * ds
        y += (math.cos(psi) - math.cos(psi_next)) / kappa
        psi = psi_next
        distance += ds
        touch = y + VEHICLE.wheelbase_m * math.sin(psi) + VEHICLE.track_m / 2.0 * math.cos(psi) >= lane_half
        if touch and distance - cooldown_from < CONFIG.cooldown_m:
            pending = True
            y = psi = 0.0
        elif touch or pending:
            failures.append(distance)
            cooldown_from, pending = distance, False
            y = psi = 0.0
    return offsets, failures


def test_steer_left_failures_match_bicycle_model(bare_scene, rig):
    trace = world.simulate_human_drive(bare_scene, 20.0, 0.0, seed=0)
    report = _resim(world.record(bare_scene, trace, rig, 10.0), _SteerLeft())
    offsets, failures = _steer_left_reference(report.steps, bare_scene.spec.lane_width_m / 2.0)

    assert len(failures) >= 3
    assert [f.cause for f in report.failures] == ["boundary_touch"] * len(failures)
    np.testing.assert_allclose([f.distance_m for f in report.failures], failures, atol=1e-6)
    np.testing.assert_allclose(report.lateral_offset, offsets, atol=1e-6)
    # 每个冷却窗口记一次
    np.testing.assert_allclose(np.diff(failures), CONFIG.cooldown_m, atol=1e-6)


def test_failure_count_does_not_drop_as_the_lane_narrows(curvy_scene, rig):
    counts = []
    for width in (3.7, 3.3, 3.0):
        scene = world.build_road(curvy_scene.spec.model_copy(update={"lane_width_m": width}), seed=11)
        trace = world.simulate_human_drive(scene, 20.0, 0.2, seed=5)
        report = _resim(world.record(scene, trace, rig, 10.0), OffsetPolicy(OraclePolicy(), 1.5))
        counts.append(len(report.failures))
    assert counts[0] > 0
    assert counts == sorted(counts)


def test_ridge_policy_runs_on_synthesized_views(full_recording):
    features = pooled_size((209, 65), 1, 5)
    model = RidgeModel(weights=np.zeros((100, features + 1)), ridge_lambda=1.0, patch_kind="regular",
                       patch_shape=(209, 65, 1), pool=5)
    report = _resim(full_recording, RidgePolicy(model), max_steps=5)
    assert report.steps == 5
    assert report.steering == [0.0] * 5
    assert all(len(p) == 10 for p in report.predictions)


def test_resim_rejects_bad_setup(full_recording):
    with pytest.raises(ResimError):
        _resim(full_recording, OraclePolicy(), camera="roof")
    with pytest.raises(ResimError):
        run_resim(full_recording, OraclePolicy(), PatchConfig(), VehicleSpec(track_m=4.0), CONFIG)


def test_report_round_trip(tmp_path, full_recording):
    report = _resim(full_recording, OffsetPolicy(OraclePolicy(), 3.0), max_steps=300)
    save_report(report, tmp_path / "r.json")
    assert load_report(tmp_path / "r.json").same_as(report)
    (tmp_path / "bad.json").write_text('{"format": "nope"}', encoding="utf-8")
    with pytest.raises(ResimError):
        load_report(tmp_path / "bad.json")
    with pytest.raises(ResimError):
        load_report(tmp_path / "missing.json")


def _ten_km_scene() -> world.WorldScene:
    block = [
        StraightSegment(length_m=800.0),
        ArcSegment(radius_m=800.0, angle_rad=0.4),
        StraightSegment(length_m=700.0),
        ArcSegment(radius_m=-1000.0, angle_rad=0.35),
    ]
    spec = RoadSpec(segments=block * 5, billboards=BillboardSpec(enabled=False))
    return world.build_road(spec, seed=2)


@pytest.mark.slow
def test_oracle_drives_ten_km_without_failures(rig):
    scene = _ten_km_scene()
    assert scene.length_m > 10_000.0
    trace = world.simulate_human_drive(scene, 20.0, 0.2, seed=1)
    rec = world.record(scene, trace, rig, 10.0)
    report = _resim(rec, OraclePolicy())
    assert report.distance_m > 9_500.0
    summary = summarize(report)
    assert summary.failures == 0 and summary.mdbf_infinite
    assert summary.precision_pct >= 95.0
    rms, n = _straight_rms(report, rec, scene.spec.segments)
    assert n > 2_000 and rms <= 0.05
