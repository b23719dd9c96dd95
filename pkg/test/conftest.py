import numpy as np
import pytest

from lane_resim.config import settings
from lane_resim.schemas.geometry import CameraRig
from lane_resim.schemas.world import ArcSegment, BillboardSpec, RoadSpec, StraightSegment
from lane_resim.services import world


def curvy_segments():
    return [
        StraightSegment(length_m=150.0),
        ArcSegment(radius_m=400.0, angle_rad=0.4),
        StraightSegment(length_m=100.0),
        ArcSegment(radius_m=-400.0, angle_rad=0.3),
        StraightSegment(length_m=150.0),
    ]


@pytest.fixture(scope="session")
def rig() -> CameraRig:
    return CameraRig()


@pytest.fixture(scope="session")
def curvy_scene() -> world.WorldScene:
    return world.build_road(RoadSpec(segments=curvy_segments()), seed=11)


@pytest.fixture(scope="session")
def bare_scene() -> world.WorldScene:
    """直路、无立柱"""
    spec = RoadSpec(segments=[StraightSegment(length_m=400.0)], billboards=BillboardSpec(enabled=False))
    return world.build_road(spec, seed=3)


@pytest.fixture(scope="session")
def short_recording(curvy_scene, rig) -> world.Recording:
    """3 秒、三台相机的按需渲染录制"""
    trace = world.simulate_human_drive(curvy_scene, 20.0, 0.2, seed=5)
    return world.record(curvy_scene, trace, rig, 10.0, duration_s=3.0, recording_id=0)


@pytest.fixture(scope="session")
def full_recording(curvy_scene, rig) -> world.Recording:
    trace = world.simulate_human_drive(curvy_scene, 20.0, 0.2, seed=5)
    return world.record(curvy_scene, trace, rig, 10.0, recording_id=0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def no_log_file(monkeypatch):
    """CLI 与服务 lifespan 会重新配置日志，测试期间不写日志文件"""
    monkeypatch.setattr(settings, "LOG_FILE", "")
