import logging

import numpy as np
import pytest

from lane_resim.config import Settings, setup_logging
from lane_resim.utils.image_io import ImageIOError, load_pnm, save_pnm
from lane_resim.utils.polyline import Polyline, PolylineError
from lane_resim.utils.report_io import ArtifactError, canonical_hash, read_json, write_json


def _circle(radius: float = 100.0, n: int = 400) -> Polyline:
    a = np.linspace(0.0, np.pi / 2, n)
    return Polyline(np.stack([radius * np.sin(a), radius - radius * np.cos(a)], axis=1))


def test_project_straight_line():
    line = Polyline(np.array([[0.0, 0.0], [10.0, 0.0], [20.0, 0.0]]))
    proj = line.project(np.array([[5.0, 2.0], [15.0, -1.5], [-3.0, 0.0]]))
    np.testing.assert_allclose(proj.station, [5.0, 15.0, 0.0])
    np.testing.assert_allclose(proj.offset, [2.0, -1.5, 0.0])
    assert proj.segment.tolist() == [0, 1, 0]


def test_project_on_left_turn_is_left_positive():
    line = _circle()
    s = 60.0
    p = line.point_at(s) + 0.5 * line.normal_at(s)
    proj = line.project(p[None])
    assert proj.offset[0] == pytest.approx(0.5, abs=1e-3)
    assert proj.station[0] == pytest.approx(s, abs=1e-2)


def test_offset_and_resample():
    line = _circle()
    left = line.offset(1.0)
    np.testing.assert_allclose(np.hypot(left.points[1:-1, 0], left.points[1:-1, 1] - 100.0), 99.0, atol=1e-9)
    res = line.resample(0.25)
    assert res.length == pytest.approx(line.length, rel=1e-6)
    np.testing.assert_allclose(res.points[-1], line.points[-1], atol=1e-12)
    np.testing.assert_allclose(np.diff(res.stations)[:-1], 0.25, atol=1e-3)


def test_point_at_extrapolates_linearly():
    line = Polyline(np.array([[0.0, 0.0], [10.0, 0.0]]))
    np.testing.assert_allclose(line.point_at(np.array([-2.0, 12.0])), [[-2.0, 0.0], [12.0, 0.0]])
    assert line.heading_at(5.0) == 0.0


def test_polyline_errors():
    with pytest.raises(PolylineError):
        Polyline(np.array([[0.0, 0.0]]))
    with pytest.raises(PolylineError):
        Polyline(np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(PolylineError):
        Polyline(np.array([[0.0, 0.0], [1.0, 0.0]]), normals=np.zeros((3, 2)))
    with pytest.raises(PolylineError):
        Polyline(np.array([[0.0, 0.0], [1.0, 0.0]])).resample(0.0)


def test_canonical_hash_ignores_key_order():
    a = canonical_hash({"seed": 1, "world": {"b": 2.0, "a": [1, 2]}})
    b = canonical_hash({"world": {"a": [1, 2], "b": 2.0}, "seed": 1})
    assert a == b and len(a) == 32
    assert canonical_hash({"seed": 2}) != canonical_hash({"seed": 1})


def test_json_artifacts(tmp_path):
    path = write_json(tmp_path / "nested" / "a.json", {"z": 1, "a": [0.5, None]})
    assert read_json(path) == {"z": 1, "a": [0.5, None]}
    assert path.read_text(encoding="utf-8").index('"z"') < path.read_text(encoding="utf-8").index('"a"')
    assert not (tmp_path / "nested" / "a.json.tmp").exists()


def test_json_artifact_errors(tmp_path):
    with pytest.raises(ArtifactError):
        read_json(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{", encoding="utf-8")
    with pytest.raises(ArtifactError):
        read_json(tmp_path / "bad.json")
    with pytest.raises(ArtifactError):
        write_json(tmp_path / "nan.json", {"x": float("nan")})
    assert not (tmp_path / "nan.json").exists()


@pytest.mark.parametrize("channels", [1, 3])
def test_pnm_round_trip(tmp_path, rng, channels):
    pixels = (rng.integers(0, 256, size=(12, 17, channels)) / 255.0).astype(np.float32)
    path = save_pnm(tmp_path / f"img{channels}.pnm", pixels)
    back = load_pnm(path)
    assert back.shape == (12, 17, channels)
    assert np.array_equal(back, pixels)


def test_pnm_errors(tmp_path):
    with pytest.raises(ImageIOError):
        save_pnm(tmp_path / "two.pnm", np.zeros((4, 4, 2)))
    with pytest.raises(ImageIOError):
        load_pnm(tmp_path / "missing.pgm")
    (tmp_path / "junk.pgm").write_bytes(b"not an image")
    with pytest.raises(ImageIOError):
        load_pnm(tmp_path / "junk.pgm")


def test_default_logging_writes_no_file(tmp_path, monkeypatch):
    monkeypatch.delenv("LOG_FILE", raising=False)
    monkeypatch.chdir(tmp_path)
    assert Settings(_env_file=None).LOG_FILE == ""

    setup_logging(log_file="")
    logging.info("只写 stderr")
    assert not any(isinstance(h, logging.FileHandler) for h in logging.getLogger().handlers)
    assert list(tmp_path.iterdir()) == []
