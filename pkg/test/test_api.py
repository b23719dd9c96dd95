import time

import pytest
from fastapi.testclient import TestClient

from lane_resim.config import settings
from lane_resim.main import app
from lane_resim.services import task_manager
from lane_resim.utils.report_io import ArtifactError

SMALL_CONFIG = """
seed = 2

[world.road]
segments = [
    { kind = "straight", length_m = 250.0 },
    { kind = "arc", radius_m = 600.0, angle_rad = 0.2 },
    { kind = "straight", length_m = 150.0 },
]
"""


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "DATA_DIR", str(tmp_path / "data"))
    monkeypatch.setattr(settings, "TEMP_DIR", str(tmp_path / "temp"))
    monkeypatch.setattr(settings, "TASK_RETRY_DELAY", 0)
    with TestClient(app) as c:
        yield c


def test_health_check(client, tmp_path):
    resp = client.get("/")
    assert resp.status_code == 200
    assert resp.json()["status"] == "ok"
    assert (tmp_path / "data").is_dir() and (tmp_path / "temp").is_dir()


def test_unknown_task_is_404(client):
    assert client.get("/api/v1/tasks/does-not-exist").status_code == 404


def test_direct_resim_failure_is_500(client, tmp_path):
    resp = client.post("/api/v1/resim", json={"recording_dir": str(tmp_path / "missing")})
    assert resp.status_code == 500
    assert "处理失败" in resp.json()["detail"]


def test_polling_resim_failure_is_reported(client, tmp_path):
    resp = client.post("/api/v1/resim", json={"recording_dir": str(tmp_path / "missing"), "polling": True})
    assert resp.status_code == 200
    task_id = resp.json()["task_id"]
    status = client.get(f"/api/v1/tasks/{task_id}").json()
    assert status["status"] == task_manager.TaskStatus.FAILED
    assert status["result"]["error"].startswith("WorldError: ")


def test_request_validation_is_422(client):
    assert client.post("/api/v1/resim", json={"policy": "oracle"}).status_code == 422


def test_direct_mapa_with_oracle(client, tmp_path):
    config = tmp_path / "small.toml"
    config.write_text(SMALL_CONFIG, encoding="utf-8")
    resp = client.post("/api/v1/mapa", json={"policy": "oracle", "config_path": str(config), "polling": False})
    assert resp.status_code == 200
    output = resp.json()["output"]
    assert output["mapa_pct"] <= 5.0
    assert output["y_hl"] > 0 > output["y_hr"]


# --- 任务管理 ---

def _flaky(failures: list[BaseException]):
    calls = []

    def target():
        calls.append(1)
        if len(calls) <= len(failures):
            raise failures[len(calls) - 1]
        return {"ok": True}
    return target, calls


@pytest.fixture
def fast_retries(monkeypatch):
    monkeypatch.setattr(settings, "TASK_RETRY_DELAY", 0)
    monkeypatch.setattr(settings, "TASK_MAX_RETRIES", 3)


def test_io_errors_are_retried(fast_retries):
    target, calls = _flaky([OSError("磁盘忙"), ArtifactError("写出失败")])
    task_id = task_manager.create_task("test")
    task_manager.run_task_in_background(task_id, target)
    task = task_manager.get_task(task_id)
    assert task["status"] == task_manager.TaskStatus.COMPLETED
    assert task["result"] == {"ok": True}
    assert len(calls) == 3


def test_retries_are_bounded(fast_retries):
    target, calls = _flaky([OSError("a"), OSError("b"), OSError("c"), OSError("d")])
    task_id = task_manager.create_task("test")
    task_manager.run_task_in_background(task_id, target)
    task = task_manager.get_task(task_id)
    assert task["status"] == task_manager.TaskStatus.FAILED
    assert task["error"] == "c"
    assert len(calls) == 3


def test_domain_errors_fail_immediately(fast_retries):
    target, calls = _flaky([ValueError("坏参数")])
    task_id = task_manager.create_task("test")
    task_manager.run_task_in_background(task_id, target)
    task = task_manager.get_task(task_id)
    assert task["status"] == task_manager.TaskStatus.FAILED
    assert task["error"] == "ValueError: 坏参数"
    assert len(calls) == 1


def test_cleanup_removes_task():
    task_id = task_manager.create_task()
    task_manager.schedule_task_cleanup(task_id, 0)
    deadline = time.monotonic() + 2.0
    while task_manager.get_task(task_id) is not None and time.monotonic() < deadline:
        time.sleep(0.01)
    assert task_manager.get_task(task_id) is None


def test_get_task_returns_copy():
    task_id = task_manager.create_task()
    task_manager.get_task(task_id)["status"] = "tampered"
    assert task_manager.get_task(task_id)["status"] == task_manager.TaskStatus.PENDING
    task_manager.remove_task(task_id)
