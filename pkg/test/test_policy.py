import numpy as np
import pytest

from lane_resim.services.augmentation import FLAG_Y_ONLY, SampleRecord, SampleStoreWriter, StoreHeader
from lane_resim.services.geometry import ImageBuffer, VehiclePose
from lane_resim.services.labels import ManeuverTag
from lane_resim.services.policy import (CheaterPolicy, OffsetPolicy, OraclePolicy, PolicyError, PolicyInput,
                                        PrivilegedState, RidgeModel, RidgePolicy, TrajectoryPrediction,
                                        load_model, load_policy, normal_equation_residual, predict, save_model,
                                        train_ridge)
from lane_resim.utils.polyline import Polyline

PATCH_W, PATCH_H = 4, 3
N_FEATURES = PATCH_W * PATCH_H
STRAIGHT = Polyline(np.array([[0.0, 0.0], [500.0, 0.0]]))


@pytest.fixture(scope="module")
def linear_store(tmp_path_factory):
    """标签是像素值的整数系数线性函数，λ=0 时应能精确恢复"""
    rng = np.random.default_rng(7)
    a = rng.integers(-2, 3, size=(100, N_FEATURES)).astype(np.float64)
    b = rng.integers(-3, 4, size=100).astype(np.float64)
    header = StoreHeader(count=0, patch_w=PATCH_W, patch_h=PATCH_H, channels=1, label_dims=100,
                         flags=FLAG_Y_ONLY, seed=0)
    path = tmp_path_factory.mktemp("store") / "linear.pnss"
    with SampleStoreWriter(path, header) as writer:
        for i in range(200):
            x = rng.integers(0, 9, size=N_FEATURES) / 8.0
            writer.append(SampleRecord(
                patch=x.reshape(PATCH_H, PATCH_W, 1).astype(np.float32), label=(a @ x + b).astype(np.float32),
                maneuver=ManeuverTag.LANE_STABLE, camera="center", recording_id=0, frame=i,
                shift_m=0.0, yaw_rad=0.0))
    return path, a, b


def _privileged(pose: VehiclePose, human: Polyline | None = None) -> PolicyInput:
    return PolicyInput(None, PrivilegedState(pose, STRAIGHT, human or STRAIGHT))


def test_ridge_recovers_exact_linear_map(linear_store):
    path, a, b = linear_store
    model = train_ridge(path, 0.0, pool=1)
    np.testing.assert_allclose(model.weights[:, :-1], a, atol=1e-8)
    np.testing.assert_allclose(model.weights[:, -1], b, atol=1e-8)
    assert model.patch_kind == "regular" and model.patch_shape == (PATCH_W, PATCH_H, 1)


def test_ridge_solution_satisfies_normal_equations(linear_store):
    path, _, _ = linear_store
    model = train_ridge(path, 2.5, pool=1)
    assert normal_equation_residual(model, path) < 1e-8


def test_larger_lambda_shrinks_weights(linear_store):
    path, _, _ = linear_store
    small = train_ridge(path, 0.1, pool=1)
    large = train_ridge(path, 100.0, pool=1)
    assert np.linalg.norm(large.weights[:, :-1]) < np.linalg.norm(small.weights[:, :-1])


def test_training_rejects_bad_input(tmp_path, linear_store):
    path, _, _ = linear_store
    with pytest.raises(PolicyError):
        train_ridge(path, -1.0, pool=1)
    with pytest.raises(PolicyError):
        train_ridge(tmp_path / "missing.pnss", 1.0)


def test_model_file_round_trip(tmp_path, linear_store):
    path, _, _ = linear_store
    model = train_ridge(path, 1.0, pool=2, config_hash="d" * 32)
    save_model(model, tmp_path / "m.pnrm")
    assert load_model(tmp_path / "m.pnrm").same_as(model)
    raw = (tmp_path / "m.pnrm").read_bytes()
    (tmp_path / "bad.pnrm").write_bytes(raw[:-8])
    with pytest.raises(PolicyError):
        load_model(tmp_path / "bad.pnrm")
    (tmp_path / "foreign.pnrm").write_bytes(b"JUNK" + raw[4:])
    with pytest.raises(PolicyError):
        load_model(tmp_path / "foreign.pnrm")


def test_ridge_policy_predicts_from_patch(linear_store):
    path, a, b = linear_store
    policy = RidgePolicy(train_ridge(path, 0.0, pool=1))
    x = np.full(N_FEATURES, 0.5)
    out = policy.predict(PolicyInput(ImageBuffer(x.reshape(PATCH_H, PATCH_W, 1))))
    np.testing.assert_allclose(out.y, a @ x + b, atol=1e-8)
    with pytest.raises(PolicyError):
        policy.predict(PolicyInput(None))
    with pytest.raises(PolicyError):
        predict(policy.model, ImageBuffer.constant(5, 3, 0.5))


def test_model_shape_is_validated():
    with pytest.raises(PolicyError):
        RidgeModel(weights=np.zeros((100, 5)), ridge_lambda=1.0, patch_kind="regular", patch_shape=(4, 3, 1), pool=1)
    with pytest.raises(PolicyError):
        RidgeModel(weights=np.zeros((100, 13)), ridge_lambda=1.0, patch_kind="fisheye", patch_shape=(4, 3, 1), pool=1)


def test_prediction_bounds():
    with pytest.raises(PolicyError):
        TrajectoryPrediction(np.full(100, 20.0))
    with pytest.raises(PolicyError):
        TrajectoryPrediction(np.array([0.0, np.nan]))
    assert TrajectoryPrediction(np.zeros(100)).stations[-1] == 100.0


def test_oracle_returns_to_centerline():
    out = OraclePolicy().predict(_privileged(VehiclePose(10.0, 0.3, 0.0)))
    np.testing.assert_allclose(out.y, -0.3, atol=1e-12)
    assert len(out.y) == 100


def test_cheater_follows_human_path():
    human = Polyline(np.array([[0.0, 0.8], [500.0, 0.8]]))
    out = CheaterPolicy().predict(_privileged(VehiclePose(10.0, 0.0, 0.0), human))
    np.testing.assert_allclose(out.y, 0.8, atol=1e-12)


def test_privileged_policies_need_ground_truth():
    with pytest.raises(PolicyError):
        OraclePolicy().predict(PolicyInput(None))
    with pytest.raises(PolicyError):
        OraclePolicy().predict(_privileged(VehiclePose(450.0, 0.0, 0.0)))


def test_offset_policy_shifts_base():
    policy = OffsetPolicy(OraclePolicy(), 0.4)
    out = policy.predict(_privileged(VehiclePose(10.0, 0.0, 0.0)))
    np.testing.assert_allclose(out.y, 0.4)
    assert policy.name == "oracle+0.400m" and not policy.uses_patch


def test_load_policy(tmp_path, linear_store):
    assert isinstance(load_policy("oracle"), OraclePolicy)
    assert isinstance(load_policy("cheater"), CheaterPolicy)
    path, _, _ = linear_store
    save_model(train_ridge(path, 1.0, pool=1), tmp_path / "lanes.pnrm")
    policy = load_policy(f"model:{tmp_path / 'lanes.pnrm'}")
    assert policy.uses_patch and policy.name == "lanes"
    for bad in ("", "model:", "resnet"):
        with pytest.raises(PolicyError):
            load_policy(bad)
