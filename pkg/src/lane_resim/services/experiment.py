# src/lane_resim/services/experiment.py
"""
命令行各子命令背后的完整流程。每个产物都带上配置哈希，
同一配置与种子重复运行得到逐位相同的文件。
"""
import logging
from pathlib import Path

from ..schemas.augment import AugmentSpec
from ..schemas.experiment import ExperimentConfig
from ..schemas.patches import PatchConfig
from ..schemas.world import ArcSegment, ForkSegment, StraightSegment
from ..utils.report_io import file_sha256, read_json, write_json
from . import augmentation, metrics, policy as policy_service, resim as resim_service, world

SCENE_FORMAT = "lane-resim-scene"


class ExperimentError(Exception):
    """自定义实验流程异常"""
    pass


# 配置中的道路没有分岔时，多分辨率对比实验使用这条带匝道的道路
FORK_ROAD_SEGMENTS = (
    StraightSegment(length_m=250.0),
    ForkSegment(length_m=180.0, side="right", divergence_m=3.7),
    StraightSegment(length_m=200.0),
    ArcSegment(radius_m=600.0, angle_rad=0.3),
    ForkSegment(length_m=180.0, side="left", divergence_m=3.7),
    StraightSegment(length_m=200.0),
    ArcSegment(radius_m=-600.0, angle_rad=0.3),
    ForkSegment(length_m=180.0, side="right", divergence_m=3.7),
    StraightSegment(length_m=300.0),
)


def build_scene(cfg: ExperimentConfig) -> world.WorldScene:
    return world.build_road(cfg.world.road, cfg.seed)


def gen_world(cfg: ExperimentConfig, out: str | Path) -> dict:
    """生成场景并写出场景文件（道路参数、种子、配置哈希、摘要）"""
    scene = build_scene(cfg)
    payload = {
        "format": SCENE_FORMAT,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "road": cfg.world.road.model_dump(mode="json"),
        "summary": scene.summary(),
        "billboards": [{"base": list(b.base), "height_m": b.height_m, "width_m": b.width_m} for b in scene.billboards],
    }
    path = write_json(out, payload)
    return {"path": str(path), "sha256": file_sha256(path), **scene.summary()}


def make_recording(cfg: ExperimentConfig, scene: world.WorldScene | None = None, recording_id: int = 0,
                   duration_s: float | None = None, bias_m: float = 0.0) -> world.Recording:
    """按配置的人类驾驶参数生成（按需渲染的）录制"""
    scene = scene or build_scene(cfg)
    drive = cfg.world.drive
    trace = world.simulate_human_drive(
        scene, drive.speed_mps, drive.lateral_noise_sd_m, cfg.seed + recording_id,
        correlation_length_m=drive.correlation_length_m, dt_s=drive.dt_s, bias_m=bias_m,
        end_margin_m=drive.end_margin_m,
    )
    return world.record(scene, trace, cfg.rig, drive.frame_rate_hz, duration_s=duration_s,
                        recording_id=recording_id, config_hash=cfg.config_hash())


def record_to_dir(cfg: ExperimentConfig, out_dir: str | Path, recording_id: int = 0,
                  duration_s: float | None = None) -> dict:
    rec = make_recording(cfg, recording_id=recording_id, duration_s=duration_s)
    path = world.save_recording(rec, out_dir)
    return {"path": str(path), "recording_id": recording_id, "ticks": len(rec), "frames": rec.frame_count,
            "manifest_sha256": file_sha256(Path(path) / world.MANIFEST_NAME)}


def _recordings(cfg: ExperimentConfig, recording_dirs: list[str] | None) -> list[world.Recording]:
    if recording_dirs:
        recs = [world.load_recording(d) for d in recording_dirs]
        ids = [r.recording_id for r in recs]
        if len(set(ids)) != len(ids):
            raise ExperimentError(f"录制编号重复: {ids}")
        return recs
    return [make_recording(cfg)]


def augment(cfg: ExperimentConfig, out_store: str | Path, recording_dirs: list[str] | None = None,
            spec: AugmentSpec | None = None, recordings: list[world.Recording] | None = None) -> dict:
    recs = recordings if recordings is not None else _recordings(cfg, recording_dirs)
    return augmentation.build_store(recs, spec or cfg.augment, out_store, seed=cfg.augment_seed,
                                    config_hash=cfg.config_hash())


def train(cfg: ExperimentConfig, store: str | Path, out_model: str | Path, ridge_lambda: float | None = None) -> dict:
    lam = cfg.train.ridge_lambda if ridge_lambda is None else ridge_lambda
    model = policy_service.train_ridge(store, lam, pool=cfg.train.pool, config_hash=cfg.config_hash())
    path = policy_service.save_model(model, out_model)
    return {"path": str(path), "sha256": file_sha256(path), "lambda": lam,
            "feature_dims": model.feature_dims, "label_dims": model.label_dims}


def resim(cfg: ExperimentConfig, recording_dir: str | Path, policy_spec: str, report_path: str | Path | None = None,
          patch: PatchConfig | None = None) -> tuple[resim_service.ResimReport, dict]:
    rec = world.load_recording(recording_dir)
    pol = policy_service.load_policy(policy_spec)
    section = cfg.resim
    report = resim_service.run_resim(rec, pol, patch or _policy_patch(pol, section.patch), section.vehicle,
                                     section.config, section.camera, cfg.config_hash())
    if report_path is not None:
        resim_service.save_report(report, report_path)
    summary = metrics.summarize(report, cfg.metrics, config_hash=cfg.config_hash())
    return report, summary.model_dump(mode="json")


def _policy_patch(pol, default: PatchConfig) -> PatchConfig:
    """岭回归模型记录了训练时的图块类型，重仿真必须使用相同的图块"""
    model = getattr(pol, "model", None)
    if model is None or model.patch_kind == default.kind:
        return default
    return default.model_copy(update={"kind": model.patch_kind})


def mapa(cfg: ExperimentConfig, policy_spec: str, out: str | Path | None = None,
         scene: world.WorldScene | None = None, pol=None, patch: PatchConfig | None = None) -> dict:
    scene = scene or build_scene(cfg)
    pol = pol or policy_service.load_policy(policy_spec)
    section = cfg.resim.model_copy(update={"patch": patch or _policy_patch(pol, cfg.resim.patch)})
    result = metrics.run_mapa_experiment(scene, pol, cfg.metrics.mapa, cfg.world.drive, cfg.rig, section,
                                         cfg.seed, cfg.config_hash())
    payload = {"policy": policy_spec, "config_hash": cfg.config_hash(), **result.to_dict()}
    if out is not None:
        target = Path(out)
        write_json(target, payload)
        # 两次重仿真的完整报告放在结果文件旁边
        resim_service.save_report(result.left_report, target.with_name(f"{target.stem}_left_report.json"))
        resim_service.save_report(result.right_report, target.with_name(f"{target.stem}_right_report.json"))
    return payload


def report(cfg: ExperimentConfig, report_path: str | Path, out: str | Path | None = None,
           csv_path: str | Path | None = None) -> dict:
    rep = resim_service.load_report(report_path)
    summary = metrics.summarize(rep, cfg.metrics, config_hash=rep.config_hash).model_dump(mode="json")
    if out is not None:
        write_json(out, summary)
    if csv_path is not None:
        metrics.write_series_csv(rep, csv_path)
    return summary


def discrepancy(cfg: ExperimentConfig, recording_dir: str | Path, out: str | Path | None = None) -> dict:
    rec = world.load_recording(recording_dir)
    ranges = metrics.label_discrepancy_report(rec, cfg.metrics.discrepancy_threshold_m)
    payload = {"recording_id": rec.recording_id, "threshold_m": cfg.metrics.discrepancy_threshold_m,
               "config_hash": cfg.config_hash(), "ranges": ranges}
    if out is not None:
        write_json(out, payload)
    return payload


def repro_mapa_story(cfg: ExperimentConfig, out_dir: str | Path) -> dict:
    """
    场景（带立柱）→ 录制 → 两个样本库（人类轨迹标签 + 仅中间相机 / 中心线标签 + 三相机）
    → 两个岭回归模型 → 分别做 MAPA 实验 → 对比表。
    """
    out = Path(out_dir)
    if not cfg.world.road.billboards.enabled:
        raise ExperimentError("MAPA 复现需要路侧立柱（world.road.billboards.enabled = true）")
    scene = build_scene(cfg)
    rec = make_recording(cfg, scene=scene)
    variants = (
        ("human_path_center_only", cfg.augment.model_copy(update={
            "label_source": "human_path", "camera_weights": {"left": 0.0, "center": 1.0, "right": 0.0}})),
        ("centerline_three_cameras", cfg.augment.model_copy(update={"label_source": "centerline"})),
    )
    rows = []
    for name, spec in variants:
        logging.info(f"MAPA 复现: 变体 {name}")
        store = out / f"{name}.pnss"
        model_path = out / f"{name}.pnrm"
        store_summary = augment(cfg, store, spec=spec, recordings=[rec])
        train_summary = train(cfg, store, model_path)
        pol = policy_service.RidgePolicy(policy_service.load_model(model_path), name=name)
        result = mapa(cfg, name, out / f"{name}_mapa.json", scene=scene, pol=pol,
                      patch=spec.patch)
        rows.append({
            "variant": name,
            "label_source": spec.label_source,
            "cameras": [c for c, w in spec.camera_weights.items() if w > 0],
            "records": store_summary["records"],
            "mapa_pct": result["mapa_pct"],
            "store_sha256": store_summary["sha256"],
            "model_sha256": train_summary["sha256"],
        })
    table = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "rows": rows,
             "mapa_gap_pct": rows[0]["mapa_pct"] - rows[1]["mapa_pct"]}
    write_json(out / "mapa_story.json", table)
    logging.info(f"MAPA 复现完成: 人类轨迹标签 {rows[0]['mapa_pct']:.1f}%, 中心线标签 {rows[1]['mapa_pct']:.1f}%")
    return table


def _has_fork(cfg: ExperimentConfig) -> bool:
    return any(isinstance(seg, ForkSegment) for seg in cfg.world.road.segments)


def compare_patches(cfg: ExperimentConfig, out_dir: str | Path, eval_recordings: int = 2) -> dict:
    """
    在带匝道的道路上分别用常规图块和多分辨率图块训练模型，
    在同一组录制上重仿真，比较故障间平均距离。
    """
    out = Path(out_dir)
    if not _has_fork(cfg):
        logging.warning("配置的道路没有分岔，改用内置的匝道道路")
        road = cfg.world.road.model_copy(update={"segments": list(FORK_ROAD_SEGMENTS)})
        cfg = cfg.model_copy(update={"world": cfg.world.model_copy(update={"road": road})})
    scene = build_scene(cfg)
    train_rec = make_recording(cfg, scene=scene, recording_id=0)
    eval_recs = [make_recording(cfg, scene=scene, recording_id=10 + i) for i in range(eval_recordings)]

    rows = []
    for kind in ("regular", "multires"):
        patch = cfg.augment.patch.model_copy(update={"kind": kind})
        spec = cfg.augment.model_copy(update={"patch": patch, "label_source": "centerline"})
        store = out / f"{kind}.pnss"
        model_path = out / f"{kind}.pnrm"
        augment(cfg, store, spec=spec, recordings=[train_rec])
        train(cfg, store, model_path)
        pol = policy_service.RidgePolicy(policy_service.load_model(model_path), name=kind)
        distance = 0.0
        failures = 0
        for rec in eval_recs:
            rep = resim_service.run_resim(rec, pol, patch, cfg.resim.vehicle, cfg.resim.config,
                                          cfg.resim.camera, cfg.config_hash())
            resim_service.save_report(rep, out / f"{kind}_rec{rec.recording_id}_report.json")
            distance += rep.distance_m
            failures += len(rep.failures)
        rows.append({
            "patch": kind,
            "distance_km": distance / 1000.0,
            "failures": failures,
            "mdbf_km": distance / 1000.0 / failures if failures else None,
            "mdbf_infinite": failures == 0,
        })
    table = {"config_hash": cfg.config_hash(), "rows": rows}
    write_json(out / "compare_patches.json", table)
    return table


def load_scene_file(path: str | Path) -> dict:
    data = read_json(path)
    if data.get("format") != SCENE_FORMAT:
        raise ExperimentError(f"{path} 不是场景文件")
    return data
