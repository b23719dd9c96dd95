# src/lane_resim/services/augmentation.py
"""
离线增强与平面二进制样本库。

每个样本：按权重随机选一台相机，把该相机的画面变换到“标准相机 + 随机平移/偏航”
的虚拟位姿，裁出图块；标签是真值路径在扰动后的虚拟车辆系中的表示。
"""
import os
import struct
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ..config import settings
from ..schemas.augment import AugmentSpec
from ..schemas.geometry import CAMERA_IDS
from ..utils.polyline import Polyline
from ..utils.report_io import cleanup_temp_file, file_sha256
from .geometry import VehiclePose, compose_pose, rectify_pinhole, warp_viewpoint
from .labels import (LABEL_POINTS, LABEL_SPACING_M, ManeuverTag, centerline_from_edges,
                     extract_local_trajectory, label_to_prediction_targets, perturb_pose)
from .patches import make_patch
from .world import Recording


class AugmentationError(Exception):
    """自定义增强异常"""
    pass


class SampleRejected(AugmentationError):
    """视角变换后的有效像素比例低于阈值，调用方应重新抽样"""
    pass


class SampleStoreError(Exception):
    """自定义样本库读写异常"""
    pass


# --- 样本库格式 ---

STORE_MAGIC = b"PNSS"
STORE_VERSION = 1
HEADER_STRUCT = struct.Struct("<4sIQIIIIIQ32s")
FLAG_Y_ONLY = 1
FLAG_MULTIRES = 2
# 拒绝率超过这个比例说明平移范围配置有误
MAX_REJECTION_RATE = 0.5
_CHUNK_FRAMES = 32


@dataclass(frozen=True)
class StoreHeader:
    count: int
    patch_w: int
    patch_h: int
    channels: int
    label_dims: int
    flags: int
    seed: int
    config_hash: str = ""
    version: int = STORE_VERSION

    @property
    def y_only(self) -> bool:
        return bool(self.flags & FLAG_Y_ONLY)

    @property
    def multires(self) -> bool:
        return bool(self.flags & FLAG_MULTIRES)

    @property
    def patch_size(self) -> int:
        return self.patch_w * self.patch_h * self.channels

    def record_dtype(self) -> np.dtype:
        return record_dtype(self.patch_size, self.label_dims)

    @property
    def record_size(self) -> int:
        return self.record_dtype().itemsize

    def pack(self) -> bytes:
        return HEADER_STRUCT.pack(STORE_MAGIC, self.version, self.count, self.patch_w, self.patch_h,
                                  self.channels, self.label_dims, self.flags, self.seed,
                                  self.config_hash.encode("ascii").ljust(32, b"\0")[:32])

    @classmethod
    def unpack(cls, raw: bytes) -> "StoreHeader":
        if len(raw) < HEADER_STRUCT.size:
            raise SampleStoreError(f"样本库头部不完整: {len(raw)} 字节")
        magic, version, count, pw, ph, ch, ld, flags, seed, chash = HEADER_STRUCT.unpack(raw[:HEADER_STRUCT.size])
        if magic != STORE_MAGIC:
            raise SampleStoreError(f"样本库魔数错误: {magic!r}")
        if version != STORE_VERSION:
            raise SampleStoreError(f"不支持的样本库版本: {version}")
        return cls(count=count, patch_w=pw, patch_h=ph, channels=ch, label_dims=ld, flags=flags, seed=seed,
                   config_hash=chash.rstrip(b"\0").decode("ascii"), version=version)


def record_dtype(patch_size: int, label_dims: int) -> np.dtype:
    """紧凑排列的小端记录"""
    return np.dtype([
        ("patch", "<f4", (patch_size,)),
        ("label", "<f4", (label_dims,)),
        ("maneuver", "u1"),
        ("camera", "u1"),
        ("pad", "<u2"),
        ("recording", "<u4"),
        ("frame", "<u4"),
        ("shift", "<f8"),
        ("yaw", "<f8"),
    ])


@dataclass(frozen=True, eq=False)
class SampleRecord:
    patch: np.ndarray          # (H, W, C) float32
    label: np.ndarray          # (L,) float32
    maneuver: ManeuverTag
    camera: str
    recording_id: int
    frame: int
    shift_m: float
    yaw_rad: float

    @property
    def provenance(self) -> tuple[int, int, str, float, float]:
        return self.recording_id, self.frame, self.camera, self.shift_m, self.yaw_rad

    def same_as(self, other: "SampleRecord") -> bool:
        return (self.provenance == other.provenance and self.maneuver == other.maneuver
                and np.array_equal(self.patch, other.patch) and np.array_equal(self.label, other.label))


def _to_row(rec: SampleRecord, dtype: np.dtype) -> np.ndarray:
    row = np.zeros(1, dtype=dtype)
    row["patch"][0] = rec.patch.ravel()
    row["label"][0] = rec.label
    row["maneuver"] = int(rec.maneuver)
    row["camera"] = CAMERA_IDS.index(rec.camera)
    row["recording"] = rec.recording_id
    row["frame"] = rec.frame
    row["shift"] = rec.shift_m
    row["yaw"] = rec.yaw_rad
    return row


def _from_row(row: np.void, header: StoreHeader) -> SampleRecord:
    return SampleRecord(
        patch=np.array(row["patch"], dtype=np.float32).reshape(header.patch_h, header.patch_w, header.channels),
        label=np.array(row["label"], dtype=np.float32),
        maneuver=ManeuverTag(int(row["maneuver"])),
        camera=CAMERA_IDS[int(row["camera"])],
        recording_id=int(row["recording"]),
        frame=int(row["frame"]),
        shift_m=float(row["shift"]),
        yaw_rad=float(row["yaw"]),
    )


class SampleStoreWriter:
    """单写者顺序追加；关闭时回填记录数"""

    def __init__(self, path: str | Path, header: StoreHeader):
        self.path = Path(path)
        self.header = header
        self._dtype = header.record_dtype()
        self._count = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "wb")
        self._f.write(header.pack())

    def append(self, rec: SampleRecord):
        if rec.patch.size != self.header.patch_size or rec.label.size != self.header.label_dims:
            raise SampleStoreError(
                f"记录尺寸 (patch={rec.patch.size}, label={rec.label.size}) 与库头部不一致")
        self._f.write(_to_row(rec, self._dtype).tobytes())
        self._count += 1

    def append_raw(self, rows: np.ndarray):
        """追加已经是记录格式的结构化数组"""
        if rows.dtype != self._dtype:
            raise SampleStoreError("原始记录的格式与库头部不一致")
        self._f.write(rows.tobytes())
        self._count += len(rows)

    def close(self) -> StoreHeader:
        if self._f.closed:
            return self.header
        self.header = replace(self.header, count=self._count)
        self._f.seek(0)
        self._f.write(self.header.pack())
        self._f.close()
        return self.header

    def __enter__(self) -> "SampleStoreWriter":
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


class SampleStoreReader:
    """按文件顺序读取；除当前批次外不占用额外内存"""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        try:
            with open(self.path, "rb") as f:
                self.header = StoreHeader.unpack(f.read(HEADER_STRUCT.size))
            size = os.path.getsize(self.path)
        except FileNotFoundError as e:
            raise SampleStoreError(f"样本库不存在: {self.path}") from e
        expected = HEADER_STRUCT.size + self.header.count * self.header.record_size
        if size != expected:
            raise SampleStoreError(f"样本库 {self.path} 长度 {size} 与头部声明的 {expected} 不一致（文件被截断或损坏）")
        self._dtype = self.header.record_dtype()

    def __len__(self) -> int:
        return self.header.count

    def iter_batches(self, batch_size: int = 256) -> Iterator[np.ndarray]:
        with open(self.path, "rb") as f:
            f.seek(HEADER_STRUCT.size)
            remaining = self.header.count
            while remaining > 0:
                n = min(batch_size, remaining)
                raw = f.read(n * self._dtype.itemsize)
                if len(raw) != n * self._dtype.itemsize:
                    raise SampleStoreError(f"样本库 {self.path} 在读取过程中被截断")
                yield np.frombuffer(raw, dtype=self._dtype)
                remaining -= n

    def __iter__(self) -> Iterator[SampleRecord]:
        for batch in self.iter_batches(1):
            yield _from_row(batch[0], self.header)

    def read(self, index: int) -> SampleRecord:
        if not 0 <= index < self.header.count:
            raise SampleStoreError(f"记录下标越界: {index}")
        with open(self.path, "rb") as f:
            f.seek(HEADER_STRUCT.size + index * self._dtype.itemsize)
            row = np.frombuffer(f.read(self._dtype.itemsize), dtype=self._dtype)
        return _from_row(row[0], self.header)


def read_store(path: str | Path) -> Iterator[SampleRecord]:
    return iter(SampleStoreReader(path))


# --- 样本生成 ---

def label_path(rec: Recording, source: str) -> Polyline:
    """标签所沿的全局路径：车道中心线（由两条边界推出）或录制的人类轨迹"""
    if source == "human_path":
        return rec.human_path
    return centerline_from_edges(rec.left_boundary, rec.right_boundary)


def header_for(spec: AugmentSpec, channels: int, seed: int, config_hash: str = "") -> StoreHeader:
    pw, ph = spec.patch.shape
    flags = (FLAG_Y_ONLY if spec.y_only_labels else 0) | (FLAG_MULTIRES if spec.patch.kind == "multires" else 0)
    return StoreHeader(count=0, patch_w=pw, patch_h=ph, channels=channels,
                       label_dims=LABEL_POINTS if spec.y_only_labels else 3 * LABEL_POINTS,
                       flags=flags, seed=seed, config_hash=config_hash)


def _build_sample(rec: Recording, frame: int, camera: str, shift_m: float, yaw_rad: float,
                  spec: AugmentSpec, path: Polyline) -> tuple[SampleRecord, float]:
    rig = rec.rig
    intr = rig.intrinsics
    img = rec.frame(frame, camera)
    if not rig.lens.is_identity:
        img = rectify_pinhole(img, rig.lens, intr, intr)
    target = compose_pose(VehiclePose(0.0, -shift_m, yaw_rad), rig.standard)
    warped = warp_viewpoint(img, rig.cameras[camera], target, intr)
    patch = make_patch(warped.image, spec.patch, rig.standard, intr)

    pose = rec.poses[frame]
    anchor = float(path.project(np.array([[pose.x, pose.y]])).station[0])
    label = extract_local_trajectory(path, perturb_pose(pose, shift_m, yaw_rad), anchor_station=anchor)
    values = label_to_prediction_targets(label) if spec.y_only_labels else label.flatten()
    sample = SampleRecord(
        patch=patch.pixels, label=values.astype(np.float32), maneuver=label.maneuver, camera=camera,
        recording_id=rec.recording_id, frame=frame, shift_m=float(shift_m), yaw_rad=float(yaw_rad),
    )
    return sample, warped.valid_fraction


def augment_sample(rec: Recording, frame: int, spec: AugmentSpec, rng: np.random.Generator,
                   path: Polyline | None = None) -> SampleRecord:
    """
    抽一次相机、平移和偏航并生成样本；有效像素比例不足时抛出 SampleRejected。
    """
    if not 0 <= frame < len(rec):
        raise AugmentationError(f"帧下标越界: {frame}")
    camera = CAMERA_IDS[int(rng.choice(len(CAMERA_IDS), p=spec.weight_vector()))]
    shift = float(rng.uniform(-spec.shift_max_m, spec.shift_max_m))
    yaw = float(np.radians(rng.uniform(-spec.yaw_max_deg, spec.yaw_max_deg)))
    if camera not in rec.cameras:
        raise AugmentationError(f"录制 {rec.recording_id} 中没有 {camera} 相机")
    sample, fraction = _build_sample(rec, frame, camera, shift, yaw, spec,
                                     label_path(rec, spec.label_source) if path is None else path)
    if fraction < spec.min_valid_fraction:
        raise SampleRejected(f"有效像素比例 {fraction:.3f} 低于 {spec.min_valid_fraction}")
    return sample


def regenerate_sample(recordings: dict[int, Recording], provenance: SampleRecord, spec: AugmentSpec) -> SampleRecord:
    """按样本的来源信息（录制、帧、相机、平移、偏航）重建样本"""
    rec = recordings.get(provenance.recording_id)
    if rec is None:
        raise AugmentationError(f"找不到录制 {provenance.recording_id}")
    sample, _ = _build_sample(rec, provenance.frame, provenance.camera, provenance.shift_m,
                              provenance.yaw_rad, spec, label_path(rec, spec.label_source))
    return sample


@dataclass
class FrameOutcome:
    samples: list[SampleRecord] = field(default_factory=list)
    attempts: int = 0
    rejections: int = 0
    dropped: int = 0


def _augment_frame(rec: Recording, frame: int, spec: AugmentSpec, seed: int, path: Polyline) -> FrameOutcome:
    out = FrameOutcome()
    for j in range(spec.samples_per_frame):
        rng = np.random.default_rng(np.random.SeedSequence([seed, rec.recording_id, frame, j]))
        for _ in range(spec.max_attempts):
            out.attempts += 1
            try:
                out.samples.append(augment_sample(rec, frame, spec, rng, path))
                break
            except SampleRejected:
                out.rejections += 1
        else:
            out.dropped += 1
    return out


def eligible_frames(rec: Recording, path: Polyline, stride: int = 1) -> list[int]:
    """前方仍有完整标签长度的帧"""
    xy = np.array([[p.x, p.y] for p in rec.poses])
    stations = path.project(xy).station
    ok = stations + LABEL_POINTS * LABEL_SPACING_M <= path.length
    return [i for i in range(0, len(rec), stride) if ok[i]]


def build_store(recordings: Sequence[Recording], spec: AugmentSpec, out_path: str | Path,
                samples_per_frame: int | None = None, seed: int = 0, config_hash: str = "") -> dict:
    """
    两阶段构建：先按自然顺序（逐帧并行）生成样本写入临时文件，
    再按种子确定的排列顺序拷贝到 .partial 文件，成功后替换为最终文件；失败时不留下半成品。
    """
    if samples_per_frame is not None:
        spec = spec.model_copy(update={"samples_per_frame": samples_per_frame})
    if not recordings:
        raise AugmentationError("没有可用的录制")
    out = Path(out_path)
    channels = recordings[0].frame(0, recordings[0].cameras[0]).channels
    header = header_for(spec, channels, seed, config_hash)
    tmp = out.with_name(out.name + ".natural")
    partial = out.with_name(out.name + ".partial")
    attempts = rejections = dropped = 0

    logging.info(f"开始构建样本库 {out}: {len(recordings)} 个录制, 每帧 {spec.samples_per_frame} 个样本, "
                 f"标签来源 {spec.label_source}, 图块 {spec.patch.kind}")
    try:
        with SampleStoreWriter(tmp, header) as writer, ThreadPoolExecutor(max_workers=settings.MAX_WORKERS) as pool:
            for rec in recordings:
                path = label_path(rec, spec.label_source)
                frames = eligible_frames(rec, path, spec.frame_stride)
                for start in range(0, len(frames), _CHUNK_FRAMES):
                    chunk = frames[start:start + _CHUNK_FRAMES]
                    for outcome in pool.map(lambda f: _augment_frame(rec, f, spec, seed, path), chunk):
                        attempts += outcome.attempts
                        rejections += outcome.rejections
                        dropped += outcome.dropped
                        for sample in outcome.samples:
                            writer.append(sample)
        natural = SampleStoreReader(tmp)
        count = len(natural)
        rate = rejections / attempts if attempts else 0.0
        if rate > MAX_REJECTION_RATE:
            raise AugmentationError(f"拒绝率 {rate:.1%} 超过 {MAX_REJECTION_RATE:.0%}，请检查平移/偏航范围")
        if count == 0:
            raise AugmentationError("没有生成任何样本")

        perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5348])).permutation(count)
        rows = np.memmap(tmp, dtype=header.record_dtype(), mode="r", offset=HEADER_STRUCT.size, shape=(count,))
        with SampleStoreWriter(partial, header) as writer:
            for start in range(0, count, 256):
                writer.append_raw(np.ascontiguousarray(rows[perm[start:start + 256]]))
        del rows
        os.replace(partial, out)
    except OSError as e:
        logging.error(f"写出样本库 {out} 失败: {e}", exc_info=True)
        raise SampleStoreError(f"写出样本库 {out} 失败: {e}") from e
    finally:
        cleanup_temp_file(tmp)
        cleanup_temp_file(partial)

    summary = {
        "path": str(out),
        "records": int(count),
        "attempts": attempts,
        "rejections": rejections,
        "rejection_rate": rate,
        "dropped": dropped,
        "patch_shape": [header.patch_w, header.patch_h, header.channels],
        "label_dims": header.label_dims,
        "seed": seed,
        "config_hash": config_hash,
        "sha256": file_sha256(out),
    }
    logging.info(f"样本库已写出: {count} 条记录, 拒绝率 {rate:.2%}, 丢弃 {dropped} 个样本")
    return summary
