# src/lane_resim/utils/polyline.py
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree


class PolylineError(Exception):
    """自定义折线异常"""
    pass


@dataclass(frozen=True)
class Projection:
    """点在折线上的投影：弧长位置、带符号横向距离（左正）、所在线段"""
    station: np.ndarray
    offset: np.ndarray
    segment: np.ndarray


class Polyline:
    """
    二维折线，按弧长参数化。顶点法向量可由调用方给出（解析法向），
    否则取相邻线段方向的平均。
    """

    def __init__(self, points: np.ndarray, normals: np.ndarray | None = None):
        pts = np.array(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise PolylineError(f"折线至少需要两个二维顶点，收到形状 {pts.shape}")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise PolylineError("折线存在重合的相邻顶点")
        self.points = pts
        self.points.flags.writeable = False
        self._seg = seg
        self._seg_len = seg_len
        self._dir = seg / seg_len[:, None]
        self.stations = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.stations.flags.writeable = False
        if normals is None:
            normals = self._vertex_normals()
        else:
            normals = np.array(normals, dtype=np.float64)
            if normals.shape != pts.shape:
                raise PolylineError(f"法向量形状 {normals.shape} 与顶点形状 {pts.shape} 不一致")
        self.normals = normals

    def _vertex_normals(self) -> np.ndarray:
        t = np.empty_like(self.points)
        t[0] = self._dir[0]
        t[-1] = self._dir[-1]
        if len(self.points) > 2:
            t[1:-1] = self._dir[:-1] + self._dir[1:]
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        return np.stack([-t[:, 1], t[:, 0]], axis=1)

    @property
    def length(self) -> float:
        return float(self.stations[-1])

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.points)

    def _segment_of(self, s: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.stations, s, side="right") - 1
        return np.clip(idx, 0, len(self._seg) - 1)

    def point_at(self, s: np.ndarray | float) -> np.ndarray:
        """弧长 s 处的点；超出两端时沿首/末线段线性外推"""
        s = np.asarray(s, dtype=np.float64)
        idx = self._segment_of(s)
        t = (s - self.stations[idx]) / self._seg_len[idx]
        return self.points[idx] + t[..., None] * self._seg[idx]

    def heading_at(self, s: np.ndarray | float) -> np.ndarray:
        idx = self._segment_of(np.asarray(s, dtype=np.float64))
        return np.arctan2(self._dir[idx, 1], self._dir[idx, 0])

    def normal_at(self, s: np.ndarray | float) -> np.ndarray:
        """在相邻顶点法向之间线性插值后归一化（左侧为正）"""
        s = np.asarray(s, dtype=np.float64)
        idx = self._segment_of(s)
        t = np.clip((s - self.stations[idx]) / self._seg_len[idx], 0.0, 1.0)[..., None]
        n = (1.0 - t) * self.normals[idx] + t * self.normals[idx + 1]
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def project(self, points: np.ndarray) -> Projection:
        """
        最近点投影。先用 KD 树找最近顶点，再在其两侧线段上求垂足。
        要求折线不自交，且曲率半径远大于查询点到折线的距离。
        """
        q = np.atleast_2d(np.asarray(points, dtype=np.float64))
        _, k = self._tree.query(q)
        n_seg = len(self._seg)
        best_dist = np.full(len(q), np.inf)
        best_seg = np.zeros(len(q), dtype=np.int64)
        best_t = np.zeros(len(q))
        for cand in (np.clip(k - 1, 0, n_seg - 1), np.clip(k, 0, n_seg - 1)):
            rel = q - self.points[cand]
            t = np.clip(np.einsum("ij,ij->i", rel, self._seg[cand]) / self._seg_len[cand] ** 2, 0.0, 1.0)
            foot = self.points[cand] + t[:, None] * self._seg[cand]
            dist = np.hypot(q[:, 0] - foot[:, 0], q[:, 1] - foot[:, 1])
            better = dist < best_dist
            best_dist = np.where(better, dist, best_dist)
            best_seg = np.where(better, cand, best_seg)
            best_t = np.where(better, t, best_t)
        foot = self.points[best_seg] + best_t[:, None] * self._seg[best_seg]
        d = self._dir[best_seg]
        rel = q - foot
        offset = d[:, 0] * rel[:, 1] - d[:, 1] * rel[:, 0]
        station = self.stations[best_seg] + best_t * self._seg_len[best_seg]
        return Projection(station=station, offset=offset, segment=best_seg)

    def offset(self, distance: float) -> "Polyline":
        """沿顶点法向平移 distance（左正）得到的平行折线"""
        return Polyline(self.points + distance * self.normals, normals=self.normals)

    def resample(self, spacing: float) -> "Polyline":
        """按固定弧长间隔重采样，保留精确终点"""
        if spacing <= 0:
            raise PolylineError(f"重采样间隔必须为正，收到 {spacing}")
        s = np.arange(0.0, self.length, spacing)
        if len(s) > 1 and self.length - s[-1] <= 1e-9 * max(1.0, self.length):
            s[-1] = self.length
        else:
            s = np.append(s, self.length)
        return Polyline(self.point_at(s), normals=self.normal_at(s))
