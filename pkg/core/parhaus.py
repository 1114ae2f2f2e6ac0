"""
抛物度量与 Hausdorff 容度

本模块提供：
- dp_dist / dp_diam: 抛物度量 d_p((x,t);(y,s)) = max{|x-y|, |t-s|^{1/p}} 及直径
- hausdorff_content: s 维抛物 Hausdorff δ-容度的上界估计

覆盖由各向异性二进盒组成：空间边长 r、时间长度 r^p，格点锚定在
区域的空间下角与 t=0。每个尺度上先按节点确定被占用的盒（盒边界上的
节点归入朝区域中心一侧的盒，只依赖节点本身），再自底向上
把 2×…×2 的兄弟盒合并为父盒（当父盒的 diam^s 不超过子盒之和），
最后取尺度阶梯上的最小值。
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np
import pandas as pd
from scipy.spatial import ConvexHull
from scipy.spatial.distance import pdist

from .errors import ConfigurationError, ContractError, ResolutionError
from .stgrid import SetMask

logger = logging.getLogger(__name__)

# 超过该点数时用凸包顶点求空间直径
EXHAUSTIVE_LIMIT = 10000

# 节点落在盒边界上的判定容差（以盒边长为单位）
_ON_LINE = 1e-7


def dp_dist(z1: Sequence[float], z2: Sequence[float], p: float) -> float:
    """
    抛物距离 max{|x₁-x₂|, |t₁-t₂|^{1/p}}

    z 的最后一个分量为时间。
    """
    a = np.asarray(z1, dtype=float)
    b = np.asarray(z2, dtype=float)
    spatial = np.linalg.norm(a[..., :-1] - b[..., :-1], axis=-1)
    temporal = np.abs(a[..., -1] - b[..., -1]) ** (1.0 / p)
    result = np.maximum(spatial, temporal)
    return float(result) if result.ndim == 0 else result


def mask_points(mask: SetMask) -> np.ndarray:
    """掩码节点的时空坐标，形状 (m, n+1)"""
    grid = mask.grid
    levels, nodes = np.nonzero(mask.values)
    return np.column_stack([grid.space.coords[nodes], grid.times[levels]])


def _spatial_diameter(points: np.ndarray) -> float:
    points = np.unique(points, axis=0)
    if points.shape[0] < 2:
        return 0.0
    if points.shape[1] == 1:
        return float(points.max() - points.min())
    if points.shape[0] > EXHAUSTIVE_LIMIT:
        try:
            points = points[ConvexHull(points).vertices]
        except Exception as e:
            # 共线点集没有二维凸包
            logger.debug(f"convex hull skipped: {e}")
            return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    return float(pdist(points).max())


def dp_diam(E: Union[SetMask, np.ndarray], p: Optional[float] = None) -> float:
    """
    抛物直径 sup d_p(z, z')

    sup 与 max 可交换，直径等于 max{空间直径, (时间跨度)^{1/p}}。

    Args:
        E: SetMask 或时空点数组 (m, n+1)
        p: 指数（掩码默认取区域的 p）

    Raises:
        ContractError: 空集
    """
    if isinstance(E, SetMask):
        p = E.grid.domain.p if p is None else p
        points = mask_points(E)
    else:
        points = np.atleast_2d(np.asarray(E, dtype=float))
        if p is None:
            raise ConfigurationError("dp_diam on raw points needs an exponent p")
    if points.shape[0] == 0:
        raise ContractError("parabolic diameter of an empty set")
    span = float(points[:, -1].max() - points[:, -1].min())
    return max(_spatial_diameter(points[:, :-1]), span ** (1.0 / p))


@dataclass(frozen=True)
class CoverBox:
    """
    覆盖元

    属性:
        lower (Tuple[float, ...]): 空间下角
        side (float): 空间边长
        t_lower (float): 时间下端
        duration (float): 时间长度
        diameter (float): d_p 直径
        occupancy (int): 被该盒覆盖的节点数
    """
    lower: Tuple[float, ...]
    side: float
    t_lower: float
    duration: float
    diameter: float
    occupancy: int

    @property
    def center(self) -> Tuple[float, ...]:
        return tuple(x + 0.5 * self.side for x in self.lower) + (self.t_lower + 0.5 * self.duration,)

    @property
    def radius(self) -> float:
        return 0.5 * self.side

    @property
    def half_length(self) -> float:
        return 0.5 * self.duration

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        x, t = points[:, :-1], points[:, -1]
        lo = np.asarray(self.lower)
        inside = np.all((x >= lo - tol * self.side) & (x <= lo + self.side * (1 + tol)), axis=1)
        return inside & (t >= self.t_lower - tol * self.duration) & (t <= self.t_lower + self.duration * (1 + tol))

    def to_dict(self) -> dict:
        return {'center': list(self.center), 'radius': self.radius, 'half_length': self.half_length,
                'diameter': self.diameter, 'occupancy': self.occupancy}


@dataclass(frozen=True)
class CoverReport:
    """
    Hausdorff 容度报告

    属性:
        s (float): 维数
        delta (float): 覆盖元直径上界 δ
        p (float): 指数
        content (float): Σ diam^s 的最小值（真实容度的上界）
        scale (Optional[float]): 取得最小值的基础盒边长
        boxes (Tuple[CoverBox, ...]): 选中的覆盖，按占用数降序、中心字典序排列
        ladder (Tuple[Tuple[float, float], ...]): (r, 该尺度的 Σ diam^s)
    """
    s: float
    delta: float
    p: float
    content: float
    scale: Optional[float] = None
    boxes: Tuple[CoverBox, ...] = ()
    ladder: Tuple[Tuple[float, float], ...] = ()

    def to_dict(self) -> dict:
        return {
            's': self.s, 'delta': self.delta, 'p': self.p, 'content': self.content,
            'scale': self.scale, 'boxes': [box.to_dict() for box in self.boxes],
            'ladder': [{'r': r, 'value': value} for r, value in self.ladder],
        }

    def to_frame(self) -> pd.DataFrame:
        n = len(self.boxes[0].lower) if self.boxes else 0
        columns = [f'x{i}' for i in range(n)] + ['t', 'radius', 'half_length', 'diameter', 'occupancy']
        rows = [list(box.center) + [box.radius, box.half_length, box.diameter, box.occupancy]
                for box in self.boxes]
        return pd.DataFrame(rows, columns=columns)

    def to_csv(self, path: str, float_format: str = '%.10g'):
        self.to_frame().to_csv(path, index=False, float_format=float_format)


def _box_indices(U: np.ndarray, middle: np.ndarray) -> np.ndarray:
    """
    每个节点所属的盒编号

    盒边界上的节点归入朝区域中心一侧的相邻盒；恰在中心面上的归入
    编号较小的盒。编号只取决于节点本身，因此占用集合随 E 单调。
    """
    nearest = np.rint(U)
    online = np.abs(U - nearest) < _ON_LINE
    inward = np.where(nearest < middle - _ON_LINE, nearest, nearest - 1)
    index = np.where(online, np.maximum(inward, 0), np.floor(U))
    return index.astype(int)


def _occupancy(U: np.ndarray, middle: np.ndarray) -> Dict[Tuple[int, ...], int]:
    """闭盒占用：盒编号 → 节点数"""
    keys, counts = np.unique(_box_indices(U, middle), axis=0, return_counts=True)
    return {tuple(int(k) for k in key): int(count) for key, count in zip(keys, counts)}


def _cover_at_scale(points: np.ndarray, origin: np.ndarray, middle: np.ndarray,
                    r: float, p: float, s: float, delta: float) -> Tuple[float, List[CoverBox]]:
    """单个尺度上的覆盖与自底向上合并"""
    n = points.shape[1] - 1
    lengths = np.append(np.full(n, r), r ** p)
    occupied = _occupancy((points - origin) / lengths, (middle - origin) / lengths)
    root_n = math.sqrt(n)

    # 每个键：(Σ diam^s, 盒列表[(层级, 键, 占用)], 占用)
    level = 0
    blocks = {key: ((root_n * r) ** s, [(0, key, count)], count) for key, count in occupied.items()}
    while len(blocks) > 1:
        parent_diam = root_n * r * 2 ** (level + 1)
        if parent_diam >= delta:
            break
        level += 1
        parents: Dict[Tuple[int, ...], list] = {}
        for key, block in blocks.items():
            parents.setdefault(tuple(k // 2 for k in key), []).append(block)
        merged = {}
        for key, children in parents.items():
            total = sum(child[0] for child in children)
            boxes = [box for child in children for box in child[1]]
            count = sum(child[2] for child in children)
            if parent_diam ** s <= total:
                merged[key] = (parent_diam ** s, [(level, key, count)], count)
            else:
                merged[key] = (total, boxes, count)
        blocks = merged

    cover = []
    for _, boxes, _ in blocks.values():
        for lv, key, count in boxes:
            scale = 2 ** lv
            lower = origin[:-1] + np.asarray(key[:-1]) * scale * r
            cover.append(CoverBox(tuple(float(x) for x in lower), scale * r,
                                  float(origin[-1] + key[-1] * scale * r ** p), scale * r ** p,
                                  root_n * scale * r, count))
    value = float(sum(block[0] for block in blocks.values()))
    return value, cover


def resolvable_scale(mask: SetMask, p: float) -> float:
    """网格可分辨的最小 d_p 尺度 max{h, Δt^{1/p}}"""
    grid = mask.grid
    return max(grid.h, grid.dt ** (1.0 / p))


def hausdorff_content(E: SetMask, s: float, delta: float,
                      p: Optional[float] = None) -> CoverReport:
    """
    抛物 Hausdorff δ-容度的上界

    尺度阶梯 r_j = D·2^{-j}，D = max{区域空间边长, T^{1/p}}；
    允许的尺度满足 √n·r < δ 且 r ≥ max{h, Δt^{1/p}}。

    Args:
        E: 紧集掩码
        s: 维数（> 0）
        delta: 覆盖元直径上界
        p: 指数（默认取区域的 p）

    Returns:
        CoverReport：各尺度的 Σ diam^s 及取得最小值的覆盖

    Raises:
        ConfigurationError: s ≤ 0
        ResolutionError: δ 小于网格可分辨的尺度
    """
    grid = E.grid
    domain = grid.domain
    p = domain.p if p is None else float(p)
    if not s > 0:
        raise ConfigurationError(f"dimension s must be positive, got {s}")
    if E.is_empty:
        return CoverReport(float(s), float(delta), p, 0.0)

    n = domain.n
    floor = resolvable_scale(E, p)
    if math.sqrt(n) * floor >= delta:
        raise ResolutionError(f"delta={delta} is below the resolvable scale {math.sqrt(n) * floor:.4g}")
    top = max(max(domain.extents), domain.T ** (1.0 / p))
    scales = []
    r = top
    while r >= floor * (1 - 1e-12):
        if math.sqrt(n) * r < delta:
            scales.append(r)
        r *= 0.5
    if not scales:
        raise ResolutionError(f"no dyadic scale in [{floor:.4g}, {delta / math.sqrt(n):.4g})")

    points = mask_points(E)
    origin = np.append(np.asarray(domain.lower, dtype=float), 0.0)
    middle = np.append(domain.center, 0.5 * domain.T)
    ladder = []
    best = None
    for r in scales:
        value, cover = _cover_at_scale(points, origin, middle, r, p, s, delta)
        ladder.append((r, value))
        logger.debug(f"content scale r={r:.4g}: {len(cover)} boxes, sum={value:.6g}")
        if best is None or value < best[0]:
            best = (value, r, cover)
    value, scale, cover = best
    cover.sort(key=lambda box: (-box.occupancy,) + box.center)
    return CoverReport(float(s), float(delta), p, value, scale, tuple(cover), tuple(ladder))
