"""
时空离散化

本模块提供 Ω_T = Ω × (0,T) 上的离散化基础设施：
- Domain / SpatialGrid / SpaceTimeGrid: 区域与均匀张量积网格
- ScalarField / SpatialField / FluxField / SetMask: 网格上的场与集合
- grad / div: 离散梯度与散度（关于离散内积严格共轭）
- lp_norm_grad / sup_t_l2: W 范数中的各项
- ShapeSpec / rasterize: 柱体、切片、图像集及其并集的栅格化

离散格式：
    空间为 P1 单元（1D 区间；2D 正方形沿对角线剖分为两个直角三角形），
    每个单纯形一个梯度样本，通量与梯度同位。
    节点权重为梯形求积（集中质量），散度 div F = -W^{-1} G^T (a F)，
    因此 <grad v, F> + <v, div F> = 0 对任意 v、F 精确成立。
    时间上梯度项与通量项按隐式 Euler 记账：区间 k=1..M 取第 k 层的值。
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
import pandas as pd
from scipy import ndimage, sparse

from .errors import ConfigurationError, ContractError, GeometryError

logger = logging.getLogger(__name__)

# 节点落在闭集边界上的判定容差（相对 h）
_SNAP = 1e-9


# ==================== 区域 ====================

@dataclass(frozen=True)
class Domain:
    """
    时空区域 Ω_T

    属性:
        n (int): 空间维数，1 或 2
        lower (Tuple[float, ...]): 包围盒下角
        upper (Tuple[float, ...]): 包围盒上角
        T (float): 终止时间
        p (float): 指数 p ∈ (1,∞)
        shape (str): 'box' 或 'ball'；球区域取包围盒的内切球（要求包围盒为立方体）
    """
    n: int
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    T: float
    p: float = 2.0
    shape: str = 'box'

    def __post_init__(self):
        object.__setattr__(self, 'lower', tuple(float(a) for a in self.lower))
        object.__setattr__(self, 'upper', tuple(float(b) for b in self.upper))
        if self.n not in (1, 2):
            raise ConfigurationError(f"dimension must be 1 or 2, got {self.n}")
        if len(self.lower) != self.n or len(self.upper) != self.n:
            raise ConfigurationError("box corners must have one entry per dimension")
        if any(not (b - a > 0) for a, b in zip(self.lower, self.upper)):
            raise ConfigurationError(f"non-positive extent: {self.lower} .. {self.upper}")
        if not (math.isfinite(self.T) and self.T > 0):
            raise ConfigurationError(f"final time must be finite and positive, got {self.T}")
        if not (self.p > 1 and math.isfinite(self.p)):
            raise ConfigurationError(f"exponent must satisfy 1 < p < inf, got {self.p}")
        if self.shape not in ('box', 'ball'):
            raise ConfigurationError(f"unknown domain shape '{self.shape}'")
        if self.shape == 'ball' and len(set(np.round(self.extents, 12))) != 1:
            raise ConfigurationError("a ball domain needs a cubic bounding box")

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float], T: float,
            p: float = 2.0) -> 'Domain':
        """盒子区域 Ω = Π (lower_i, upper_i)"""
        return cls(n=len(lower), lower=tuple(lower), upper=tuple(upper), T=T, p=p)

    @classmethod
    def ball(cls, center: Sequence[float], radius: float, T: float,
             p: float = 2.0) -> 'Domain':
        """球区域 Ω = B_R(center)"""
        if not radius > 0:
            raise ConfigurationError(f"ball radius must be positive, got {radius}")
        center = tuple(float(c) for c in center)
        return cls(n=len(center), lower=tuple(c - radius for c in center),
                   upper=tuple(c + radius for c in center), T=T, p=p, shape='ball')

    @property
    def extents(self) -> Tuple[float, ...]:
        """各方向长度"""
        return tuple(b - a for a, b in zip(self.lower, self.upper))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lower) + np.asarray(self.upper))

    @property
    def radius(self) -> float:
        """球区域的半径（盒子区域返回内切球半径）"""
        return 0.5 * min(self.extents)

    def with_time(self, T: float) -> 'Domain':
        """同一空间区域、不同终止时间"""
        return Domain(self.n, self.lower, self.upper, T, self.p, self.shape)

    def with_exponent(self, p: float) -> 'Domain':
        return Domain(self.n, self.lower, self.upper, self.T, p, self.shape)

    def boundary_distance(self, points: np.ndarray) -> np.ndarray:
        """
        到 ∂Ω 的距离（区域外为 0）

        Args:
            points: 形状 (N, n) 的坐标

        Returns:
            形状 (N,) 的距离
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if self.shape == 'ball':
            r = np.linalg.norm(points - self.center, axis=1)
            return np.maximum(self.radius - r, 0.0)
        lo = points - np.asarray(self.lower)
        hi = np.asarray(self.upper) - points
        return np.maximum(np.minimum(lo, hi).min(axis=1), 0.0)

    def to_dict(self) -> dict:
        return {'n': self.n, 'lower': list(self.lower), 'upper': list(self.upper),
                'T': self.T, 'p': self.p, 'shape': self.shape}


# ==================== 网格 ====================

class SpatialGrid:
    """
    空间网格

    均匀张量积节点覆盖 Ω 的包围盒；free 标记 Ω 内部节点，
    零迹场在其余节点上取 0。

    属性:
        domain (Domain): 所属区域（只使用空间部分）
        nodes_per_axis (int): 每个方向的节点数（含边界）
        h (float): 网格步长
        shape (Tuple[int, ...]): 节点阵列形状
        coords (np.ndarray): 节点坐标，形状 (N, n)
        free (np.ndarray): 内部节点布尔掩码，形状 (N,)
        node_weights (np.ndarray): 梯形求积权重，形状 (N,)
        simplices (np.ndarray): 单纯形的顶点编号，形状 (nT, n+1)
        simplex_volume (float): 单纯形体积 a
        gradient (sparse.csr_matrix): 梯度算子，形状 (nT*n, N)，行序为 (单纯形, 分量)
    """

    def __init__(self, domain: Domain, nodes_per_axis: int):
        extents = domain.extents
        self.domain = domain
        self.nodes_per_axis = int(nodes_per_axis)
        # 各向同性步长：按最短边取 h，较长边必须是 h 的整数倍
        self.h = min(extents) / (self.nodes_per_axis - 1)
        cells = [L / self.h for L in extents]
        if any(abs(c - round(c)) > 1e-8 * c for c in cells):
            raise ConfigurationError(f"extents {extents} are not commensurate with h={self.h}")
        counts = tuple(int(round(c)) + 1 for c in cells)
        self.shape = counts
        self.axes = tuple(np.linspace(a, b, c) for a, b, c in zip(domain.lower, domain.upper, counts))
        mesh = np.meshgrid(*self.axes, indexing='ij')
        self.coords = np.stack([m.ravel() for m in mesh], axis=1)
        self.size = self.coords.shape[0]
        self.n = domain.n

        on_box_edge = np.zeros(counts, dtype=bool)
        weights = np.ones(counts)
        for axis, c in enumerate(counts):
            index = [slice(None)] * domain.n
            for end in (0, c - 1):
                index[axis] = end
                on_box_edge[tuple(index)] = True
                weights[tuple(index)] *= 0.5
        free = ~on_box_edge.ravel()
        if domain.shape == 'ball':
            r = np.linalg.norm(self.coords - domain.center, axis=1)
            free &= r < domain.radius - _SNAP * self.h
        self.free = free
        self.node_weights = weights.ravel() * self.h ** domain.n

        self.simplices, self.gradient = self._build_gradient()
        self.simplex_volume = self.h ** domain.n / (1 if domain.n == 1 else 2)
        self.num_simplices = self.simplices.shape[0]
        for array in (self.coords, self.free, self.node_weights, self.simplices):
            array.setflags(write=False)

    def _build_gradient(self) -> Tuple[np.ndarray, sparse.csr_matrix]:
        """组装 P1 梯度算子"""
        h = self.h
        index = np.arange(self.size).reshape(self.shape)
        if self.n == 1:
            left, right = index[:-1], index[1:]
            simplices = np.stack([left, right], axis=1)
            nT = simplices.shape[0]
            rows = np.repeat(np.arange(nT), 2)
            cols = simplices.ravel()
            vals = np.tile([-1.0 / h, 1.0 / h], nT)
            G = sparse.csr_matrix((vals, (rows, cols)), shape=(nT, self.size))
            return simplices, G

        n00 = index[:-1, :-1].ravel()
        n10 = index[1:, :-1].ravel()
        n01 = index[:-1, 1:].ravel()
        n11 = index[1:, 1:].ravel()
        cells = n00.size
        # 下三角 (n00, n10, n01)，上三角 (n11, n01, n10)
        lower = np.stack([n00, n10, n01], axis=1)
        upper = np.stack([n11, n01, n10], axis=1)
        simplices = np.empty((2 * cells, 3), dtype=int)
        simplices[0::2] = lower
        simplices[1::2] = upper
        s_lower = 2 * np.arange(cells)
        s_upper = s_lower + 1
        rows, cols, vals = [], [], []

        def put(s, comp, a, b):
            # 行 (s, comp) 上的差商 (v_a - v_b)/h
            rows.extend([2 * s + comp, 2 * s + comp])
            cols.extend([a, b])
            vals.extend([np.full(a.size, 1.0 / h), np.full(a.size, -1.0 / h)])

        put(s_lower, 0, n10, n00)
        put(s_lower, 1, n01, n00)
        put(s_upper, 0, n11, n01)
        put(s_upper, 1, n11, n10)
        G = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(2 * 2 * cells, self.size))
        return simplices, G

    # ---------- 空间算子 ----------

    def grad(self, values: np.ndarray) -> np.ndarray:
        """节点值 (..., N) → 单纯形梯度 (..., nT, n)"""
        values = np.asarray(values, dtype=float)
        flat = values.reshape(-1, self.size)
        g = (self.gradient @ flat.T).T
        return g.reshape(values.shape[:-1] + (self.num_simplices, self.n))

    def div(self, flux: np.ndarray) -> np.ndarray:
        """单纯形通量 (..., nT, n) → 节点散度 (..., N)，div = -W^{-1} G^T (a F)"""
        flux = np.asarray(flux, dtype=float)
        flat = flux.reshape(-1, self.num_simplices * self.n)
        d = -(self.gradient.T @ (self.simplex_volume * flat.T)).T / self.node_weights
        return d.reshape(flux.shape[:-2] + (self.size,))

    def integrate_cells(self, density: np.ndarray) -> np.ndarray:
        """单纯形上的分片常数密度积分，沿最后一维求和"""
        return self.simplex_volume * np.asarray(density).sum(axis=-1)

    def integrate_nodes(self, values: np.ndarray) -> np.ndarray:
        """节点值的梯形积分，沿最后一维求和"""
        return np.asarray(values) @ self.node_weights

    def boundary_distance(self) -> np.ndarray:
        """各节点到 ∂Ω 的距离"""
        return self.domain.boundary_distance(self.coords)

    def ball(self, center: Sequence[float], radius: float) -> np.ndarray:
        """闭球 B̄_ρ(x₀) 内的节点掩码"""
        r = np.linalg.norm(self.coords - np.asarray(center, dtype=float), axis=1)
        return r <= radius + _SNAP * self.h

    def to_dict(self) -> dict:
        return {'nodes_per_axis': self.nodes_per_axis, 'shape': list(self.shape), 'h': self.h}


class SpaceTimeGrid:
    """
    时空网格

    属性:
        domain (Domain): 时空区域
        space (SpatialGrid): 空间网格
        time_steps (int): 时间步数 M
        dt (float): 时间步长 Δt = T/M
        times (np.ndarray): 时间层 t_0=0, ..., t_M=T
        time_weights (np.ndarray): 梯度项的时间权重 [0, Δt, ..., Δt]
    """

    def __init__(self, domain: Domain, nodes_per_axis: int, time_steps: int,
                 space: Optional[SpatialGrid] = None):
        self.domain = domain
        # 只改时间长度时复用空间网格
        self.space = space if space is not None else SpatialGrid(domain, nodes_per_axis)
        self.time_steps = int(time_steps)
        self.dt = domain.T / self.time_steps
        self.times = np.linspace(0.0, domain.T, self.time_steps + 1)
        self.time_weights = np.full(self.time_steps + 1, self.dt)
        self.time_weights[0] = 0.0
        self.times.setflags(write=False)
        self.time_weights.setflags(write=False)

    @property
    def h(self) -> float:
        return self.space.h

    @property
    def levels(self) -> int:
        """时间层数 M+1"""
        return self.time_steps + 1

    @property
    def shape(self) -> Tuple[int, int]:
        """标量场数组形状 (M+1, N)"""
        return (self.levels, self.space.size)

    @property
    def lateral_boundary(self) -> np.ndarray:
        """侧边界 S_T 的节点掩码，形状 (M+1, N)"""
        return np.broadcast_to(~self.space.free, self.shape)

    def nearest_level(self, t: float) -> int:
        """最近时间层（距离相同时取较早的层）"""
        return int(np.clip(np.floor(t / self.dt + 0.5 - _SNAP), 0, self.time_steps))

    def with_final_time(self, T: float) -> 'SpaceTimeGrid':
        """保持 Δt 不变、延长到新的终止时间"""
        steps = T / self.dt
        if abs(steps - round(steps)) > 1e-8 * max(1.0, steps):
            raise ConfigurationError(f"T={T} is not a multiple of dt={self.dt}")
        return SpaceTimeGrid(self.domain.with_time(T), self.space.nodes_per_axis, int(round(steps)),
                             space=self.space)

    def to_dict(self) -> dict:
        return {'domain': self.domain.to_dict(), **self.space.to_dict(),
                'time_steps': self.time_steps, 'dt': self.dt}


def build_grid(domain: Domain, nodes_per_axis: int, time_steps: int) -> SpaceTimeGrid:
    """
    构建均匀时空网格

    Args:
        domain: 时空区域
        nodes_per_axis: 每个空间方向的节点数（含边界，≥ 8）
        time_steps: 时间步数（≥ 4）

    Returns:
        覆盖 Ω̄×[0,T] 的 SpaceTimeGrid

    Raises:
        ConfigurationError: 节点数或步数不足
    """
    if nodes_per_axis < 8:
        raise ConfigurationError(f"nodes_per_axis must be >= 8, got {nodes_per_axis}")
    if time_steps < 4:
        raise ConfigurationError(f"time_steps must be >= 4, got {time_steps}")
    grid = SpaceTimeGrid(domain, nodes_per_axis, time_steps)
    logger.debug(f"Built grid: shape={grid.space.shape}, h={grid.h:.4g}, dt={grid.dt:.4g}")
    return grid


def refine(grid: SpaceTimeGrid) -> SpaceTimeGrid:
    """h 与 Δt 同时减半"""
    return build_grid(grid.domain, 2 * grid.space.nodes_per_axis - 1, 2 * grid.time_steps)


# ==================== 场 ====================

def _frozen(values: np.ndarray, shape: Tuple[int, ...], what: str) -> np.ndarray:
    array = np.array(values, dtype=float)
    if array.shape != tuple(shape):
        raise ContractError(f"{what} has shape {array.shape}, grid expects {tuple(shape)}")
    if not np.all(np.isfinite(array)):
        raise ContractError(f"{what} contains non-finite values")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SpatialField:
    """
    空间场（冻结时间的节点值）

    属性:
        space (SpatialGrid): 空间网格
        values (np.ndarray): 节点值，形状 (N,)
    """
    space: SpatialGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen(self.values, (self.space.size,), 'SpatialField'))

    @classmethod
    def from_function(cls, space: SpatialGrid, fn: Callable[[np.ndarray], np.ndarray]) -> 'SpatialField':
        return cls(space, np.broadcast_to(fn(space.coords), (space.size,)))

    @property
    def has_zero_trace(self) -> bool:
        return bool(np.all(self.values[~self.space.free] == 0.0))

    def with_zero_trace(self) -> 'SpatialField':
        return SpatialField(self.space, np.where(self.space.free, self.values, 0.0))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """
    时空标量场

    属性:
        grid (SpaceTimeGrid): 时空网格
        values (np.ndarray): 每个 (时间层, 节点) 的值，形状 (M+1, N)
    """
    grid: SpaceTimeGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen(self.values, self.grid.shape, 'ScalarField'))

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> 'ScalarField':
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def from_function(cls, grid: SpaceTimeGrid,
                      fn: Callable[[np.ndarray, float], np.ndarray]) -> 'ScalarField':
        """
        按函数采样

        Args:
            fn: fn(x, t)，x 形状 (N, n)，返回形状 (N,) 或可广播的值
        """
        values = np.empty(grid.shape)
        for k, t in enumerate(grid.times):
            values[k] = np.broadcast_to(fn(grid.space.coords, float(t)), (grid.space.size,))
        return cls(grid, values)

    @classmethod
    def from_levels(cls, grid: SpaceTimeGrid, levels: Sequence[np.ndarray]) -> 'ScalarField':
        return cls(grid, np.stack([np.asarray(level, dtype=float) for level in levels]))

    def level(self, k: int) -> SpatialField:
        return SpatialField(self.grid.space, self.values[k])

    @property
    def has_zero_trace(self) -> bool:
        return bool(np.all(self.values[:, ~self.grid.space.free] == 0.0))

    def with_zero_trace(self) -> 'ScalarField':
        return ScalarField(self.grid, np.where(self.grid.space.free, self.values, 0.0))

    def scaled(self, factor: float) -> 'ScalarField':
        return ScalarField(self.grid, factor * self.values)

    def __add__(self, other: 'ScalarField') -> 'ScalarField':
        _same_grid(self.grid, other.grid)
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other: 'ScalarField') -> 'ScalarField':
        _same_grid(self.grid, other.grid)
        return ScalarField(self.grid, self.values - other.values)

    def time_derivative(self) -> np.ndarray:
        """后向差商 (v^k - v^{k-1})/Δt，k=1..M，形状 (M, N)"""
        return np.diff(self.values, axis=0) / self.grid.dt

    def to_frame(self) -> pd.DataFrame:
        """节点坐标 + 时间 + 值"""
        grid = self.grid
        columns = {}
        for axis in range(grid.space.n):
            columns[f'x{axis}'] = np.tile(grid.space.coords[:, axis], grid.levels)
        columns['t'] = np.repeat(grid.times, grid.space.size)
        columns['value'] = self.values.ravel()
        return pd.DataFrame(columns)

    def to_csv(self, path: str, float_format: str = '%.10g'):
        """导出 CSV（列：x0[,x1],t,value）"""
        self.to_frame().to_csv(path, index=False, float_format=float_format)


@dataclass(frozen=True, eq=False)
class FluxField:
    """
    时空通量场（单纯形上的向量，与梯度同位）

    属性:
        grid (SpaceTimeGrid): 时空网格
        values (np.ndarray): 形状 (M+1, nT, n)；第 0 层不参与耦合约束
    """
    grid: SpaceTimeGrid
    values: np.ndarray

    def __post_init__(self):
        shape = (self.grid.levels, self.grid.space.num_simplices, self.grid.space.n)
        object.__setattr__(self, 'values', _frozen(self.values, shape, 'FluxField'))

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> 'FluxField':
        return cls(grid, np.zeros((grid.levels, grid.space.num_simplices, grid.space.n)))

    def power_integral(self, q: float) -> float:
        """∬|F|^q（隐式 Euler 时间权重）"""
        mags = np.linalg.norm(self.values, axis=-1)
        return float(self.grid.time_weights @ self.grid.space.integrate_cells(mags ** q))


def _same_grid(a: SpaceTimeGrid, b: SpaceTimeGrid):
    if a is not b and (a.shape != b.shape or a.domain != b.domain):
        raise ContractError("fields live on different grids")


# ==================== 微分算子与范数 ====================

def grad(v: ScalarField) -> np.ndarray:
    """
    逐单纯形的空间梯度

    Returns:
        形状 (M+1, nT, n)；仿射函数在内部单纯形上精确
    """
    return v.grid.space.grad(v.values)


def div(F: FluxField) -> np.ndarray:
    """
    通量的离散散度

    Returns:
        形状 (M+1, N)；满足 <grad v, F> = -<v, div F>
    """
    return F.grid.space.div(F.values)


def inner_cells(grid: SpaceTimeGrid, a: np.ndarray, b: np.ndarray) -> float:
    """单纯形量的离散内积 Σ_k w_k Σ_T a_T (a·b)"""
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(grid.time_weights @ grid.space.integrate_cells((a * b).sum(axis=-1)))


def inner_nodes(grid: SpaceTimeGrid, u: np.ndarray, v: np.ndarray) -> float:
    """节点量的离散内积 Σ_k w_k Σ_i W_i u_i v_i"""
    if u.shape != v.shape:
        raise ContractError(f"shape mismatch {u.shape} vs {v.shape}")
    return float(grid.time_weights @ grid.space.integrate_nodes(u * v))


def lp_norm_grad(v: ScalarField, q: float) -> float:
    """
    ∬|∇v|^q dx dt

    Raises:
        ConfigurationError: q ≤ 1
    """
    if not q > 1:
        raise ConfigurationError(f"exponent must exceed 1, got {q}")
    mags = np.linalg.norm(grad(v), axis=-1)
    return float(v.grid.time_weights @ v.grid.space.integrate_cells(mags ** q))


def l2_per_level(v: ScalarField) -> np.ndarray:
    """每个时间层的 ∫v² dx"""
    return v.grid.space.integrate_nodes(v.values ** 2)


def sup_t_l2(v: ScalarField) -> float:
    """max_k ∫v(·,t_k)² dx"""
    return float(l2_per_level(v).max())


# ==================== 集合 ====================

def _cone(r: np.ndarray) -> np.ndarray:
    return 1.0 - r


def _dome(r: np.ndarray) -> np.ndarray:
    return 1.0 - r ** 2


HEIGHT_PROFILES: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    'cone': _cone,
    'dome': _dome,
}


@dataclass(frozen=True)
class ShapeSpec:
    """
    集合描述

    kind 取值：
        'cylinder': Q̄_{ρ,τ}(z₀) = B̄_ρ(x₀) × [t₀-τ, t₀]
        'slice':    B̄_ρ(x₀) × {t₀}
        'graph':    {(x, h(x)) : x ∈ B̄_ρ(x₀)}，h = t₀ + τ·profile(|x-x₀|/ρ)
        'union':    parts 的并集

    属性:
        kind (str): 变体标签
        center (Tuple[float, ...]): x₀
        t0 (float): 时间锚点 t₀
        radius (float): ρ
        duration (float): τ（柱体的时长、图像集的高度）
        profile (str): 图像集的高度剖面名（'cone' 或 'dome'）
        parts (Tuple[ShapeSpec, ...]): 并集的成员
    """
    kind: str
    center: Tuple[float, ...] = ()
    t0: float = 0.0
    radius: float = 0.0
    duration: float = 0.0
    profile: str = 'cone'
    parts: Tuple['ShapeSpec', ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'center', tuple(float(c) for c in self.center))
        object.__setattr__(self, 'parts', tuple(self.parts))
        if self.kind not in ('cylinder', 'slice', 'graph', 'union'):
            raise ConfigurationError(f"unknown shape kind '{self.kind}'")
        if self.kind == 'union':
            return
        if not self.radius > 0:
            raise ConfigurationError(f"radius must be positive, got {self.radius}")
        if self.duration < 0:
            raise ConfigurationError(f"duration must be non-negative, got {self.duration}")
        if self.kind == 'graph' and self.profile not in HEIGHT_PROFILES:
            raise ConfigurationError(f"unknown height profile '{self.profile}'")

    @classmethod
    def cylinder(cls, center: Sequence[float], t0: float, radius: float, duration: float) -> 'ShapeSpec':
        return cls('cylinder', tuple(center), t0, radius, duration)

    @classmethod
    def slice(cls, center: Sequence[float], t0: float, radius: float) -> 'ShapeSpec':
        return cls('slice', tuple(center), t0, radius, 0.0)

    @classmethod
    def graph(cls, center: Sequence[float], t0: float, radius: float, duration: float,
              profile: str = 'cone') -> 'ShapeSpec':
        return cls('graph', tuple(center), t0, radius, duration, profile)

    @classmethod
    def union(cls, parts: Sequence['ShapeSpec']) -> 'ShapeSpec':
        return cls('union', parts=tuple(parts))

    @property
    def cylinders(self) -> List['ShapeSpec']:
        """展开并集后的成员列表"""
        if self.kind == 'union':
            return [leaf for part in self.parts for leaf in part.cylinders]
        return [self]

    def to_dict(self) -> dict:
        if self.kind == 'union':
            return {'kind': 'union', 'parts': [part.to_dict() for part in self.parts]}
        data = {'kind': self.kind, 'center': list(self.center), 't0': self.t0,
                'radius': self.radius, 'duration': self.duration}
        if self.kind == 'graph':
            data['profile'] = self.profile
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ShapeSpec':
        data = dict(data)
        kind = data.pop('kind', None)
        if kind == 'union':
            return cls.union([cls.from_dict(part) for part in data.get('parts', [])])
        try:
            return cls(kind=kind, center=tuple(data['center']), t0=float(data['t0']),
                       radius=float(data['radius']), duration=float(data.get('duration', 0.0)),
                       profile=data.get('profile', 'cone'))
        except KeyError as e:
            raise ConfigurationError(f"shape spec is missing key {e}") from e


def parabolic_cylinder(center: Sequence[float], t0: float, r: float, p: float) -> ShapeSpec:
    """d_p 球 B_r(x₀) × (t₀-r^p, t₀+r^p) 对应的柱体"""
    return ShapeSpec.cylinder(center, t0 + r ** p, r, 2.0 * r ** p)


@dataclass(frozen=True, eq=False)
class SetMask:
    """
    紧集的节点指示

    属性:
        grid (SpaceTimeGrid): 时空网格
        values (np.ndarray): 布尔数组，形状 (M+1, N)
        provenance (Optional[ShapeSpec]): 来源描述，None 表示原始掩码
        snapped (Tuple[Tuple[float, float], ...]): (请求时刻, 实际时间层时刻) 的吸附记录
        touches_initial (bool): 是否含 t=0 层
        touches_final (bool): 是否含 t=T 层
    """
    grid: SpaceTimeGrid
    values: np.ndarray
    provenance: Optional[ShapeSpec] = None
    snapped: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        array = np.array(self.values, dtype=bool)
        if array.shape != self.grid.shape:
            raise ContractError(f"mask has shape {array.shape}, grid expects {self.grid.shape}")
        array.setflags(write=False)
        object.__setattr__(self, 'values', array)

    @classmethod
    def empty(cls, grid: SpaceTimeGrid) -> 'SetMask':
        return cls(grid, np.zeros(grid.shape, dtype=bool))

    @property
    def is_empty(self) -> bool:
        return not bool(self.values.any())

    @property
    def count(self) -> int:
        return int(self.values.sum())

    @property
    def touches_initial(self) -> bool:
        return bool(self.values[0].any())

    @property
    def touches_final(self) -> bool:
        return bool(self.values[-1].any())

    @property
    def active_levels(self) -> np.ndarray:
        return np.flatnonzero(self.values.any(axis=1))

    @property
    def first_level(self) -> Optional[int]:
        levels = self.active_levels
        return int(levels[0]) if levels.size else None

    def __or__(self, other: 'SetMask') -> 'SetMask':
        _same_grid(self.grid, other.grid)
        parts = [m.provenance for m in (self, other)]
        spec = ShapeSpec.union(parts) if all(parts) else None
        return SetMask(self.grid, self.values | other.values, spec, self.snapped + other.snapped)

    def issubset(self, other: 'SetMask') -> bool:
        return bool(np.all(~self.values | other.values))

    def describe(self) -> dict:
        if self.provenance is not None:
            return self.provenance.to_dict()
        return {'kind': 'raw', 'count': self.count}


def _check_ball_inside(domain: Domain, center: np.ndarray, radius: float, h: float):
    margin = float(domain.boundary_distance(center[None, :])[0])
    if margin < radius + h * (1 - 1e-6):
        raise GeometryError(
            f"ball of radius {radius} at {tuple(center)} is closer than h={h:.4g} to the lateral boundary")


def _check_time_window(domain: Domain, start: float, stop: float, dt: float):
    if not (0.0 < stop <= domain.T + _SNAP * dt):
        raise GeometryError(f"anchor time {stop} outside (0, {domain.T}]")
    if start < -_SNAP * dt:
        raise GeometryError(f"set starts at t={start} < 0")


def rasterize(shape: ShapeSpec, grid: SpaceTimeGrid) -> SetMask:
    """
    栅格化闭集

    节点落在集合边界上视为在集合内；时间瞬间吸附到最近的时间层，
    并记录在 snapped 中。τ=0 的柱体即为切片。

    Raises:
        GeometryError: 集合超出 Ω_T 或与侧边界距离小于 h
    """
    if shape.kind == 'union':
        values = np.zeros(grid.shape, dtype=bool)
        snapped: Tuple[Tuple[float, float], ...] = ()
        for part in shape.parts:
            mask = rasterize(part, grid)
            values |= mask.values
            snapped += mask.snapped
        return SetMask(grid, values, shape, snapped)

    domain = grid.domain
    space = grid.space
    center = np.asarray(shape.center, dtype=float)
    if center.size != domain.n:
        raise ConfigurationError(f"center {shape.center} does not match dimension {domain.n}")
    _check_ball_inside(domain, center, shape.radius, space.h)
    ball = space.ball(center, shape.radius)
    values = np.zeros(grid.shape, dtype=bool)
    snapped = []

    if shape.kind in ('cylinder', 'slice'):
        start, stop = shape.t0 - shape.duration, shape.t0
        _check_time_window(domain, start, stop, grid.dt)
        tol = _SNAP * grid.dt
        levels = np.flatnonzero((grid.times >= start - tol) & (grid.times <= stop + tol))
        if levels.size == 0:
            k = grid.nearest_level(stop)
            levels = np.array([k])
            snapped.append((stop, float(grid.times[k])))
        values[np.ix_(levels, np.flatnonzero(ball))] = True
    else:
        _check_time_window(domain, shape.t0, shape.t0 + shape.duration, grid.dt)
        nodes = np.flatnonzero(ball)
        r = np.linalg.norm(space.coords[nodes] - center, axis=1) / shape.radius
        heights = shape.t0 + shape.duration * HEIGHT_PROFILES[shape.profile](np.minimum(r, 1.0))
        levels = np.array([grid.nearest_level(t) for t in heights], dtype=int)
        values[levels, nodes] = True

    return SetMask(grid, values, shape, tuple(snapped))


def raw_mask(grid: SpaceTimeGrid, values: np.ndarray) -> SetMask:
    """
    原始掩码（来源为 raw），检查与侧边界的距离

    Raises:
        GeometryError: 有节点距 ∂Ω 小于 h
    """
    mask = SetMask(grid, values)
    if not mask.is_empty:
        distance = grid.space.boundary_distance()
        touched = mask.values.any(axis=0)
        if np.any(distance[touched] < grid.h * (1 - 1e-6)):
            raise GeometryError("raw mask reaches within h of the lateral boundary")
    return mask


def _structure(ndim: int, axes: str, full: bool = False) -> np.ndarray:
    # full=True 为 Chebyshev 邻域（含对角），否则为面邻域
    connectivity = ndim if full else 1
    structure = ndimage.generate_binary_structure(ndim, connectivity)
    if axes == 'space':
        structure[0] = False
        structure[2] = False
        structure[1, ...] = ndimage.generate_binary_structure(ndim - 1, min(connectivity, ndim - 1))
    elif axes != 'spacetime':
        raise ConfigurationError(f"axes must be 'space' or 'spacetime', got '{axes}'")
    return structure


def erode(mask: SetMask, cells: int = 1, axes: str = 'spacetime') -> SetMask:
    """按网格单元收缩集合（递减紧集极限的离散对应）"""
    grid = mask.grid
    array = mask.values.reshape((grid.levels,) + grid.space.shape)
    structure = _structure(array.ndim, axes)
    out = ndimage.binary_erosion(array, structure=structure, iterations=cells, border_value=0)
    return SetMask(grid, out.reshape(grid.shape))


def dilate(mask: SetMask, cells: int = 1, axes: str = 'spacetime', full: bool = False) -> SetMask:
    """按网格单元膨胀集合，结果限制在 Ω 内部节点"""
    grid = mask.grid
    if mask.is_empty:
        return mask
    array = mask.values.reshape((grid.levels,) + grid.space.shape)
    structure = _structure(array.ndim, axes, full)
    out = ndimage.binary_dilation(array, structure=structure, iterations=cells)
    return SetMask(grid, out.reshape(grid.shape) & grid.space.free)


def measure(mask: SetMask) -> float:
    """时空 Lebesgue 测度 |E| ≈ Σ_k Δt Σ_i W_i χ"""
    grid = mask.grid
    return float(grid.dt * grid.space.integrate_nodes(mask.values.astype(float)).sum())


def mollified_indicator(mask: SetMask, width: float) -> ScalarField:
    """
    逐时间层的空间光滑指示函数 ψ_η = max(0, 1 - dist(x, K_t)/η)

    在 K 上取 1，支撑在 K 的 η 邻域内，侧边界上置 0。
    """
    grid = mask.grid
    if not width > 0:
        raise ConfigurationError(f"mollification width must be positive, got {width}")
    values = np.zeros(grid.shape)
    for k in mask.active_levels:
        outside = ~mask.values[k].reshape(grid.space.shape)
        distance = ndimage.distance_transform_edt(outside, sampling=grid.h)
        values[k] = np.maximum(0.0, 1.0 - distance.ravel() / width)
    values[:, ~grid.space.free] = 0.0
    return ScalarField(grid, values)


def p_flux(g: np.ndarray, p: float) -> np.ndarray:
    """|g|^{p-2} g（沿最后一维取模），g = 0 处为 0"""
    mags = np.linalg.norm(g, axis=-1)
    scale = np.zeros_like(mags)
    positive = mags > 0
    scale[positive] = mags[positive] ** (p - 2)
    return scale[..., None] * g
