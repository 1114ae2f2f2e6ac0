"""
显式超热函数例子

    D(x,t) = [A(τ/(τ-t))^{n(p-2)/(λ(p-1))}
              + ((p-2)/p)·λ^{-1/(p-1)}·(|x|^p/(τ-t))^{1/(p-1)}]^{(p-1)/(p-2)}

其中 λ = n(p-2) + p。D 在 Ω×(0,τ) 内是弱解，并在 t → τ⁻ 时于 x ≠ 0 处爆破，
{D = ∞} = Ω×{τ} 是一个极集。t ≥ τ 的分支不在此实现。
"""

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
import pandas as pd

from core.errors import ConfigurationError, DomainError
from core.report import to_jsonable
from core.stgrid import Domain, SpaceTimeGrid, build_grid, p_flux, refine

from .experiments import loglog_fit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MonsterParams:
    """
    例子的参数

    属性:
        A (float): 振幅 A > 0
        tau (float): 爆破时刻 τ > 0
        p (float): 指数 p > 2
        n (int): 空间维数
    """
    A: float
    tau: float
    p: float
    n: int = 1

    def __post_init__(self):
        if not self.p > 2:
            raise ConfigurationError(f"the example needs p > 2, got {self.p}")
        if not self.A > 0:
            raise ConfigurationError(f"A must be positive, got {self.A}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.n < 1:
            raise ConfigurationError(f"dimension must be positive, got {self.n}")

    @property
    def lam(self) -> float:
        """λ = n(p-2) + p"""
        return self.n * (self.p - 2) + self.p

    def to_dict(self) -> dict:
        return {**asdict(self), 'lambda': self.lam}


def eval_monster(x, t, params: MonsterParams):
    """
    计算 D(x,t)

    Args:
        x: 空间点，形状 (..., n)；n=1 时也可以是标量或一维数组
        t: 时间，可与 x 的前导维广播
        params: 参数

    Raises:
        DomainError: t ≥ τ 或 t < 0
    """
    p, tau, lam, n = params.p, params.tau, params.lam, params.n
    t = np.asarray(t, dtype=float)
    if np.any(t >= tau) or np.any(t < 0):
        raise DomainError(f"the example is evaluated only for 0 <= t < tau={tau}")
    x = np.asarray(x, dtype=float)
    if n == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        r = np.abs(x)
    else:
        r = np.linalg.norm(x, axis=-1)
    remaining = tau - t
    first = params.A * (tau / remaining) ** (n * (p - 2) / (lam * (p - 1)))
    second = (p - 2) / p * lam ** (-1.0 / (p - 1)) * (r ** p / remaining) ** (1.0 / (p - 1))
    value = (first + second) ** ((p - 1) / (p - 2))
    return float(value) if np.ndim(value) == 0 else value


def blowup_ray(x: Sequence[float], params: MonsterParams, n_points: int = 16) -> List[Tuple[float, float]]:
    """沿 t_j = τ(1 - 2^{-j})，j=1..n_points 取值"""
    times = params.tau * (1.0 - 2.0 ** -np.arange(1, n_points + 1))
    point = np.asarray(x, dtype=float)
    return [(float(t), float(eval_monster(point, t, params))) for t in times]


@dataclass(frozen=True)
class ResidualLevel:
    """一个网格上的离散弱残差"""
    nodes: int
    steps: int
    h: float
    dt: float
    max_residual: float
    rms_residual: float


@dataclass(frozen=True)
class MonsterReport:
    """
    残差检查报告

    属性:
        params: 例子参数
        levels: 各加密层级的残差
        slope: log 残差 ~ log h 的斜率（只有一层时为 None）
        ray: 爆破射线上的 (t, D) 值
        min_slope: 通过所需的最小斜率
    """
    params: MonsterParams
    levels: Tuple[ResidualLevel, ...]
    slope: Optional[float] = None
    ray: Tuple[Tuple[float, float], ...] = ()
    min_slope: float = 0.5

    @property
    def blows_up(self) -> bool:
        values = [v for _, v in self.ray]
        return len(values) > 1 and all(b > a for a, b in zip(values, values[1:]))

    @property
    def passed(self) -> bool:
        decays = self.slope is None or self.slope > self.min_slope
        return decays and (not self.ray or self.blows_up)

    def to_frame(self) -> pd.DataFrame:
        columns = ['nodes', 'steps', 'h', 'dt', 'max_residual', 'rms_residual']
        return pd.DataFrame([asdict(level) for level in self.levels], columns=columns)

    def to_dict(self) -> dict:
        return to_jsonable({
            'experiment': 'monster',
            'params': self.params.to_dict(),
            'levels': [asdict(level) for level in self.levels],
            'slope': self.slope,
            'ray': [{'t': t, 'value': v} for t, v in self.ray],
            'blows_up': self.blows_up,
            'passed': self.passed,
        })

    def plot_data(self) -> dict:
        return {'title': 'weak residual of the explicit solution', 'xlabel': 'h',
                'ylabel': 'max residual', 'loglog': True,
                'series': [{'label': 'max', 'x': [lv.h for lv in self.levels],
                            'y': [lv.max_residual for lv in self.levels], 'marker': 'o'}]}


def weak_residual(params: MonsterParams, grid: SpaceTimeGrid) -> ResidualLevel:
    """
    内部帽函数上的离散弱残差，按节点权重归一

        r_i^k = (D_i^k - D_i^{k-1})/Δt + [W⁻¹Gᵀ(a|∇D^k|^{p-2}∇D^k)]_i

    Raises:
        DomainError: 网格的时间窗超过 0.9τ
    """
    if grid.domain.T > 0.9 * params.tau * (1 + 1e-12):
        raise DomainError(f"time window T={grid.domain.T} must stay below 0.9*tau={0.9 * params.tau}")
    if grid.domain.n != params.n:
        raise ConfigurationError(f"grid dimension {grid.domain.n} does not match n={params.n}")
    space = grid.space
    values = np.stack([eval_monster(space.coords, t, params) for t in grid.times])
    rates = np.diff(values, axis=0) / grid.dt
    flux = p_flux(space.grad(values[1:]), params.p)
    residual = rates + space.div(-flux)
    interior = residual[:, space.free]
    weights = space.node_weights[space.free]
    rms = math.sqrt(float(np.sum(weights * interior ** 2)) / (float(weights.sum()) * interior.shape[0]))
    return ResidualLevel(space.nodes_per_axis, grid.time_steps, grid.h, grid.dt,
                         float(np.abs(interior).max()), rms)


def check_monster_residual(params: MonsterParams, grid: SpaceTimeGrid, refinements: int = 2,
                           ray_point: Optional[Sequence[float]] = None,
                           ray_points: int = 16) -> MonsterReport:
    """
    在 grid 及其 refinements 次加密上计算弱残差并拟合衰减斜率

    Args:
        params: 例子参数
        grid: 覆盖 Ω×(0,T) 的网格，T ≤ 0.9τ（区域应避开原点，D 在原点处不够光滑）
        refinements: 加密次数
        ray_point: 爆破射线的空间点（默认取区域中心）
        ray_points: 射线上的点数
    """
    grids = [grid]
    for _ in range(refinements):
        grids.append(refine(grids[-1]))
    levels = []
    for g in grids:
        level = weak_residual(params, g)
        levels.append(level)
        logger.info(f"monster residual: nodes={level.nodes}, steps={level.steps}, "
                    f"max={level.max_residual:.3e}")
    fit = loglog_fit('h', 0.0, [lv.h for lv in levels], [lv.max_residual for lv in levels])
    point = grid.domain.center if ray_point is None else ray_point
    ray = blowup_ray(point, params, ray_points) if ray_points else []
    return MonsterReport(params, tuple(levels), None if fit is None else fit.slope, tuple(ray))


def default_monster_grid(params: MonsterParams, nodes: int, steps: int) -> SpaceTimeGrid:
    """Ω = (0.5, 1.5)ⁿ，T = 0.9τ（避开原点和爆破时刻）"""
    domain = Domain.box((0.5,) * params.n, (1.5,) * params.n, 0.9 * params.tau, params.p)
    return build_grid(domain, nodes, steps)
