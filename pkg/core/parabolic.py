"""
抛物 p-Laplace 演化

本模块提供隐式 Euler 时间推进及其派生量：
- evolve: ∂ₜu - div(|∇u|^{p-2}∇u) = 0 的逐步凸极小化，可带障碍 u ≥ ψ
- balayage: 以光滑指示函数为障碍、零初值的障碍问题解 R̂_K
- riesz_measure / measure_capacity: Riesz 测度与测度型容量
- energy_norm: sup_t ½∫v² + ∬|∇v|^p
- extend_by_solution / energy_identity: 用齐次方程的解延拓及其能量恒等式

每一步求解
    min (1/(2Δt))∫(u - u_prev)² + (1/p)∫|∇u|^p   [u ≥ ψ(·,t_k)]
由 elliptic.minimize_energy 完成（质量系数 1/Δt，载荷 u_prev/Δt）。
"""

from dataclasses import dataclass
from typing import Optional
import logging
import time

import numpy as np
import pandas as pd

from .config import get_config
from .elliptic import minimize_energy
from .errors import ConfigurationError, ContractError, GeometryError
from .report import CapacityReport
from .stgrid import (ScalarField, SetMask, SpaceTimeGrid, SpatialField, _same_grid, dilate,
                     lp_norm_grad, mollified_indicator, p_flux, sup_t_l2)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EvolutionResult:
    """
    演化结果

    属性:
        trajectory (ScalarField): 各时间层的解 u^0..u^M
        residuals (np.ndarray): 每一步的相对 KKT 残差，形状 (M,)
        p (float): 指数
        obstacle (Optional[ScalarField]): 障碍 ψ（无障碍时为 None）
        contact (Optional[SetMask]): 接触集 {u = ψ, ψ > 0}（无障碍时为 None）
        iterations (int): Newton 迭代总数
    """
    trajectory: ScalarField
    residuals: np.ndarray
    p: float
    obstacle: Optional[ScalarField] = None
    contact: Optional[SetMask] = None
    iterations: int = 0

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.trajectory.grid

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max(initial=0.0))


def evolve(initial: SpatialField, p: float, grid: SpaceTimeGrid,
           obstacle: Optional[ScalarField] = None, tol: Optional[float] = None) -> EvolutionResult:
    """
    隐式 Euler 推进

    Args:
        initial: 初值（零迹）
        p: 指数
        grid: 时空网格
        obstacle: 障碍 ψ（侧边界上 ≤ 0）；u^0 取 max(initial, ψ^0)
        tol: 每一步的相对 KKT 容差

    Returns:
        EvolutionResult

    Raises:
        ContractError: 初值迹不为零或网格不一致
        GeometryError: 障碍在侧边界上为正
        SolverError: 某一步未收敛（带步号与残差）
    """
    space = grid.space
    if initial.space is not space:
        raise ContractError("initial data lives on a different spatial grid")
    if not initial.has_zero_trace:
        raise ContractError("initial data must vanish on the lateral boundary")
    psi = None
    if obstacle is not None:
        if obstacle.grid is not grid:
            raise ContractError("obstacle lives on a different grid")
        if np.any(obstacle.values[:, ~space.free] > 0):
            raise GeometryError("obstacle is positive on the lateral boundary")
        psi = obstacle.values

    levels = np.empty(grid.shape)
    levels[0] = initial.values if psi is None else np.maximum(initial.values, psi[0])
    contact = np.zeros(grid.shape, dtype=bool)
    if psi is not None:
        contact[0] = (psi[0] > 0) & (levels[0] <= psi[0])
    residuals = np.zeros(grid.time_steps)
    active = None
    iterations = 0
    mass = 1.0 / grid.dt
    for k in range(1, grid.levels):
        previous = levels[k - 1]
        result = minimize_energy(space, p, mass=mass, rhs=previous * mass,
                                 lower=None if psi is None else psi[k],
                                 initial=previous,
                                 active=None if active is None else active & (psi[k] > 0),
                                 tol=tol, step=k)
        levels[k] = result.values
        residuals[k - 1] = result.residual
        iterations += result.iterations
        if psi is not None:
            active = result.active
            contact[k] = result.active & (psi[k] > 0)
        logger.debug(f"step {k}/{grid.time_steps}: kkt={result.residual:.2e}, newton={result.iterations}")

    trajectory = ScalarField(grid, levels)
    return EvolutionResult(trajectory, residuals, p, obstacle,
                           None if psi is None else SetMask(grid, contact), iterations)


def balayage(K: SetMask, p: float, width: Optional[float] = None,
             tol: Optional[float] = None) -> EvolutionResult:
    """
    K 的 balayage R̂_K

    以 ψ_η = max(0, 1 - dist(·,K_t)/η) 为障碍、零初值求解障碍问题。
    K 首次出现之前的时间层上结果恒为 0。

    Args:
        K: 紧集掩码
        p: 指数
        width: 光滑宽度 η（默认取配置 grid.obstacle_width × h）
        tol: 相对容差
    """
    grid = K.grid
    if width is None:
        width = get_config().grid.obstacle_width * grid.h
    zero = SpatialField(grid.space, np.zeros(grid.space.size))
    if K.is_empty:
        return EvolutionResult(ScalarField.zeros(grid), np.zeros(grid.time_steps), p,
                               ScalarField.zeros(grid), SetMask.empty(grid))
    psi = mollified_indicator(K, width)
    logger.debug(f"balayage: |K|={K.count} nodes, first level={K.first_level}, eta={width:.4g}")
    return evolve(zero, p, grid, obstacle=psi, tol=tol)


# ==================== Riesz 测度 ====================

@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """
    离散 Riesz 测度

    属性:
        grid (SpaceTimeGrid): 时空网格
        masses (np.ndarray): 每个 (时间层, 节点) 的质量（已截断为非负），形状 (M+1, N)
        clipped (float): 截断掉的负质量总量
        raw_minimum (float): 截断前的最小质量
    """
    grid: SpaceTimeGrid
    masses: np.ndarray
    clipped: float = 0.0
    raw_minimum: float = 0.0

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    def mass_on(self, mask: SetMask) -> float:
        return float(self.masses[mask.values].sum())

    def support_fraction(self, mask: SetMask, cells: int = 1) -> float:
        """
        落在 mask 的 cells 个网格单元（Chebyshev 邻域）之内的质量比例

        总质量为 0 时返回 1。
        """
        total = self.total
        if total == 0.0:
            return 1.0
        near = dilate(mask, cells, 'spacetime', full=True) if cells > 0 else mask
        return self.mass_on(near) / total

    def to_frame(self) -> pd.DataFrame:
        """稀疏表示：只列出正质量 (x0[,x1], t, mass)"""
        levels, nodes = np.nonzero(self.masses > 0)
        coords = self.grid.space.coords
        columns = {f'x{axis}': coords[nodes, axis] for axis in range(self.grid.space.n)}
        columns['t'] = self.grid.times[levels]
        columns['mass'] = self.masses[levels, nodes]
        return pd.DataFrame(columns)

    def to_csv(self, path: str, float_format: str = '%.10g'):
        self.to_frame().to_csv(path, index=False, float_format=float_format)


def riesz_measure(u: EvolutionResult, p: Optional[float] = None,
                  tol: Optional[float] = None) -> DiscreteMeasure:
    """
    离散弱形式残差

        μ_i^k = W_i (u_i^k - u_i^{k-1}) + Δt (Gᵀ a |∇u^k|^{p-2}∇u^k)_i ，k ≥ 1，i 为内部节点

    负质量截断为 0，截断量记录在 clipped；低于 -10·tol·total 时记 WARNING。
    """
    p = u.p if p is None else p
    tol = get_config().solver.tol if tol is None else tol
    grid = u.grid
    space = grid.space
    values = u.trajectory.values
    g = space.grad(values[1:])
    flux = p_flux(g, p)
    diffusion = (space.gradient.T @ (space.simplex_volume * flux.reshape(grid.time_steps, -1).T)).T
    raw = np.zeros(grid.shape)
    raw[1:] = space.node_weights * np.diff(values, axis=0) + grid.dt * diffusion
    raw[:, ~space.free] = 0.0

    masses = np.maximum(raw, 0.0)
    clipped = float(-raw[raw < 0].sum())
    minimum = float(raw.min(initial=0.0))
    total = float(masses.sum())
    if minimum < -10 * tol * max(total, np.finfo(float).tiny):
        logger.warning(f"Riesz measure has negative mass {minimum:.3e} (total {total:.3e}, "
                       f"clipped {clipped:.3e}): discretization inconsistency")
    return DiscreteMeasure(grid, masses, clipped, minimum)


def measure_capacity(K: SetMask, p: float, width: Optional[float] = None,
                     tol: Optional[float] = None,
                     evolution: Optional[EvolutionResult] = None) -> CapacityReport:
    """
    测度型容量：balayage(K) 的 Riesz 测度总质量

    Args:
        evolution: 已算好的 balayage(K)；给定时不再重新求解

    Returns:
        CapacityReport，minimizer 为 balayage 场，extras 含 clipped 与 support_fraction

    Raises:
        ContractError: evolution 不在 K 的网格上
    """
    started = time.perf_counter()
    if evolution is None:
        result = balayage(K, p, width, tol)
    else:
        _same_grid(evolution.grid, K.grid)
        result = evolution
    mu = riesz_measure(result, p, tol)
    extras = {'clipped': mu.clipped, 'support_fraction': mu.support_fraction(K) if not K.is_empty else 1.0}
    return CapacityReport(mu.total, 'measure', p, minimizer=result.trajectory,
                          residuals={'kkt': result.max_residual, 'negative_mass': -mu.raw_minimum},
                          iterations=result.iterations, seconds=time.perf_counter() - started,
                          set_spec=K.describe(), grid=K.grid.to_dict(), extras=extras)


def energy_norm(v: ScalarField, p: Optional[float] = None) -> float:
    """sup_t ½∫v² + ∬|∇v|^p"""
    p = v.grid.domain.p if p is None else p
    return 0.5 * sup_t_l2(v) + lp_norm_grad(v, p)


# ==================== 延拓 ====================

def extend_by_solution(v1: ScalarField, T: float, p: Optional[float] = None,
                       tol: Optional[float] = None) -> ScalarField:
    """
    用齐次方程的解把 v1 从 (0,T₀] 延拓到 (0,T]

    v̂ = v1 于 [0,T₀]，之后为以 v1(·,T₀) 为初值的隐式 Euler 解（同一 Δt）。

    Raises:
        ConfigurationError: T ≤ T₀ 或 T 不是 Δt 的整数倍
        ContractError: v1 的侧边迹不为零
    """
    grid = v1.grid
    p = grid.domain.p if p is None else p
    T0 = grid.domain.T
    if not T > T0:
        raise ConfigurationError(f"extension time {T} must exceed {T0}")
    if not v1.has_zero_trace:
        raise ContractError("extension needs a field with zero lateral trace")
    target = grid.with_final_time(T)
    tail = SpaceTimeGrid(grid.domain.with_time(T - T0), grid.space.nodes_per_axis,
                         target.time_steps - grid.time_steps, space=grid.space)
    start = SpatialField(grid.space, v1.values[-1])
    result = evolve(start, p, tail, tol=tol)
    values = np.vstack([v1.values, result.trajectory.values[1:]])
    return ScalarField(target, values)


@dataclass(frozen=True)
class EnergyIdentity:
    """
    延拓部分 v₂ 的能量收支（隐式 Euler 下精确成立）

        ½‖v₂(T)‖² + ∬|∇v₂|^p + dissipation = ½‖v₁(T₀)‖²

    属性:
        initial (float): ½‖v₁(T₀)‖²
        final (float): ½‖v₂(T)‖²
        gradient (float): ∬_{T₀}^{T} |∇v₂|^p
        dissipation (float): Σ_k ½‖v₂^k - v₂^{k-1}‖²（数值耗散）
        sup_half_l2 (float): sup_t ½‖v₂(t)‖²
    """
    initial: float
    final: float
    gradient: float
    dissipation: float
    sup_half_l2: float

    @property
    def lhs(self) -> float:
        """max{½‖v₂‖²_{L∞L²}, ‖v₂‖_V^p}"""
        return max(self.sup_half_l2, self.gradient)

    @property
    def defect(self) -> float:
        """收支的相对误差"""
        balance = self.final + self.gradient + self.dissipation
        return abs(balance - self.initial) / max(self.initial, np.finfo(float).tiny)


def energy_identity(v1: ScalarField, extended: ScalarField, p: Optional[float] = None) -> EnergyIdentity:
    """在延拓部分上计算能量收支各项"""
    p = v1.grid.domain.p if p is None else p
    grid = extended.grid
    start = v1.grid.time_steps
    tail = extended.values[start:]
    if not np.allclose(tail[0], v1.values[-1]):
        raise ContractError("extended field does not continue v1")
    space = grid.space
    l2 = space.integrate_nodes(tail ** 2)
    mags = np.linalg.norm(space.grad(tail[1:]), axis=-1)
    gradient = float(grid.dt * space.integrate_cells(mags ** p).sum())
    dissipation = float(0.5 * space.integrate_nodes(np.diff(tail, axis=0) ** 2).sum())
    return EnergyIdentity(0.5 * float(l2[0]), 0.5 * float(l2[-1]), gradient, dissipation,
                          0.5 * float(l2.max()))
