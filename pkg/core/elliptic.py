"""
椭圆 p-Laplace 求解

本模块提供冻结时间的空间问题：
- minimize_energy: 带下界约束的正则化 p-能量 Newton 极小化（内层求解器）
- solve_p_poisson: -div(|∇w|^{p-2}∇w) = g 的零迹解
- elliptic_capacity: 椭圆 p-容量 cap_e(K, Ω)
- dual_norm_dt: ‖∂ₜv‖_{V′} 的逐层对偶计算及见证通量
- fatness_ratio / hardy_ratio / radial_capacity: 厚度比、Hardy 比与径向解析容量

内层求解：
    |∇w|² 替换为 |∇w|²+ε²，ε 按配置的阶梯几何递减；每一级做阻尼 Newton
    （Armijo 回溯），下界约束用有效集迭代处理。收敛判据始终是 ε=0 时
    的 KKT 残差（相对量）。
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple
import logging
import math
import time

import numpy as np
from scipy import integrate, sparse
from scipy.sparse import linalg as sparse_linalg

from .config import get_config
from .errors import ConfigurationError, ContractError, GeometryError, SolverError
from .report import CapacityReport
from .stgrid import (Domain, FluxField, ScalarField, SpatialField, SpatialGrid, build_grid,
                     p_flux)

logger = logging.getLogger(__name__)

__all__ = [
    'SpatialField', 'MinimizerResult', 'PLaplaceEnergy', 'minimize_energy', 'solve_p_poisson',
    'elliptic_capacity', 'DualNormResult', 'dual_norm_dt', 'pairing_dt', 'FatnessReport',
    'fatness_ratio', 'hardy_ratio', 'radial_capacity',
]

_ARMIJO = 1e-4
_MIN_STEP = 1e-12


# ==================== 内层求解器 ====================

@dataclass
class MinimizerResult:
    """
    内层极小化结果

    属性:
        values (np.ndarray): 完整节点值（边界节点为 0），形状 (N,)
        residual (float): ε=0 时的相对 KKT 残差
        iterations (int): Newton 迭代总数
        active (np.ndarray): 有效集（取到下界的节点），形状 (N,)
        multipliers (np.ndarray): 下界约束的乘子，形状 (N,)，非有效节点为 0
    """
    values: np.ndarray
    residual: float
    iterations: int
    active: np.ndarray
    multipliers: np.ndarray


class PLaplaceEnergy:
    """
    正则化能量

        E_ε(w) = (1/p) Σ_T a (|∇w|²+ε²)^{p/2} + (c/2) Σ_i W_i w_i² - Σ_i W_i f_i w_i

    只对内部节点建立未知量；边界节点恒为 0。
    """

    def __init__(self, space: SpatialGrid, p: float, mass: float = 0.0,
                 rhs: Optional[np.ndarray] = None, free: Optional[np.ndarray] = None):
        self.space = space
        self.p = float(p)
        self.mass = float(mass)
        # free 可进一步缩小未知量集合（其余节点固定为 0）
        unknown = space.free if free is None else space.free & np.asarray(free, dtype=bool)
        self.free_index = np.flatnonzero(unknown)
        self.G = space.gradient[:, self.free_index].tocsr()
        self.GT = self.G.T.tocsr()
        self.a = space.simplex_volume
        self.W = space.node_weights[self.free_index]
        if rhs is None:
            self.load = np.zeros(self.free_index.size)
        else:
            self.load = self.W * np.asarray(rhs, dtype=float)[self.free_index]

    @property
    def size(self) -> int:
        return self.free_index.size

    def gradients(self, w: np.ndarray) -> np.ndarray:
        return (self.G @ w).reshape(-1, self.space.n)

    def _weights(self, s: np.ndarray, exponent: float) -> np.ndarray:
        # s^exponent，s=0 处取 0（ε=0 且 p<2 时保持有限）
        out = np.zeros_like(s)
        positive = s > 0
        out[positive] = s[positive] ** exponent
        return out

    def value(self, w: np.ndarray, eps: float) -> float:
        g = self.gradients(w)
        s = (g * g).sum(axis=1) + eps ** 2
        return (self.a / self.p * np.sum(s ** (self.p / 2))
                + 0.5 * self.mass * np.dot(self.W, w * w) - np.dot(self.load, w))

    def flux(self, w: np.ndarray, eps: float) -> np.ndarray:
        """(|∇w|²+ε²)^{(p-2)/2} ∇w，形状 (nT, n)"""
        g = self.gradients(w)
        s = (g * g).sum(axis=1) + eps ** 2
        return self._weights(s, (self.p - 2) / 2)[:, None] * g

    def residual_parts(self, w: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """能量梯度的三部分：扩散项、质量项、载荷项"""
        diffusion = self.GT @ (self.a * self.flux(w, eps).ravel())
        return diffusion, self.mass * self.W * w, self.load

    def residual(self, w: np.ndarray, eps: float) -> np.ndarray:
        diffusion, mass, load = self.residual_parts(w, eps)
        return diffusion + mass - load

    def hessian(self, w: np.ndarray, eps: float) -> sparse.csr_matrix:
        """块对角 a[s^{(p-2)/2} I + (p-2) s^{(p-4)/2} g gᵀ] 拉回到节点"""
        n = self.space.n
        g = self.gradients(w)
        nT = g.shape[0]
        s = (g * g).sum(axis=1) + eps ** 2
        s1 = self._weights(s, (self.p - 2) / 2)
        s2 = self._weights(s, (self.p - 4) / 2)
        blocks = (s1[:, None, None] * np.eye(n)[None]
                  + (self.p - 2) * s2[:, None, None] * g[:, :, None] * g[:, None, :])
        base = np.repeat(np.arange(nT) * n, n * n)
        rows = base + np.tile(np.repeat(np.arange(n), n), nT)
        cols = base + np.tile(np.arange(n), n * nT)
        B = sparse.csr_matrix((self.a * blocks.ravel(), (rows, cols)), shape=(nT * n, nT * n))
        H = self.GT @ B @ self.G
        if self.mass:
            H = H + sparse.diags(self.mass * self.W)
        return H.tocsr()


def _kkt_residual(energy: PLaplaceEnergy, w: np.ndarray,
                  active: np.ndarray) -> Tuple[float, np.ndarray]:
    """ε=0 的相对 KKT 残差与乘子"""
    diffusion, mass, load = energy.residual_parts(w, 0.0)
    r = diffusion + mass - load
    scale = max(np.abs(diffusion).max(initial=0.0), np.abs(mass).max(initial=0.0),
                np.abs(load).max(initial=0.0), np.finfo(float).tiny)
    violation = np.where(active, np.maximum(-r, 0.0), np.abs(r))
    multipliers = np.where(active, r, 0.0)
    return float(violation.max(initial=0.0) / scale), multipliers


def _newton(energy: PLaplaceEnergy, w: np.ndarray, eps: float, inactive: np.ndarray,
            tol: float, max_iterations: int) -> Tuple[np.ndarray, int]:
    """在非有效节点上做阻尼 Newton，返回 (w, 迭代次数)"""
    index = np.flatnonzero(inactive)
    if index.size == 0:
        return w, 0
    for iteration in range(1, max_iterations + 1):
        diffusion, mass, load = energy.residual_parts(w, eps)
        r = (diffusion + mass - load)[index]
        # 尺度取全部节点：有效节点上的扩散项即乘子
        scale = max(np.abs(diffusion).max(), np.abs(mass).max(),
                    np.abs(load).max(), np.finfo(float).tiny)
        if np.abs(r).max() <= tol * scale:
            return w, iteration - 1
        H = energy.hessian(w, eps)[index][:, index]
        shift = 1e-14 * max(abs(H.diagonal()).max(), np.finfo(float).tiny)
        direction = sparse_linalg.spsolve((H + shift * sparse.identity(index.size)).tocsc(), -r)
        slope = float(np.dot(r, direction))
        if not np.all(np.isfinite(direction)) or slope >= 0:
            direction, slope = -r, -float(np.dot(r, r))

        current = energy.value(w, eps)
        step = 1.0
        while step >= _MIN_STEP:
            trial = w.copy()
            trial[index] += step * direction
            if energy.value(trial, eps) <= current + _ARMIJO * step * slope:
                break
            step *= 0.5
        else:
            # 回溯失败：已在舍入误差范围内收敛
            return w, iteration
        w = trial
    return w, max_iterations


def minimize_energy(space: SpatialGrid, p: float, mass: float = 0.0,
                    rhs: Optional[np.ndarray] = None, lower: Optional[np.ndarray] = None,
                    initial: Optional[np.ndarray] = None, active: Optional[np.ndarray] = None,
                    tol: Optional[float] = None, step: Optional[int] = None,
                    free: Optional[np.ndarray] = None) -> MinimizerResult:
    """
    极小化 E(w) 于零迹节点函数，可选下界 w ≥ lower

    Args:
        space: 空间网格
        p: 指数
        mass: 质量系数 c（隐式 Euler 时为 1/Δt）
        rhs: 节点载荷 f，形状 (N,)
        lower: 下界，形状 (N,)，-inf 表示无约束
        initial: 初值，形状 (N,)
        active: 有效集初值，形状 (N,)
        tol: 相对 KKT 容差（默认取配置）
        step: 时间步编号，仅用于错误信息
        free: 未知量节点掩码（默认为全部内部节点）

    Returns:
        MinimizerResult

    Raises:
        SolverError: ε 阶梯走完后 KKT 残差仍高于 tol
    """
    settings = get_config().solver
    tol = settings.tol if tol is None else tol
    energy = PLaplaceEnergy(space, p, mass, rhs, free)
    free = energy.free_index

    lo = None
    if lower is not None:
        lo = np.asarray(lower, dtype=float)[free]
        if not np.any(np.isfinite(lo)):
            lo = None
        else:
            lo = np.where(np.isfinite(lo), lo, -np.inf)

    w = np.zeros(energy.size) if initial is None else np.array(initial, dtype=float)[free]
    if lo is not None:
        w = np.maximum(w, lo)
    if active is not None:
        act = np.asarray(active, dtype=bool)[free].copy()
    elif lo is not None:
        act = w <= lo
    else:
        act = np.zeros(energy.size, dtype=bool)
    if lo is None:
        act[:] = False
    else:
        act &= np.isfinite(lo)
        w[act] = lo[act]

    def finish(w_free, residual, iterations, act_free, lam_free):
        values = np.zeros(space.size)
        values[free] = w_free
        full_active = np.zeros(space.size, dtype=bool)
        full_active[free] = act_free
        multipliers = np.zeros(space.size)
        multipliers[free] = lam_free
        return MinimizerResult(values, residual, iterations, full_active, multipliers)

    # 载荷为 0 且 0 可行时，0 是唯一极小元
    if not np.any(energy.load) and (lo is None or np.all(lo <= 0)):
        return finish(np.zeros(energy.size), 0.0, 0, np.zeros(energy.size, dtype=bool),
                      np.zeros(energy.size))

    ladder = (0.0,) if p == 2 else tuple(settings.eps_ladder)
    bound_tol = tol * max(1.0, np.abs(lo[np.isfinite(lo)]).max()) if lo is not None else 0.0
    iterations = 0
    residual, multipliers = math.inf, np.zeros(energy.size)
    for eps in ladder:
        for _ in range(settings.active_set_max_iterations):
            w, used = _newton(energy, w, eps, ~act, 0.1 * tol, settings.newton_max_iterations)
            iterations += used
            if lo is None:
                break
            r = energy.residual(w, eps)
            scale = max(np.abs(r).max(initial=0.0), np.finfo(float).tiny)
            release = act & (r < -tol * scale)
            violated = ~act & (w < lo - bound_tol)
            if not (release.any() or violated.any()):
                break
            act = (act & ~release) | violated
            w[violated] = lo[violated]
        residual, multipliers = _kkt_residual(energy, w, act)
        logger.debug(f"eps={eps:.1e}: kkt={residual:.3e}, newton={iterations}, active={int(act.sum())}")
        if residual <= tol:
            break

    if residual > tol:
        raise SolverError("p-energy minimization did not converge", residual=residual,
                          iterations=iterations, step=step)
    return finish(w, residual, iterations, act, multipliers)


# ==================== 椭圆问题 ====================

def solve_p_poisson(g: SpatialField, p: float, tol: Optional[float] = None) -> SpatialField:
    """
    求解 -div(|∇w|^{p-2}∇w) = g，w 零迹

    即极小化 (1/p)∫|∇w|^p - ∫gw。p=2 时为 Poisson 问题。

    Raises:
        SolverError: 未收敛，携带最后的残差
    """
    result = minimize_energy(g.space, p, rhs=g.values, tol=tol)
    return SpatialField(g.space, result.values)


def _check_spatial_mask(space: SpatialGrid, K: np.ndarray) -> np.ndarray:
    K = np.asarray(K, dtype=bool)
    if K.shape != (space.size,):
        raise ContractError(f"spatial mask has shape {K.shape}, grid expects {(space.size,)}")
    if np.any(K & ~space.free):
        raise GeometryError("compact set touches the boundary of the domain")
    return K


def p_energy(u: SpatialField, p: float) -> float:
    """∫|∇u|^p"""
    mags = np.linalg.norm(u.space.grad(u.values), axis=-1)
    return float(u.space.integrate_cells(mags ** p))


def elliptic_capacity(K: np.ndarray, space: SpatialGrid, p: float,
                      tol: Optional[float] = None) -> CapacityReport:
    """
    椭圆 p-容量 cap_e(K, Ω) = min{∫|∇u|^p : u 零迹, u ≥ 1 于 K}

    Args:
        K: 空间节点掩码，形状 (N,)
        space: 空间网格（Ω 由其区域给出）
        p: 指数
        tol: 相对容差

    Returns:
        CapacityReport，residuals 含 kkt、obstacle、gap（乘子质量与容量的相对差）

    Raises:
        GeometryError: K 含边界节点
    """
    started = time.perf_counter()
    K = _check_spatial_mask(space, K)
    spec = {'kind': 'spatial', 'count': int(K.sum())}
    if not K.any():
        return CapacityReport(0.0, 'elliptic', p, minimizer=SpatialField(space, np.zeros(space.size)),
                              residuals={'kkt': 0.0, 'obstacle': 0.0, 'gap': 0.0},
                              seconds=time.perf_counter() - started, set_spec=spec,
                              grid=space.to_dict(), extras={'multiplier_mass': 0.0})

    lower = np.where(K, 1.0, -np.inf)
    result = minimize_energy(space, p, lower=lower, initial=K.astype(float), active=K, tol=tol)
    u = SpatialField(space, result.values)
    value = p_energy(u, p)
    mass = float(result.multipliers.sum())
    gap = abs(mass - value) / max(value, np.finfo(float).tiny)
    obstacle = float(np.maximum(1.0 - result.values[K], 0.0).max())
    logger.debug(f"cap_e: value={value:.6g}, multiplier mass={mass:.6g}, gap={gap:.2e}")
    return CapacityReport(value, 'elliptic', p, minimizer=u,
                          residuals={'kkt': result.residual, 'obstacle': obstacle, 'gap': gap},
                          iterations=result.iterations, seconds=time.perf_counter() - started,
                          set_spec=spec, grid=space.to_dict(), extras={'multiplier_mass': mass})


def radial_capacity(n: int, p: float, rho: float, R: float) -> float:
    """
    cap_e(B̄_ρ, B_R) 的径向积分公式

        ω_{n-1} (∫_ρ^R r^{(1-n)/(p-1)} dr)^{1-p}，ω_0 = 2，ω_1 = 2π
    """
    if not 0 < rho < R:
        raise ConfigurationError(f"need 0 < rho < R, got rho={rho}, R={R}")
    surface = {1: 2.0, 2: 2.0 * math.pi}[n]
    integral, _ = integrate.quad(lambda r: r ** ((1 - n) / (p - 1)), rho, R)
    return surface * integral ** (1 - p)


def hardy_ratio(u: SpatialField, p: float) -> float:
    """∫(|u|/dist(x,∂Ω))^p / ∫|∇u|^p，边界节点不参与"""
    space = u.space
    distance = space.boundary_distance()
    inside = space.free & (distance > 0)
    numerator = float(np.sum(space.node_weights[inside]
                             * (np.abs(u.values[inside]) / distance[inside]) ** p))
    denominator = p_energy(u, p)
    if denominator == 0.0:
        return 0.0
    return numerator / denominator


# ==================== 对偶范数 ====================

@dataclass(frozen=True, eq=False)
class DualNormResult:
    """
    ‖∂ₜv‖_{V′} 的计算结果

    属性:
        value (float): ‖∂ₜv‖_{V′}
        power (float): ‖∂ₜv‖_{V′}^{p′} = Σ_k Δt ∫|∇w^k|^p
        witnesses (List[SpatialField]): 逐层的 w^k，k=1..M
        flux (FluxField): 见证通量 F = -|∇w|^{p-2}∇w，满足 ∂ₜv = div F
        residual (float): 各层 KKT 残差的最大值
    """
    value: float
    power: float
    witnesses: List[SpatialField]
    flux: FluxField
    residual: float = 0.0


def dual_norm_dt(v: ScalarField, p: float, tol: Optional[float] = None,
                 free: Optional[np.ndarray] = None) -> DualNormResult:
    """
    逐层对偶计算 ‖∂ₜv‖_{V′}

    对 k=1..M 取 g^k = (v^k - v^{k-1})/Δt，解 -div(|∇w|^{p-2}∇w) = g^k，
    返回 (Σ_k Δt ∫|∇w^k|^p)^{1/p′}。

    Raises:
        ContractError: v 的侧边迹不为零
        SolverError: 某一层未收敛
    """
    if not v.has_zero_trace:
        raise ContractError("dual norm needs a field with zero lateral trace")
    grid = v.grid
    space = grid.space
    q = p / (p - 1)
    rates = v.time_derivative()
    witnesses = []
    flux = np.zeros((grid.levels, space.num_simplices, space.n))
    power = 0.0
    residual = 0.0
    for k in range(1, grid.levels):
        result = minimize_energy(space, p, rhs=rates[k - 1], tol=tol, step=k, free=free)
        w = SpatialField(space, result.values)
        witnesses.append(w)
        g = space.grad(result.values)
        mags = np.linalg.norm(g, axis=-1)
        flux[k] = -p_flux(g, p)
        power += grid.dt * float(space.integrate_cells(mags ** p))
        residual = max(residual, result.residual)
    value = power ** (1.0 / q)
    return DualNormResult(value, power, witnesses, FluxField(grid, flux), residual)


def pairing_dt(v: ScalarField, phi: ScalarField) -> float:
    """离散对偶配对 Σ_k Δt ∫ (∂ₜv)^k φ^k"""
    grid = v.grid
    rates = v.time_derivative()
    return float(grid.dt * np.sum(grid.space.integrate_nodes(rates * phi.values[1:])))


# ==================== p-厚度 ====================

@dataclass(frozen=True)
class FatnessReport:
    """
    p-厚度比

    属性:
        point (Tuple[float, ...]): 探测点 x
        radius (float): ρ
        numerator (float): cap_e(E∩B̄_ρ, B_{2ρ})
        denominator (float): cap_e(B̄_ρ, B_{2ρ})
        ratio (float): α̂ = numerator / denominator
    """
    point: Tuple[float, ...]
    radius: float
    numerator: float
    denominator: float
    ratio: float

    def to_dict(self) -> dict:
        return {'point': list(self.point), 'radius': self.radius, 'numerator': self.numerator,
                'denominator': self.denominator, 'ratio': self.ratio}


def fatness_ratio(complement: Callable[[np.ndarray], np.ndarray], x: Tuple[float, ...],
                  rho: float, p: float, nodes_per_axis: Optional[int] = None,
                  tol: Optional[float] = None) -> FatnessReport:
    """
    在局部网格 B_{2ρ}(x) 上计算 cap_e(E∩B̄_ρ, B_{2ρ}) / cap_e(B̄_ρ, B_{2ρ})

    Args:
        complement: E = ℝⁿ∖Ω 的指示函数，输入形状 (N, n) 的坐标，返回布尔数组
        x: 探测点
        rho: 半径 ρ
        p: 指数
        nodes_per_axis: 局部网格每个方向的节点数（默认取配置）
    """
    if nodes_per_axis is None:
        nodes_per_axis = get_config().grid.nodes_per_axis
    local = build_grid(Domain.ball(x, 2 * rho, T=1.0, p=p), nodes_per_axis, 4).space
    ball = local.ball(x, rho)
    inside = np.asarray(complement(local.coords), dtype=bool)
    denominator = elliptic_capacity(ball, local, p, tol).value
    numerator = elliptic_capacity(ball & inside, local, p, tol).value
    ratio = numerator / denominator if denominator > 0 else 0.0
    return FatnessReport(tuple(float(c) for c in x), float(rho), numerator, denominator, ratio)
