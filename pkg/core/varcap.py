"""
变分容量

本模块把变分容量写成一个时空凸规划：

    min  Σ_k Δt ∫|∇v^k|^p + Σ_k Δt ∫|F^k|^{p′} + m
    s.t. W(v^k - v^{k-1}) + Δt Gᵀ(a F^k) = 0      (∂ₜv = div F)
         m ≥ ∫(v^k)²                            (每个时间层)
         v ≥ χ_K,  v = 0 于侧边界

提供：
- w_norm: W 范数分项
- variational_capacity: 'pdhg'（对角预条件原始-对偶）或 'conic'（cvxpy 锥规划）
- capacity_of_union: 并集的容量及柱体上界
- domain_comparability: Ω 与内平行集 Ω_δ 中容量的比较

报告的容量值是解出的 v 的 W 范数（对偶项由逐层 p-Poisson 见证给出），
因此它总是离散规划的一个可行上界。
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple
import logging
import time

import cvxpy as cp
import numpy as np

from .config import get_config
from .elliptic import dual_norm_dt
from .errors import ConfigurationError, GeometryError, SolverError
from .report import CapacityReport, WNormBreakdown
from .stgrid import (FluxField, ScalarField, SetMask, SpaceTimeGrid, lp_norm_grad,
                     mollified_indicator, sup_t_l2)

logger = logging.getLogger(__name__)

METHODS = ('pdhg', 'conic')


def w_norm(v: ScalarField, p: float, tol: Optional[float] = None,
           free: Optional[np.ndarray] = None) -> WNormBreakdown:
    """
    W 范数分项：∬|∇v|^p、‖∂ₜv‖_{V′}^{p′}、sup_t ∫v²

    Args:
        v: 零侧边迹的场
        p: 指数
        tol: 对偶项内层求解容差
        free: 对偶项的未知量节点（默认为全部内部节点）
    """
    dual = dual_norm_dt(v, p, tol, free=free)
    return WNormBreakdown(lp_norm_grad(v, p), dual.power, sup_t_l2(v))


@dataclass
class CapacityOptions:
    """
    容量求解选项（默认值取自 CONFIG.solver）

    属性:
        method: 'pdhg' 或 'conic'
        tol: 内层求解容差
        max_iterations: PDHG 迭代上限
        check_every: 收敛检查间隔
        objective_rtol: 目标函数的相对变化阈值
        feasibility_tol: 耦合约束的相对可行性阈值
        conic_solver: cvxpy 求解器名（None 为自动选择）
        fallback_to_conic: PDHG 预算耗尽时是否改用锥规划
        warm_start: 是否用光滑指示函数与对偶见证初始化
    """
    method: str = 'pdhg'
    tol: float = 1e-6
    max_iterations: int = 20000
    check_every: int = 50
    objective_rtol: float = 1e-7
    feasibility_tol: float = 1e-6
    conic_solver: Optional[str] = None
    fallback_to_conic: bool = True
    warm_start: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown capacity method '{self.method}', expected one of {METHODS}")

    @classmethod
    def from_config(cls, **overrides) -> 'CapacityOptions':
        solver = get_config().solver
        options = cls(method=solver.capacity_method, tol=solver.tol,
                      max_iterations=solver.pdhg_max_iterations, check_every=solver.pdhg_check_every,
                      objective_rtol=solver.objective_rtol, feasibility_tol=solver.feasibility_tol,
                      conic_solver=solver.conic_solver, fallback_to_conic=solver.fallback_to_conic)
        return replace(options, **overrides)


# ==================== 近端算子 ====================

def radial_prox(U: np.ndarray, weight, q: float) -> np.ndarray:
    """
    prox of weight·|z|^q（沿最后一维取模）

    z = s·u/|u|，s 为 s + weight·q·s^{q-1} = |u| 的根。
    q ≥ 2 时对 s 做 Newton；q < 2 时换元 t = s^{q-1} 后对 t 做 Newton，
    两种情形函数均为凸增，从上界出发单调收敛。
    """
    r = np.linalg.norm(U, axis=-1)
    beta = np.broadcast_to(np.asarray(weight, dtype=float) * q, r.shape)
    s = np.zeros_like(r)
    live = (r > 0) & (beta > 0)
    s[~live] = r[~live]
    if live.any():
        rl, bl = r[live], beta[live]
        if q >= 2:
            x = np.minimum(rl, (rl / bl) ** (1.0 / (q - 1)))
            for _ in range(60):
                phi = x + bl * x ** (q - 1) - rl
                dphi = 1.0 + bl * (q - 1) * x ** (q - 2)
                step = phi / dphi
                x = np.maximum(x - step, 0.0)
                if np.all(np.abs(step) <= 1e-14 * np.maximum(rl, 1e-300)):
                    break
            s[live] = x
        else:
            e = 1.0 / (q - 1)
            t = np.minimum(rl / bl, rl ** (q - 1))
            for _ in range(60):
                phi = t ** e + bl * t - rl
                dphi = e * t ** (e - 1) + bl
                step = phi / dphi
                t = np.maximum(t - step, 0.0)
                if np.all(np.abs(step) <= 1e-14 * np.maximum(t, 1e-300)):
                    break
            s[live] = t ** e
    scale = np.zeros_like(r)
    positive = r > 0
    scale[positive] = s[positive] / r[positive]
    return U * scale[..., None]


def sup_prox(U: np.ndarray, lam: float) -> np.ndarray:
    """
    prox of lam·max_k ‖z_k‖²（按行取模）

    解的形式为把模大于 ρ 的行缩放到 ρ；ρ 由按模降序排序后的闭式确定。
    """
    norms = np.linalg.norm(U, axis=1)
    if not np.any(norms > 0):
        return U.copy()
    order = np.sort(norms)[::-1]
    counts = np.arange(1, order.size + 1)
    rho = np.cumsum(order) / (2.0 * lam + counts)
    following = np.append(order[1:], 0.0)
    valid = (order > rho) & (rho >= following)
    j = int(np.argmax(valid)) if valid.any() else order.size - 1
    level = rho[j]
    scale = np.ones_like(norms)
    big = norms > level
    scale[big] = level / norms[big]
    return U * scale[:, None]


# ==================== 离散规划 ====================

class CapacityProgram:
    """
    容量规划的离散算子

    未知量：v 在全部时间层、未知节点上，形状 (M+1, nf)；F 在 k=1..M，形状 (M, nT, n)。

    属性:
        grid (SpaceTimeGrid): 时空网格
        p (float): 指数；q 为共轭指数 p′
        index (np.ndarray): 未知节点编号
        chi (np.ndarray): 下界 χ_K，形状 (M+1, nf)
    """

    def __init__(self, grid: SpaceTimeGrid, p: float, K: SetMask, unknown: np.ndarray):
        space = grid.space
        self.grid = grid
        self.p = float(p)
        self.q = self.p / (self.p - 1)
        self.index = np.flatnonzero(unknown)
        if self.index.size == 0:
            raise GeometryError("no interior nodes left for the capacity program")
        self.n = space.n
        self.nT = space.num_simplices
        self.nf = self.index.size
        self.M = grid.time_steps
        self.G = space.gradient[:, self.index].tocsr()
        self.GT = self.G.T.tocsr()
        self.c = grid.dt * space.simplex_volume
        weights = space.node_weights[self.index]
        self.w = float(weights[0])
        if not np.allclose(weights, self.w):
            raise ConfigurationError("capacity program expects uniform interior node weights")
        self.chi = K.values[:, self.index].astype(float)

    # ---------- 算子 ----------

    def grad(self, V: np.ndarray) -> np.ndarray:
        """(L, nf) → (L, nT, n)"""
        return (self.G @ V.T).T.reshape(V.shape[0], self.nT, self.n)

    def grad_adjoint(self, Y: np.ndarray) -> np.ndarray:
        """(L, nT, n) → (L, nf)"""
        return (self.GT @ Y.reshape(Y.shape[0], -1).T).T

    def coupling(self, V: np.ndarray, F: np.ndarray) -> np.ndarray:
        """W(v^k - v^{k-1}) + Δt Gᵀ(aF^k)，形状 (M, nf)"""
        return self.w * np.diff(V, axis=0) + self.c * self.grad_adjoint(F)

    def coupling_adjoint(self, Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        dV = np.zeros((self.M + 1, self.nf))
        dV[1:] += self.w * Y
        dV[:-1] -= self.w * Y
        return dV, self.c * self.grad(Y)

    def terms(self, V: np.ndarray, F: np.ndarray) -> Tuple[float, float, float]:
        """(梯度项, 通量项, sup 项)"""
        grad_term = self.c * float(np.sum(np.linalg.norm(self.grad(V[1:]), axis=-1) ** self.p))
        flux_term = self.c * float(np.sum(np.linalg.norm(F, axis=-1) ** self.q))
        sup_term = self.w * float(np.max(np.sum(V * V, axis=1)))
        return grad_term, flux_term, sup_term

    def objective(self, V: np.ndarray, F: np.ndarray) -> float:
        return sum(self.terms(V, F))

    def infeasibility(self, V: np.ndarray, F: np.ndarray) -> float:
        """耦合约束的相对残差"""
        return float(np.abs(self.coupling(V, F)).max() / (self.w * max(1.0, np.abs(V).max())))

    def expand(self, V: np.ndarray) -> np.ndarray:
        values = np.zeros(self.grid.shape)
        values[:, self.index] = V
        return values

    # ---------- PDHG ----------

    def step_sizes(self):
        """Pock-Chambolle 对角步长（α=1），径向近端块内取公共步长"""
        absG = abs(self.G)
        col = np.asarray(absG.sum(axis=0)).ravel()
        row = np.asarray(absG.sum(axis=1)).ravel()

        tau_v = np.empty((self.M + 1, self.nf))
        tau_v[0] = 1.0 / (self.w + 1.0)
        tau_v[1:-1] = 1.0 / (col + 2 * self.w + 1.0)
        tau_v[-1] = 1.0 / (col + self.w + 1.0)
        flux_cols = self.c * row.reshape(self.nT, self.n).max(axis=1)
        tau_F = np.zeros(self.nT)
        tau_F[flux_cols > 0] = 1.0 / flux_cols[flux_cols > 0]

        sigma_grad = 1.0 / row.max()
        sigma_coupling = 1.0 / (2 * self.w + self.c * col)
        sigma_sup = 1.0
        return tau_v, tau_F, sigma_grad, sigma_coupling, sigma_sup

    def warm_start(self, K: SetMask, tol: float) -> Tuple[np.ndarray, np.ndarray]:
        """光滑 χ_K 向过去常数延拓，F 取对偶见证"""
        width = get_config().grid.obstacle_width * self.grid.h
        psi = mollified_indicator(K, width).values[:, self.index]
        V = np.maximum(np.maximum.accumulate(psi[::-1], axis=0)[::-1], self.chi)
        F = np.zeros((self.M, self.nT, self.n))
        try:
            witness = dual_norm_dt(ScalarField(self.grid, self.expand(V)), self.p, tol,
                                   free=self._unknown_mask())
            F = np.array(witness.flux.values[1:])
        except SolverError as e:
            logger.debug(f"warm-start flux skipped: {e}")
        return V, F

    def _unknown_mask(self) -> np.ndarray:
        mask = np.zeros(self.grid.space.size, dtype=bool)
        mask[self.index] = True
        return mask

    def solve_pdhg(self, V: np.ndarray, F: np.ndarray,
                   options: CapacityOptions) -> Tuple[np.ndarray, np.ndarray, int, bool, float]:
        """
        对角预条件 PDHG

        对偶块：y1 = ∇v^k（g = cΣ|·|^p）、y2 = 耦合（g = ι{0}）、y3 = v（g = w·max_k‖·‖²）

        Returns:
            (V, F, 迭代次数, 是否收敛, 最后的可行性残差)
        """
        tau_v, tau_F, s1, s2, s3 = self.step_sizes()
        tau_F3 = tau_F[None, :, None]
        Y1 = np.zeros((self.M, self.nT, self.n))
        Y2 = np.zeros((self.M, self.nf))
        Y3 = np.zeros((self.M + 1, self.nf))
        previous = self.objective(V, F)
        infeasible = self.infeasibility(V, F)
        for iteration in range(1, options.max_iterations + 1):
            dV, dF = self.coupling_adjoint(Y2)
            dV[1:] += self.grad_adjoint(Y1)
            dV += Y3
            V_new = np.maximum(V - tau_v * dV, self.chi)
            F_new = radial_prox(F - tau_F3 * dF, (tau_F * self.c)[None, :], self.q)
            V_bar = 2 * V_new - V
            F_bar = 2 * F_new - F
            V, F = V_new, F_new

            Z1 = Y1 + s1 * self.grad(V_bar[1:])
            Y1 = Z1 - s1 * radial_prox(Z1 / s1, self.c / s1, self.p)
            Y2 = Y2 + s2 * self.coupling(V_bar, F_bar)
            Z3 = Y3 + s3 * V_bar
            Y3 = Z3 - s3 * sup_prox(Z3 / s3, self.w / s3)

            if iteration % options.check_every == 0:
                current = self.objective(V, F)
                infeasible = self.infeasibility(V, F)
                change = abs(current - previous) / max(abs(current), np.finfo(float).tiny)
                logger.debug(f"pdhg {iteration}: objective={current:.8g}, change={change:.2e}, "
                             f"infeasibility={infeasible:.2e}")
                if change < options.objective_rtol and infeasible < options.feasibility_tol:
                    return V, F, iteration, True, infeasible
                previous = current
        return V, F, options.max_iterations, False, infeasible

    # ---------- 锥规划 ----------

    def solve_conic(self, solver: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray, float]:
        """
        cvxpy 上镜图形式：m 为 sup 项的上镜图变量

        Returns:
            (V, F, 规划最优值)

        Raises:
            SolverError: 求解器失败或状态非最优
        """
        components = [self.G[c::self.n, :] for c in range(self.n)]
        V = cp.Variable((self.M + 1, self.nf))
        fluxes = [cp.Variable((self.M, self.nT)) for _ in range(self.n)]
        m = cp.Variable()
        grads = [V[1:] @ Gc.T for Gc in components]
        if self.n == 1:
            grad_mag, flux_mag = cp.abs(grads[0]), cp.abs(fluxes[0])
        else:
            grad_mag = cp.norm(cp.vstack([cp.vec(g, order='C') for g in grads]), 2, axis=0)
            flux_mag = cp.norm(cp.vstack([cp.vec(f, order='C') for f in fluxes]), 2, axis=0)
        divergence = sum(f @ Gc for f, Gc in zip(fluxes, components))
        objective = (self.c * cp.sum(cp.power(grad_mag, self.p))
                     + self.c * cp.sum(cp.power(flux_mag, self.q)) + m)
        constraints = [
            self.w * (V[1:] - V[:-1]) + self.c * divergence == 0,
            self.w * cp.sum(cp.square(V), axis=1) <= m,
            V >= self.chi,
        ]
        problem = cp.Problem(cp.Minimize(objective), constraints)
        try:
            problem.solve(solver=solver)
        except cp.error.SolverError as e:
            raise SolverError(f"conic solver failed: {e}") from e
        if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            raise SolverError(f"conic solver returned status '{problem.status}'")
        F = np.stack([f.value for f in fluxes], axis=-1)
        return np.asarray(V.value), F, float(problem.value)


# ==================== 容量 ====================

def _check_mask(K: SetMask, unknown: np.ndarray):
    touched = K.values.any(axis=0)
    if np.any(touched & ~unknown):
        raise GeometryError("compact set reaches the lateral boundary of the domain")


def _capacity(K: SetMask, p: float, options: CapacityOptions,
              unknown: Optional[np.ndarray] = None) -> CapacityReport:
    started = time.perf_counter()
    grid = K.grid
    space = grid.space
    unknown = space.free.copy() if unknown is None else (space.free & unknown)
    _check_mask(K, unknown)
    base = dict(set_spec=K.describe(), grid=grid.to_dict())
    if K.is_empty:
        zero = ScalarField.zeros(grid)
        return CapacityReport(0.0, 'variational', p, terms=WNormBreakdown(0.0, 0.0, 0.0),
                              minimizer=zero, flux=FluxField.zeros(grid),
                              residuals={'obstacle': 0.0, 'coupling': 0.0, 'certificate': 0.0, 'gap': 0.0},
                              seconds=time.perf_counter() - started,
                              extras={'method': options.method, 'fallback': False}, **base)

    program = CapacityProgram(grid, p, K, unknown)
    method = options.method
    fallback = False
    iterations = 0
    program_value = None
    if method == 'pdhg':
        if options.warm_start:
            V, F = program.warm_start(K, options.tol)
        else:
            V = program.chi.copy()
            F = np.zeros((program.M, program.nT, program.n))
        V, F, iterations, converged, infeasible = program.solve_pdhg(V, F, options)
        program_value = program.objective(V, F)
        if not converged:
            if not options.fallback_to_conic:
                raise SolverError("PDHG iteration budget exhausted", residual=infeasible,
                                  iterations=iterations, gap=infeasible)
            logger.warning(f"PDHG did not converge in {iterations} iterations "
                           f"(infeasibility {infeasible:.2e}); falling back to conic solver")
            fallback = True
            method = 'conic'
    if method == 'conic':
        V, F, program_value = program.solve_conic(options.conic_solver)

    V = np.maximum(V, program.chi)
    v = ScalarField(grid, program.expand(V))
    flux_term = program.c * float(np.sum(np.linalg.norm(F, axis=-1) ** program.q))
    dual = dual_norm_dt(v, p, options.tol, free=unknown)
    terms = WNormBreakdown(lp_norm_grad(v, p), dual.power, sup_t_l2(v))
    value = terms.total
    scale = max(value, np.finfo(float).tiny)

    residuals = {
        'obstacle': float(np.maximum(K.values.astype(float) - v.values, 0.0).max()),
        # 规划自身的 (v, F) 对耦合约束的残差
        'coupling': program.infeasibility(V, F),
        'certificate': max(0.0, dual.power - flux_term) / scale,
        'gap': abs(program_value - value) / scale,
    }
    logger.info(f"cap_var={value:.6g} (grad={terms.grad:.4g}, dual={terms.dual:.4g}, "
                f"sup={terms.sup:.4g}) via {method} in {iterations} iterations")
    extras = {'method': method, 'fallback': fallback, 'program_value': program_value,
              'flux_term': flux_term}
    return CapacityReport(value, 'variational', p, terms=terms, minimizer=v, flux=dual.flux,
                          residuals=residuals, iterations=iterations,
                          seconds=time.perf_counter() - started, extras=extras, **base)


def variational_capacity(K: SetMask, p: float,
                         options: Optional[CapacityOptions] = None) -> CapacityReport:
    """
    变分容量 cap_var(K, Ω_T)

    Args:
        K: 紧集掩码（网格由掩码给出）
        p: 指数
        options: 求解选项（默认取配置）

    Returns:
        CapacityReport：value、W 范数分项、极小元 v、见证通量 F 及可行性残差

    Raises:
        GeometryError: K 触及侧边界
        SolverError: PDHG 预算耗尽且锥规划回退失败（或被禁用）
    """
    return _capacity(K, p, options or CapacityOptions.from_config())


def cylinder_bound(specs: Sequence, n: int, p: float) -> Optional[float]:
    """Σ(ρᵢⁿ + τᵢρᵢ^{n-p})；任一成员不是柱体/切片时返回 None"""
    total = 0.0
    for spec in specs:
        if spec is None:
            return None
        for leaf in spec.cylinders:
            if leaf.kind not in ('cylinder', 'slice'):
                return None
            total += leaf.radius ** n + leaf.duration * leaf.radius ** (n - p)
    return total


def capacity_of_union(masks: List[SetMask], p: float,
                      options: Optional[CapacityOptions] = None) -> CapacityReport:
    """
    并集的变分容量

    extras['cylinder_bound'] 为各成员均为柱体时的上界 Σ(ρᵢⁿ + τᵢρᵢ^{n-p})。
    """
    if not masks:
        raise ConfigurationError("capacity_of_union needs at least one mask")
    union = masks[0]
    for mask in masks[1:]:
        union = union | mask
    report = variational_capacity(union, p, options)
    bound = cylinder_bound([m.provenance for m in masks], union.grid.domain.n, p)
    extras = dict(report.extras, parts=len(masks), cylinder_bound=bound)
    return replace(report, extras=extras)


@dataclass(frozen=True)
class Comparability:
    """
    Ω 与 Ω_δ = {x : dist(x,∂Ω) ≥ δ} 中容量的比较

    属性:
        delta (float): 平行距离 δ
        outer (float): cap_var(E, Ω_T)
        inner (float): cap_var(E, (Ω_δ)_T)
        ratio (float): inner / outer（≥ 1）
    """
    delta: float
    outer: float
    inner: float
    ratio: float

    def to_dict(self) -> dict:
        return {'delta': self.delta, 'outer': self.outer, 'inner': self.inner, 'ratio': self.ratio}


def domain_comparability(K: SetMask, p: float, delta: float,
                         options: Optional[CapacityOptions] = None) -> Comparability:
    """
    在 Ω 与内平行集 Ω_δ 上分别计算容量

    Raises:
        GeometryError: K 与 ∂Ω_δ 的距离不足
    """
    options = options or CapacityOptions.from_config()
    grid = K.grid
    distance = grid.space.boundary_distance()
    inner_nodes = distance >= delta - 1e-9 * grid.h
    outer = _capacity(K, p, options).value
    inner = _capacity(K, p, options, unknown=inner_nodes).value
    ratio = inner / outer if outer > 0 else 1.0
    return Comparability(float(delta), outer, inner, ratio)
