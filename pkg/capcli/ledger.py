"""
不等式台账

每个条目在计算得到的场上求出不等式两边的数值与经验常数 C = LHS / RHS：
- 经验条目（常数未知）：C 有限，且一次加密后的相对漂移不超过 max_drift
- 有界条目（常数已知）：C ≤ bound，在每个网格上都要成立
- 跨网格条目：C 为加密网格与基础网格上同一量之比，C ≤ bound 即通过

台账从不只报告布尔结果，总是带着两边的数值与常数。
"""

from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
import pandas as pd

from core.archive import ArtifactArchive
from core.config import get_config
from core.elliptic import dual_norm_dt, hardy_ratio
from core.errors import ConfigurationError, ContractError, GeometryError, ResolutionError
from core.parabolic import (EvolutionResult, balayage, energy_identity, extend_by_solution,
                            riesz_measure)
from core.parhaus import hausdorff_content
from core.report import canonical_json, to_jsonable
from core.rng import DeterministicRNG
from core.stgrid import (FluxField, ScalarField, SetMask, ShapeSpec, SpaceTimeGrid, SpatialField,
                         _same_grid, erode, measure, parabolic_cylinder, rasterize, refine)
from core.varcap import domain_comparability, variational_capacity, w_norm

from .experiments import ExperimentConfig

logger = logging.getLogger(__name__)

SUBADDITIVITY_SLACK = 0.02
EXTENSION_FACTOR = 3.0
EXTENSION_OFFSET = 1e-6
ENERGY_DEFECT = 0.01
RIESZ_OUTSIDE = 0.05


def grid_tag(grid: SpaceTimeGrid) -> str:
    return f'{grid.space.nodes_per_axis}x{grid.time_steps}'


def balayage_key(grid: SpaceTimeGrid) -> str:
    """归档中 balayage 轨迹的条目名"""
    return f'balayage/{grid_tag(grid)}'


def ledger_set(cfg: ExperimentConfig) -> ShapeSpec:
    """台账使用的紧集：标准集合族中的第一个"""
    return cfg.shape_specs()[0]


# ==================== 场上的积分量 ====================

def _cell_average(space, values: np.ndarray) -> np.ndarray:
    """节点量 (..., N) → 单纯形平均 (..., nT)"""
    return np.asarray(values)[..., space.simplices].mean(axis=-1)


def _region(space, center: Optional[Sequence[float]], radius: Optional[float]):
    if radius is None:
        nodes = np.ones(space.size, dtype=bool)
    else:
        nodes = space.ball(center, radius)
    cells = nodes[space.simplices].all(axis=-1)
    return nodes, cells


def poincare_terms(u: ScalarField, F: FluxField, p: float,
                   center: Optional[Sequence[float]] = None,
                   radius: Optional[float] = None) -> Tuple[float, float]:
    """
    Poincaré 型不等式的两边（∂ₜu = div F 于 Q = B_ρ × (0,T]）

        LHS = ⨍_Q |u - ū|^p
        RHS = ρ^p ⨍_Q |∇u|^p + (ρ^{p-1} ⨍_Q |F|)^p

    radius 为 None 时 Q 取整个 Ω_T，ρ 取区域半径。
    """
    _same_grid(u.grid, F.grid)
    grid = u.grid
    space = grid.space
    nodes, cells = _region(space, center, radius)
    rho = grid.domain.radius if radius is None else float(radius)
    if not cells.any():
        raise GeometryError(f"region of radius {rho} contains no whole simplex")
    weights = space.node_weights * nodes
    levels = u.values[1:]
    node_volume = grid.dt * len(levels) * weights.sum()
    mean = grid.dt * float((levels @ weights).sum()) / node_volume
    lhs = grid.dt * float((np.abs(levels - mean) ** p @ weights).sum()) / node_volume

    cell_volume = grid.dt * len(levels) * space.simplex_volume * float(cells.sum())
    grad_mags = np.linalg.norm(space.grad(levels), axis=-1)[:, cells]
    flux_mags = np.linalg.norm(F.values[1:], axis=-1)[:, cells]
    grad_mean = grid.dt * space.simplex_volume * float((grad_mags ** p).sum()) / cell_volume
    flux_mean = grid.dt * space.simplex_volume * float(flux_mags.sum()) / cell_volume
    rhs = rho ** p * grad_mean + (rho ** (p - 1) * flux_mean) ** p
    return lhs, rhs


def caccioppoli_terms(u: ScalarField, p: float, eps: float = 0.5,
                      support: float = 0.8) -> Tuple[float, float]:
    """
    非负上解的 Caccioppoli 型估计，作用于 w = u + 1

        LHS = ∬ w^{-1-ε} |∇w|^p φ^p + sup_t ∫ w^{1-ε} φ^p / (1-ε)
        RHS = ε^{-p} ∬ w^{p-1-ε} |∇φ|^p + 2/(ε(1-ε)) ∬ w^{1-ε} |∂ₜφ^p|

    φ = ψ(x) sin²(πt/T)，ψ 为半径 support·R 的光滑鼓包。
    """
    grid = u.grid
    space = grid.space
    domain = grid.domain
    w = u.values + 1.0
    radius = support * domain.radius
    r2 = np.sum((space.coords - domain.center) ** 2, axis=1) / radius ** 2
    psi = np.maximum(0.0, 1.0 - r2) ** 2
    eta = np.sin(np.pi * grid.times / domain.T) ** 2
    phi = np.outer(eta, psi)
    phi_p = phi ** p

    dt = grid.dt
    grad_w = np.linalg.norm(space.grad(w[1:]), axis=-1)
    grad_phi = np.linalg.norm(space.grad(phi[1:]), axis=-1)
    main = dt * float(space.integrate_cells(
        _cell_average(space, w[1:] ** (-1 - eps) * phi_p[1:]) * grad_w ** p).sum())
    sup = float(space.integrate_nodes(w ** (1 - eps) * phi_p).max()) / (1 - eps)
    gradient = dt * float(space.integrate_cells(
        _cell_average(space, w[1:] ** (p - 1 - eps)) * grad_phi ** p).sum())
    rate = dt * float(space.integrate_nodes(w[1:] ** (1 - eps) * np.abs(np.diff(phi_p, axis=0)) / dt).sum())
    lhs = main + sup
    rhs = eps ** (-p) * gradient + 2.0 / (eps * (1 - eps)) * rate
    return lhs, rhs


def gluing_terms(u: ScalarField, F: FluxField, p: float, center: Sequence[float],
                 rho: float, radii: int = 7) -> Tuple[float, float]:
    """
    球平均的时间振荡（在 ρ/2 < r̂ < ρ 中取最小）与 ρ^{p-1} ⨍_Q |F|

    理论上 LHS ≤ 2^{n+2}·RHS。
    """
    _same_grid(u.grid, F.grid)
    grid = u.grid
    space = grid.space
    best = math.inf
    for r in np.linspace(0.5 * rho, rho, radii + 2)[1:-1]:
        nodes = space.ball(center, r)
        weights = space.node_weights * nodes
        if weights.sum() == 0:
            continue
        means = (u.values @ weights) / weights.sum()
        best = min(best, float(means.max() - means.min()))
    _, cells = _region(space, center, rho)
    if not cells.any() or not math.isfinite(best):
        raise GeometryError(f"ball of radius {rho} is not resolved by h={grid.h:.4g}")
    flux_mags = np.linalg.norm(F.values[1:], axis=-1)[:, cells]
    flux_mean = float(flux_mags.mean())
    return best, rho ** (p - 1) * flux_mean


# ==================== 台账条目 ====================

@dataclass(frozen=True)
class LedgerEntry:
    """
    台账条目

    属性:
        name: 条目名
        lhs, rhs: 不等式两边（基础网格）
        constant: 经验常数 LHS / RHS
        bound: 已知常数上界（经验条目为 None）
        refined_constant: 加密网格上的常数
        drift: |refined_constant / constant - 1|
        passed: 是否通过
        note: 说明（跳过的集合、失败原因等）
    """
    name: str
    lhs: float
    rhs: float
    constant: float
    bound: Optional[float] = None
    refined_constant: Optional[float] = None
    drift: Optional[float] = None
    passed: bool = False
    note: str = ''

    def to_dict(self) -> dict:
        return asdict(self)


LEDGER_COLUMNS = ['name', 'lhs', 'rhs', 'constant', 'bound', 'refined_constant', 'drift', 'passed', 'note']


@dataclass(frozen=True)
class Ledger:
    """不等式台账"""
    config: dict
    entries: Tuple[LedgerEntry, ...]
    max_drift: float

    @property
    def passed(self) -> bool:
        return all(entry.passed for entry in self.entries)

    @property
    def failures(self) -> List[str]:
        return [entry.name for entry in self.entries if not entry.passed]

    def entry(self, name: str) -> LedgerEntry:
        for entry in self.entries:
            if entry.name == name:
                return entry
        raise KeyError(name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([entry.to_dict() for entry in self.entries], columns=LEDGER_COLUMNS)

    def to_dict(self) -> dict:
        return to_jsonable({
            'experiment': 'check',
            'config': self.config,
            'max_drift': self.max_drift,
            'entries': [entry.to_dict() for entry in self.entries],
            'failures': self.failures,
            'passed': self.passed,
        })

    def plot_data(self) -> dict:
        names = [entry.name for entry in self.entries]
        series = [{'label': 'base', 'x': list(range(len(names))),
                   'y': [entry.constant for entry in self.entries], 'marker': 'o'},
                  {'label': 'refined', 'x': list(range(len(names))),
                   'y': [math.nan if entry.refined_constant is None else entry.refined_constant
                         for entry in self.entries], 'marker': 's'}]
        return {'title': 'empirical constants', 'xlabel': 'inequality', 'ylabel': 'C = LHS/RHS',
                'logy': True, 'xticks': names, 'series': series}


# ==================== 网格工作区 ====================

class _Workspace:
    """
    一个网格上的共享计算结果（K、balayage、见证通量、容量缓存）

    配置了归档时 balayage 从归档读取，缺失时报 DependencyError。
    """

    def __init__(self, cfg: ExperimentConfig, grid: SpaceTimeGrid,
                 archive: Optional[ArtifactArchive] = None):
        self.cfg = cfg
        self.grid = grid
        self.p = cfg.p
        self.archive = archive
        self.options = cfg.capacity_options()
        self._K: Optional[SetMask] = None
        self._evolution: Optional[EvolutionResult] = None
        self._flux: Optional[FluxField] = None
        self._capacities: Dict[str, float] = {}
        self._fields: Optional[list] = None

    @property
    def K(self) -> SetMask:
        if self._K is None:
            self._K = rasterize(ledger_set(self.cfg), self.grid)
        return self._K

    @property
    def evolution(self) -> EvolutionResult:
        if self._evolution is None:
            if self.archive is not None:
                potential = self.archive.get_field(balayage_key(self.grid), producer='balayage')
                _same_grid(potential.grid, self.grid)
                mask_key = f'K/{grid_tag(self.grid)}'
                if mask_key in self.archive:
                    stored = self.archive.get_mask(mask_key, producer='balayage')
                    if not np.array_equal(stored.values, self.K.values):
                        raise ContractError(f"archived balayage was computed for a different set than {mask_key}")
                self._evolution = EvolutionResult(potential, np.zeros(self.grid.time_steps), self.p)
                logger.info(f"loaded balayage {balayage_key(self.grid)} from archive")
            else:
                self._evolution = balayage(self.K, self.p, tol=self.cfg.tol)
        return self._evolution

    @property
    def potential(self) -> ScalarField:
        return self.evolution.trajectory

    @property
    def flux(self) -> FluxField:
        """∂ₜu = div F 的见证通量"""
        if self._flux is None:
            self._flux = dual_norm_dt(self.potential, self.p, tol=self.cfg.tol).flux
        return self._flux

    def capacity(self, mask: SetMask, key: Optional[str] = None) -> float:
        if key is not None and key in self._capacities:
            return self._capacities[key]
        value = variational_capacity(mask, self.p, self.options).value
        if key is not None:
            self._capacities[key] = value
        return value

    def spec_capacity(self, spec: ShapeSpec) -> Tuple[SetMask, float]:
        mask = rasterize(spec, self.grid)
        return mask, self.capacity(mask, canonical_json(spec.to_dict()))

    def random_fields(self) -> list:
        """延拓检查用的光滑随机场及其延拓"""
        if self._fields is None:
            T = self.grid.domain.T
            fields = []
            for i in range(self.cfg.pairs):
                v1 = DeterministicRNG(self.cfg.seed).spawn(i).smooth_field(self.grid)
                extended = extend_by_solution(v1, 2 * T, self.p, tol=self.cfg.tol)
                fields.append((v1, extended))
            self._fields = fields
        return self._fields


# 每个条目返回 (lhs, rhs, constant, note)
Measurement = Tuple[float, float, float, str]


def _ratio(lhs: float, rhs: float) -> float:
    if rhs > 0:
        return lhs / rhs
    return 0.0 if lhs == 0 else math.inf


def _caccioppoli(ws: _Workspace) -> Measurement:
    lhs, rhs = caccioppoli_terms(ws.potential, ws.p)
    return lhs, rhs, _ratio(lhs, rhs), 'w = u + 1, eps = 1/2'


def _poincare(ws: _Workspace) -> Measurement:
    lhs, rhs = poincare_terms(ws.potential, ws.flux, ws.p)
    return lhs, rhs, _ratio(lhs, rhs), 'F from the dual-norm witness'


def _gluing(ws: _Workspace) -> Measurement:
    domain = ws.grid.domain
    lhs, rhs = gluing_terms(ws.potential, ws.flux, ws.p, domain.center, 0.8 * domain.radius)
    return lhs, rhs, _ratio(lhs, rhs), f'bound 2^(n+2) = {2 ** (domain.n + 2)}'


def _hardy(ws: _Workspace) -> Measurement:
    space = ws.grid.space
    ratios = [hardy_ratio(SpatialField(space, level), ws.p) for level in ws.potential.values[1:]]
    worst = max(ratios, default=0.0)
    return worst, 1.0, worst, 'max over time levels'


def _cylinder_sweep(ws: _Workspace) -> Tuple[List[ShapeSpec], List[str]]:
    cfg = ws.cfg
    center = cfg.set_center(ws.grid.domain)
    specs, skipped = [], []
    for rho in cfg.rhos:
        for tau in cfg.taus:
            spec = ShapeSpec.cylinder(center, cfg.anchor, rho, tau)
            try:
                rasterize(spec, ws.grid)
            except GeometryError:
                skipped.append(f'rho={rho:g},tau={tau:g}')
                continue
            specs.append(spec)
    return specs, skipped


def _skip_note(skipped: List[str]) -> str:
    return f"skipped {', '.join(skipped)}" if skipped else ''


def _measure_bound(ws: _Workspace) -> Measurement:
    n, p = ws.grid.domain.n, ws.p
    specs, skipped = _cylinder_sweep(ws)
    best = (0.0, 0.0, 0.0)
    for spec in specs:
        mask, cap = ws.spec_capacity(spec)
        size = measure(mask)
        rhs = cap ** ((n + p) / n)
        ratio = _ratio(size, rhs)
        if ratio > best[2]:
            best = (size, rhs, ratio)
    return best[0], best[1], best[2], _skip_note(skipped)


def _content_bound(ws: _Workspace) -> Measurement:
    cfg = ws.cfg
    domain = ws.grid.domain
    n, p = domain.n, ws.p
    center = cfg.set_center(domain)
    best = (0.0, 0.0, 0.0)
    skipped = []
    for rho in cfg.rhos:
        spec = parabolic_cylinder(center, domain.T - 2 * rho ** p, rho, p)
        try:
            mask, cap = ws.spec_capacity(spec)
            content = hausdorff_content(mask, float(n), cfg.delta, p).content
        except (GeometryError, ResolutionError) as e:
            skipped.append(f'rho={rho:g}')
            logger.debug(f"content bound skips rho={rho}: {e}")
            continue
        ratio = _ratio(cap, content)
        if ratio > best[2]:
            best = (cap, content, ratio)
    return best[0], best[1], best[2], _skip_note(skipped)


def _subadditivity(ws: _Workspace) -> Measurement:
    p = ws.p
    s = 1.0 / max(p, p / (p - 1))
    K = ws.K
    base = ws.capacity(K, 'K')
    # K₂ = ∅ 时两边相等
    lhs = ws.capacity(K | SetMask.empty(ws.grid), 'K') ** s
    rhs = base ** s
    best = (lhs, rhs, _ratio(lhs, rhs))
    for i in range(ws.cfg.pairs):
        first, second = DeterministicRNG(ws.cfg.seed).spawn(100 + i).cylinder_pair(ws.grid, nested=False)
        k1, c1 = ws.spec_capacity(first)
        k2, c2 = ws.spec_capacity(second)
        union = ws.capacity(k1 | k2) ** s
        parts = c1 ** s + c2 ** s
        ratio = _ratio(union, parts)
        if ratio > best[2]:
            best = (union, parts, ratio)
    return best[0], best[1], best[2], f's = {s:.4g}'


def _monotonicity(ws: _Workspace) -> Measurement:
    best = (0.0, 0.0, 0.0)
    for i in range(ws.cfg.pairs):
        inner, outer = DeterministicRNG(ws.cfg.seed).spawn(200 + i).cylinder_pair(ws.grid, nested=True)
        _, c_inner = ws.spec_capacity(inner)
        _, c_outer = ws.spec_capacity(outer)
        ratio = _ratio(c_inner, c_outer)
        if ratio > best[2]:
            best = (c_inner, c_outer, ratio)
    return best[0], best[1], best[2], 'cap(K1) / cap(K2) for K1 inside K2'


def _domain_comparability(ws: _Workspace) -> Measurement:
    delta = 0.1 * ws.grid.domain.radius
    result = domain_comparability(ws.K, ws.p, delta, ws.options)
    return result.inner, result.outer, result.ratio, f'delta = {delta:.4g}'


def _extension(ws: _Workspace) -> Measurement:
    best = (0.0, 0.0, 0.0)
    for v1, extended in ws.random_fields():
        lhs = w_norm(extended, ws.p, tol=ws.cfg.tol).total
        base = w_norm(v1, ws.p, tol=ws.cfg.tol).total
        rhs = EXTENSION_FACTOR * base + EXTENSION_OFFSET
        ratio = _ratio(lhs, rhs)
        if ratio > best[2]:
            best = (lhs, rhs, ratio)
    return best[0], best[1], best[2], f'|v^|_W <= {EXTENSION_FACTOR:g}|v1|_W + {EXTENSION_OFFSET:g}'


def _energy_identity(ws: _Workspace) -> Measurement:
    worst = None
    for v1, extended in ws.random_fields():
        identity = energy_identity(v1, extended, ws.p)
        if worst is None or identity.defect > worst.defect:
            worst = identity
    if worst is None:
        return 0.0, 0.0, 0.0, 'no fields'
    balance = worst.final + worst.gradient + worst.dissipation
    return balance, worst.initial, worst.defect, 'relative defect of the energy balance'


def _erosion_gap(ws: _Workspace) -> float:
    """|cap(K) - cap(K 内缩一个单元)|"""
    K = ws.K
    inner = erode(K, 1)
    outer = ws.capacity(K, 'K')
    return abs(outer - (ws.capacity(inner, 'K-1') if not inner.is_empty else 0.0))


def _decreasing_limit(base: _Workspace, refined: _Workspace) -> Measurement:
    coarse = _erosion_gap(base)
    fine = _erosion_gap(refined)
    return fine, coarse, _ratio(fine, coarse), 'cap(K) - cap(erode(K)) on the refined grid / on the base grid'


def _riesz_support(ws: _Workspace) -> Measurement:
    mu = riesz_measure(ws.evolution, ws.p, tol=ws.cfg.tol)
    outside = 1.0 - mu.support_fraction(ws.K, cells=1)
    return outside * mu.total, mu.total, outside, 'mass fraction farther than one cell from K'


@dataclass(frozen=True)
class Check:
    """
    台账条目的定义：计算函数与（可选）已知上界

    across_grids 为真时 measure 接收 (基础网格, 加密网格) 两个工作区，
    常数本身就是两网格之比，不再计算漂移。
    """
    name: str
    measure: Callable[..., Measurement]
    bound: Optional[float] = None
    across_grids: bool = False


CHECKS: Tuple[Check, ...] = (
    Check('caccioppoli', _caccioppoli),
    Check('poincare', _poincare),
    Check('gluing', _gluing),
    Check('hardy', _hardy),
    Check('measure_bound', _measure_bound),
    Check('content_bound', _content_bound),
    Check('domain_comparability', _domain_comparability),
    Check('subadditivity', _subadditivity, 1.0 + SUBADDITIVITY_SLACK),
    Check('monotonicity', _monotonicity, 1.0 + SUBADDITIVITY_SLACK),
    Check('extension', _extension, 1.0),
    Check('energy_identity', _energy_identity, ENERGY_DEFECT),
    Check('decreasing_limit', _decreasing_limit, 1.0, across_grids=True),
    Check('riesz_support', _riesz_support, RIESZ_OUTSIDE),
)

CHECK_NAMES = tuple(check.name for check in CHECKS)


def select_checks(names: Sequence[str]) -> List[Check]:
    """按名字选出条目（空为全部）"""
    if not names:
        return list(CHECKS)
    unknown = sorted(set(names) - set(CHECK_NAMES))
    if unknown:
        raise ConfigurationError(f"unknown checks: {', '.join(unknown)}; expected {', '.join(CHECK_NAMES)}")
    return [check for check in CHECKS if check.name in names]


def _evaluate(check: Check, base: _Workspace, refined: Optional[_Workspace],
              max_drift: float) -> LedgerEntry:
    refined_constant = None
    drift = None
    if check.across_grids:
        if refined is None:
            refined = _Workspace(base.cfg, refine(base.grid))
        lhs, rhs, constant, note = check.measure(base, refined)
        refined = None
    else:
        lhs, rhs, constant, note = check.measure(base)
    if refined is not None:
        refined_constant = check.measure(refined)[2]
        if constant > 0 and math.isfinite(constant) and math.isfinite(refined_constant):
            drift = abs(refined_constant / constant - 1.0)
        elif constant == 0 and refined_constant == 0:
            drift = 0.0
        else:
            drift = math.inf

    if check.bound is not None:
        constants = [constant] + ([] if refined_constant is None else [refined_constant])
        passed = all(c <= check.bound for c in constants)
    else:
        passed = math.isfinite(constant) and (drift is None or drift <= max_drift)
    level = logging.INFO if passed else logging.WARNING
    logger.log(level, f"check {check.name}: lhs={lhs:.4g}, rhs={rhs:.4g}, C={constant:.4g}, "
                      f"refined={refined_constant}, drift={drift}, passed={passed}")
    return LedgerEntry(check.name, float(lhs), float(rhs), float(constant), check.bound,
                       refined_constant, drift, bool(passed), note)


def check_inequalities(cfg: ExperimentConfig, archive: Optional[ArtifactArchive] = None) -> Ledger:
    """
    计算台账

    Args:
        cfg: 实验配置（checks 选择条目，refine 控制是否在加密网格上重复）
        archive: 产物归档；给定时 balayage 从归档读取（也可由 cfg.archive 指定路径）

    Raises:
        ConfigurationError: 未知条目名
        DependencyError: 归档缺少 balayage（应先运行 balayage 子命令）
    """
    checks = select_checks(cfg.checks)
    if archive is None and cfg.archive:
        archive = ArtifactArchive.load(cfg.archive, producer='balayage')
    max_drift = get_config().experiment.max_drift
    grid = cfg.grid()
    base = _Workspace(cfg, grid, archive)
    # 归档只保存基础网格的 balayage，加密网格上重新计算
    refined = _Workspace(cfg, refine(grid)) if cfg.refine else None
    logger.info(f"ledger: {len(checks)} checks on {grid_tag(grid)}"
                + (f" and {grid_tag(refined.grid)}" if refined else ''))
    entries = tuple(_evaluate(check, base, refined, max_drift) for check in checks)
    return Ledger(cfg.to_dict(), entries, max_drift)
