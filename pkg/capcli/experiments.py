"""
实验驱动

本模块提供命令行各子命令共用的实验配置与两类扫描实验：
- ExperimentConfig: 实验配置（JSON 键值文档，未知键报错）
- run_cylinder_scaling: 柱体容量随 (ρ, τ) 的标度律
- run_equivalence: 三种容量的等价带

扫描点可以分发到进程池；结果按参数排序后输出，与完成顺序无关。
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import combinations
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import json
import logging
import math
import time

import numpy as np
import pandas as pd
from scipy import stats

from core.config import get_config
from core.errors import CapacityError, ConfigurationError
from core.parabolic import balayage, energy_norm, measure_capacity
from core.report import to_jsonable
from core.stgrid import Domain, ShapeSpec, SpaceTimeGrid, build_grid, rasterize, refine
from core.varcap import METHODS, CapacityOptions, cylinder_bound, variational_capacity

logger = logging.getLogger(__name__)


def _grid_default(name: str):
    return field(default_factory=lambda: getattr(get_config().grid, name))


def _solver_default(name: str):
    return field(default_factory=lambda: getattr(get_config().solver, name))


def _experiment_default(name: str):
    return field(default_factory=lambda: getattr(get_config().experiment, name))


@dataclass
class ExperimentConfig:
    """
    实验配置

    未给出的网格、求解器与实验字段取全局 CONFIG 的默认值。

    属性:
        name: 实验名（输出文件名前缀）
        n, lower, upper, shape, T, p: 区域与指数
        nodes, steps: 网格
        center, t0: 柱体族的中心与锚定时刻（默认为区域中心与 T）
        rhos, taus: 扫描的半径与时长
        sets: 等价实验的集合描述（ShapeSpec.to_dict 格式，默认五个标准集合）
        s, delta: Hausdorff 容度的维数与尺度（s 默认为 n）
        method, tol: 容量求解方法与容差
        seed, workers, pairs: 随机检查的种子、进程数与随机对数
        refine: 是否在加密网格上重复，以检查常数的稳定性
        fit_regime: τ 拟合只用 τ ≥ fit_regime·ρ^p 的点
        checks: 要运行的台账条目（空为全部）
        archive: 产物归档文件路径
        monster_A, monster_tau: 显式例子的参数
        out: 输出目录
    """
    name: str = 'experiment'
    n: int = 1
    lower: Tuple[float, ...] = ()
    upper: Tuple[float, ...] = ()
    shape: str = 'box'
    T: float = 1.0
    p: float = 2.0
    nodes: int = _grid_default('nodes_per_axis')
    steps: int = _grid_default('time_steps')
    center: Tuple[float, ...] = ()
    t0: Optional[float] = None
    rhos: Tuple[float, ...] = (0.125, 0.25, 0.5)
    taus: Tuple[float, ...] = (0.1, 0.2, 0.4)
    sets: Tuple[dict, ...] = ()
    s: Optional[float] = None
    delta: float = 1.0
    method: str = _solver_default('capacity_method')
    tol: float = _solver_default('tol')
    seed: int = _experiment_default('seed')
    workers: int = _experiment_default('workers')
    pairs: int = 20
    refine: bool = True
    fit_regime: float = 1.0
    checks: Tuple[str, ...] = ()
    archive: Optional[str] = None
    monster_A: float = 1.0
    monster_tau: float = 1.0
    out: str = field(default_factory=lambda: get_config().output.directory)

    def __post_init__(self):
        for name in ('lower', 'upper', 'center', 'rhos', 'taus', 'checks', 'sets'):
            value = getattr(self, name)
            if isinstance(value, (int, float)):
                value = (value,)
            setattr(self, name, tuple(value))
        if not self.lower:
            self.lower = (-1.0,) * self.n
        if not self.upper:
            self.upper = (1.0,) * self.n
        if len(self.lower) == 1 and self.n > 1:
            self.lower = self.lower * self.n
        if len(self.upper) == 1 and self.n > 1:
            self.upper = self.upper * self.n
        self.lower = tuple(float(a) for a in self.lower)
        self.upper = tuple(float(b) for b in self.upper)
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown capacity method '{self.method}'")
        if self.nodes < 8 or self.steps < 4:
            raise ConfigurationError(f"grid too coarse: nodes={self.nodes}, steps={self.steps}")
        if any(not r > 0 for r in self.rhos) or any(t < 0 for t in self.taus):
            raise ConfigurationError("rhos must be positive and taus non-negative")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")
        if self.s is not None and not self.s > 0:
            raise ConfigurationError(f"s must be positive, got {self.s}")
        # 区域参数在此校验
        self.domain()

    # ---------- 构造 ----------

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown experiment keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, filename: str) -> 'ExperimentConfig':
        path = Path(filename)
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigurationError(f"experiment config {path} not found") from e
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"experiment config {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"experiment config {path} must hold a JSON object")
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> 'ExperimentConfig':
        """覆盖字段（值为 None 的项忽略）"""
        overrides = {k: v for k, v in overrides.items() if v is not None}
        known = {f.name for f in fields(self)}
        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ConfigurationError(f"unknown experiment keys: {', '.join(unknown)}")
        return replace(self, **overrides)

    def with_assignments(self, assignments: Sequence[str]) -> 'ExperimentConfig':
        """
        应用 key=value 形式的覆盖，值按 JSON 解析，失败时作为字符串

        例如 --set rhos=[0.1,0.2] --set method=conic
        """
        overrides = {}
        for item in assignments or ():
            key, sep, raw = item.partition('=')
            if not sep:
                raise ConfigurationError(f"expected key=value, got '{item}'")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            overrides[key.strip()] = value
        return self.with_overrides(**overrides)

    def to_dict(self) -> dict:
        return to_jsonable(asdict(self))

    # ---------- 派生对象 ----------

    def domain(self) -> Domain:
        return Domain(self.n, self.lower, self.upper, self.T, self.p, self.shape)

    def grid(self) -> SpaceTimeGrid:
        return build_grid(self.domain(), self.nodes, self.steps)

    def capacity_options(self) -> CapacityOptions:
        return CapacityOptions.from_config(method=self.method, tol=self.tol)

    @property
    def dimension(self) -> float:
        return float(self.n) if self.s is None else float(self.s)

    @property
    def anchor(self) -> float:
        return self.T if self.t0 is None else float(self.t0)

    def set_center(self, domain: Optional[Domain] = None) -> Tuple[float, ...]:
        domain = domain or self.domain()
        return self.center if self.center else tuple(float(c) for c in domain.center)

    def shape_specs(self) -> List[ShapeSpec]:
        """等价实验的集合；未配置时为两个柱体、一个切片、一个图像集与一个两柱体并集"""
        if self.sets:
            return [ShapeSpec.from_dict(spec) for spec in self.sets]
        domain = self.domain()
        R = domain.radius
        T = self.T
        c = np.asarray(self.set_center(domain))
        shift = np.zeros(self.n)
        shift[0] = 0.45 * R
        def point(x):
            return tuple(float(v) for v in x)

        return [
            ShapeSpec.cylinder(point(c), 0.75 * T, 0.25 * R, 0.25 * T),
            ShapeSpec.cylinder(point(c), T, 0.4 * R, 0.5 * T),
            ShapeSpec.slice(point(c), 0.5 * T, 0.3 * R),
            ShapeSpec.graph(point(c), 0.25 * T, 0.3 * R, 0.5 * T),
            ShapeSpec.union([ShapeSpec.cylinder(point(c - shift), 0.5 * T, 0.2 * R, 0.25 * T),
                             ShapeSpec.cylinder(point(c + shift), T, 0.2 * R, 0.25 * T)]),
        ]


# ==================== 拟合 ====================

@dataclass(frozen=True)
class LogLogFit:
    """
    log-log 线性回归

    属性:
        kind (str): 'tau'（固定 ρ）或 'rho'（固定 τ/ρ^p）
        fixed (float): 固定的参数值
        slope, intercept, r_value, stderr: scipy.stats.linregress 的结果
        points (int): 参与拟合的点数
    """
    kind: str
    fixed: float
    slope: float
    intercept: float
    r_value: float
    stderr: float
    points: int

    def to_dict(self) -> dict:
        return asdict(self)


def loglog_fit(kind: str, fixed: float, x: Sequence[float], y: Sequence[float]) -> Optional[LogLogFit]:
    """对正值点做 log y ~ log x 回归；少于两个不同的 x 时返回 None"""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    keep = (x > 0) & (y > 0) & np.isfinite(y)
    x, y = x[keep], y[keep]
    if np.unique(x).size < 2:
        return None
    result = stats.linregress(np.log(x), np.log(y))
    return LogLogFit(kind, float(fixed), float(result.slope), float(result.intercept),
                     float(result.rvalue), float(result.stderr), int(x.size))


# ==================== 柱体标度 ====================

@dataclass(frozen=True)
class ScalingRow:
    """单个 (ρ, τ) 点的结果；求解失败时 error 非空、数值为 NaN"""
    rho: float
    tau: float
    value: float
    grad: float
    dual: float
    sup: float
    bound: float
    obstacle: float
    coupling: float
    gap: float
    iterations: int
    seconds: float
    method: str
    error: Optional[str] = None

    @property
    def ratio(self) -> float:
        return self.value / self.bound if self.bound > 0 else float('nan')


SCALING_COLUMNS = ['rho', 'tau', 'value', 'grad', 'dual', 'supL2', 'bound', 'ratio',
                   'obstacle', 'coupling', 'gap', 'iterations', 'method', 'error']


@dataclass(frozen=True)
class ScalingReport:
    """柱体标度实验报告"""
    config: dict
    rows: Tuple[ScalingRow, ...]
    fits: Tuple[LogLogFit, ...] = ()

    @property
    def failures(self) -> int:
        return sum(1 for row in self.rows if row.error)

    @property
    def band(self) -> Tuple[float, float]:
        """cap / (ρⁿ + τρ^{n-p}) 的范围"""
        ratios = [row.ratio for row in self.rows if not row.error and math.isfinite(row.ratio)]
        if not ratios:
            return (float('nan'), float('nan'))
        return (min(ratios), max(ratios))

    def to_dict(self) -> dict:
        lo, hi = self.band
        return to_jsonable({
            'experiment': 'scaling',
            'config': self.config,
            'rows': self.to_frame().to_dict(orient='records'),
            'fits': [fit.to_dict() for fit in self.fits],
            'band': {'min': lo, 'max': hi},
            'failures': self.failures,
        })

    def to_frame(self) -> pd.DataFrame:
        records = [[row.rho, row.tau, row.value, row.grad, row.dual, row.sup, row.bound, row.ratio,
                    row.obstacle, row.coupling, row.gap, row.iterations, row.method,
                    row.error] for row in self.rows]
        return pd.DataFrame(records, columns=SCALING_COLUMNS)

    def plot_data(self) -> dict:
        series = []
        for rho in sorted({row.rho for row in self.rows}):
            points = [(row.tau, row.value) for row in self.rows
                      if row.rho == rho and row.tau > 0 and row.value > 0]
            if points:
                series.append({'label': f'rho={rho:g}', 'x': [x for x, _ in points],
                               'y': [y for _, y in points]})
        return {'title': 'cylinder capacity scaling', 'xlabel': 'tau', 'ylabel': 'cap_var',
                'loglog': True, 'series': series}


def _scaling_point(payload: dict) -> ScalingRow:
    """单点求解（进程池工作函数）"""
    cfg = ExperimentConfig.from_dict(payload['config'])
    rho, tau = payload['rho'], payload['tau']
    center = cfg.set_center()
    if cfg.n == 1:
        # 一维时取 Ω = B_{2ρ}
        domain = Domain.ball(center, 2 * rho, cfg.T, cfg.p)
    else:
        domain = cfg.domain()
    started = time.perf_counter()
    bound = cylinder_bound([ShapeSpec.cylinder(center, cfg.anchor, rho, tau)], cfg.n, cfg.p)
    try:
        grid = build_grid(domain, cfg.nodes, cfg.steps)
        K = rasterize(ShapeSpec.cylinder(center, cfg.anchor, rho, tau), grid)
        report = variational_capacity(K, cfg.p, cfg.capacity_options())
    except CapacityError as e:
        logger.warning(f"scaling point rho={rho}, tau={tau} failed: {e}")
        nan = float('nan')
        return ScalingRow(rho, tau, nan, nan, nan, nan, bound, nan, nan, nan, 0,
                          time.perf_counter() - started, cfg.method, str(e))
    terms = report.terms
    return ScalingRow(rho, tau, report.value, terms.grad, terms.dual, terms.sup, bound,
                      report.residuals['obstacle'], report.residuals['coupling'], report.residuals['gap'],
                      report.iterations, report.seconds, report.extras.get('method', cfg.method))


def _run_points(payloads: List[dict], worker, workers: int) -> list:
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(worker, payloads))
    return [worker(payload) for payload in payloads]


def run_cylinder_scaling(cfg: ExperimentConfig) -> ScalingReport:
    """
    (ρ, τ) 扫描

    τ 拟合：固定 ρ，用 τ ≥ fit_regime·ρ^p 的点拟合 log cap ~ log τ；
    ρ 拟合：固定 τ/ρ^p（切片为 0），拟合 log cap ~ log ρ。
    单点失败记录在行中，扫描继续。
    """
    payloads = [{'config': cfg.to_dict(), 'rho': float(rho), 'tau': float(tau)}
                for rho in cfg.rhos for tau in cfg.taus]
    logger.info(f"scaling: {len(payloads)} points, workers={cfg.workers}")
    rows = sorted(_run_points(payloads, _scaling_point, cfg.workers), key=lambda r: (r.rho, r.tau))

    fits = []
    for rho in sorted({row.rho for row in rows}):
        chosen = [row for row in rows if row.rho == rho and not row.error
                  and row.tau > 0 and row.tau >= cfg.fit_regime * rho ** cfg.p]
        fit = loglog_fit('tau', rho, [row.tau for row in chosen], [row.value for row in chosen])
        if fit is not None:
            fits.append(fit)
    groups: Dict[float, List[ScalingRow]] = {}
    for row in rows:
        if not row.error:
            groups.setdefault(round(row.tau / row.rho ** cfg.p, 9), []).append(row)
    for ratio in sorted(groups):
        chosen = groups[ratio]
        fit = loglog_fit('rho', ratio, [row.rho for row in chosen], [row.value for row in chosen])
        if fit is not None:
            fits.append(fit)
    for fit in fits:
        logger.info(f"fit {fit.kind} (fixed {fit.fixed:g}): slope={fit.slope:.3f} over {fit.points} points")
    return ScalingReport(cfg.to_dict(), tuple(rows), tuple(fits))


# ==================== 容量等价 ====================

CAPACITY_KINDS = ('variational', 'energy', 'measure')


@dataclass(frozen=True)
class EquivalenceRow:
    """一个集合的三种容量"""
    label: str
    kind: str
    values: Dict[str, float]
    error: Optional[str] = None

    @property
    def ratios(self) -> Dict[str, float]:
        out = {}
        for a, b in combinations(CAPACITY_KINDS, 2):
            x, y = self.values.get(a, float('nan')), self.values.get(b, float('nan'))
            out[f'{a}/{b}'] = x / y if y > 0 else float('nan')
        return out


def _band(rows: Sequence[EquivalenceRow]) -> Tuple[float, float, float]:
    """(最小比值, 最大比值, B)，B 为使所有比值落在 [1/B, B] 的最小值"""
    ratios = [r for row in rows if not row.error for r in row.ratios.values() if math.isfinite(r) and r > 0]
    if not ratios:
        return (float('nan'), float('nan'), float('nan'))
    lo, hi = min(ratios), max(ratios)
    return (lo, hi, max(hi, 1.0 / lo))


@dataclass(frozen=True)
class EquivalenceReport:
    """
    三种容量的等价带

    属性:
        rows: 基础网格上的结果
        refined_rows: 加密网格上的结果（未加密时为空）
        max_widening: 加密后 B 允许的相对变宽
    """
    config: dict
    rows: Tuple[EquivalenceRow, ...]
    refined_rows: Tuple[EquivalenceRow, ...] = ()
    max_widening: float = 0.25

    @property
    def band(self) -> Tuple[float, float, float]:
        return _band(self.rows)

    @property
    def refined_band(self) -> Optional[Tuple[float, float, float]]:
        return _band(self.refined_rows) if self.refined_rows else None

    @property
    def widening(self) -> Optional[float]:
        refined = self.refined_band
        if refined is None or not math.isfinite(self.band[2]):
            return None
        return refined[2] / self.band[2] - 1.0

    @property
    def passed(self) -> bool:
        if any(row.error for row in self.rows + self.refined_rows):
            return False
        widening = self.widening
        return widening is None or widening <= self.max_widening

    def to_frame(self) -> pd.DataFrame:
        records = []
        for level, rows in (('base', self.rows), ('refined', self.refined_rows)):
            for row in rows:
                record = {'grid': level, 'label': row.label, 'kind': row.kind}
                record.update({k: row.values.get(k, float('nan')) for k in CAPACITY_KINDS})
                record.update(row.ratios)
                record['error'] = row.error
                records.append(record)
        columns = ['grid', 'label', 'kind', *CAPACITY_KINDS,
                   *[f'{a}/{b}' for a, b in combinations(CAPACITY_KINDS, 2)], 'error']
        return pd.DataFrame(records, columns=columns)

    def to_dict(self) -> dict:
        lo, hi, B = self.band
        refined = self.refined_band
        return to_jsonable({
            'experiment': 'equivalence',
            'config': self.config,
            'rows': self.to_frame().to_dict(orient='records'),
            'band': {'min': lo, 'max': hi, 'B': B},
            'refined_band': None if refined is None else {'min': refined[0], 'max': refined[1], 'B': refined[2]},
            'widening': self.widening,
            'passed': self.passed,
        })

    def plot_data(self) -> dict:
        labels = [row.label for row in self.rows]
        series = [{'label': kind, 'x': list(range(len(labels))),
                   'y': [row.values.get(kind, float('nan')) for row in self.rows], 'marker': 'o'}
                  for kind in CAPACITY_KINDS]
        return {'title': 'capacity equivalence', 'xlabel': 'set', 'ylabel': 'capacity',
                'logy': True, 'xticks': labels, 'series': series}


def three_capacities(K, p: float, options: CapacityOptions, tol: float) -> Dict[str, float]:
    """cap_var、‖balayage‖_en 与测度容量"""
    if K.is_empty:
        return {kind: 0.0 for kind in CAPACITY_KINDS}
    variational = variational_capacity(K, p, options).value
    potential = balayage(K, p, tol=tol)
    energy = energy_norm(potential.trajectory, p)
    measure = measure_capacity(K, p, tol=tol, evolution=potential).value
    return {'variational': variational, 'energy': energy, 'measure': measure}


def _equivalence_point(payload: dict) -> EquivalenceRow:
    cfg = ExperimentConfig.from_dict(payload['config'])
    grid = cfg.grid()
    if payload['refined']:
        grid = refine(grid)
    spec = ShapeSpec.from_dict(payload['spec'])
    label = payload['label']
    try:
        K = rasterize(spec, grid)
        values = three_capacities(K, cfg.p, cfg.capacity_options(), cfg.tol)
    except CapacityError as e:
        logger.warning(f"equivalence set {label} failed: {e}")
        return EquivalenceRow(label, spec.kind, {}, str(e))
    logger.info(f"equivalence {label}: " + ', '.join(f"{k}={v:.4g}" for k, v in values.items()))
    return EquivalenceRow(label, spec.kind, values)


def run_equivalence(cfg: ExperimentConfig) -> EquivalenceReport:
    """
    对每个集合计算 {cap_var, ‖balayage‖_en, 测度容量} 及两两比值

    cfg.refine 为真时在加密网格上重复，报告等价带的变宽。
    """
    specs = cfg.shape_specs()
    levels = (False, True) if cfg.refine else (False,)
    payloads = [{'config': cfg.to_dict(), 'spec': spec.to_dict(), 'label': f'{i}:{spec.kind}',
                 'refined': refined}
                for refined in levels for i, spec in enumerate(specs)]
    results = _run_points(payloads, _equivalence_point, cfg.workers)
    base = tuple(row for row, payload in zip(results, payloads) if not payload['refined'])
    refined = tuple(row for row, payload in zip(results, payloads) if payload['refined'])
    report = EquivalenceReport(cfg.to_dict(), base, refined, get_config().experiment.band_widening)
    lo, hi, B = report.band
    logger.info(f"equivalence band [{lo:.4g}, {hi:.4g}], B={B:.4g}, widening={report.widening}")
    return report
