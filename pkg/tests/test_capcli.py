"""
Unit tests for the experiment drivers, the inequality ledger and the command line
"""

import json
import math

import numpy as np
import pytest

from core.config import get_config
from core.errors import ConfigurationError, DependencyError, DomainError
from core.parabolic import measure_capacity
from core.report import CapacityReport
from core.stgrid import Domain, FluxField, ScalarField, SetMask, ShapeSpec, build_grid, rasterize
from core.varcap import CapacityOptions, variational_capacity

from capcli.emit import emit, emit_all
from capcli.experiments import (SCALING_COLUMNS, EquivalenceReport, EquivalenceRow, ExperimentConfig,
                                ScalingReport, ScalingRow, loglog_fit, run_cylinder_scaling,
                                run_equivalence, three_capacities)
from capcli.ledger import (CHECK_NAMES, LEDGER_COLUMNS, Check, _Workspace, _evaluate, balayage_key,
                           check_inequalities, poincare_terms, select_checks)
from capcli.main import EXIT_USAGE, build_parser, load_experiment, main
from capcli.monster import (MonsterParams, blowup_ray, check_monster_residual, default_monster_grid,
                            eval_monster, weak_residual)


# ==================== 实验配置 ====================

class TestExperimentConfig:
    """实验配置测试"""

    def test_defaults_from_config(self):
        """测试网格与求解器默认值取自全局配置"""
        cfg = ExperimentConfig()

        assert cfg.nodes == get_config().grid.nodes_per_axis
        assert cfg.tol == get_config().solver.tol
        assert cfg.lower == (-1.0,) and cfg.upper == (1.0,)
        assert cfg.pairs == 20

    def test_unknown_key(self):
        """测试未知键"""
        with pytest.raises(ConfigurationError):
            ExperimentConfig.from_dict({'nodes': 17, 'bogus': 1})

    def test_coarse_grid(self):
        """测试网格过粗"""
        with pytest.raises(ConfigurationError):
            ExperimentConfig(nodes=4)

    def test_assignments(self):
        """测试 key=value 覆盖：JSON 值与字符串值"""
        cfg = ExperimentConfig().with_assignments(['rhos=[0.1,0.2]', 'method=conic', 'nodes=17'])

        assert cfg.rhos == (0.1, 0.2)
        assert cfg.method == 'conic'
        assert cfg.nodes == 17

    def test_bad_assignment(self):
        """测试缺少等号"""
        with pytest.raises(ConfigurationError):
            ExperimentConfig().with_assignments(['nodes'])

    def test_missing_file(self, tmp_path):
        """测试配置文件不存在"""
        with pytest.raises(ConfigurationError):
            ExperimentConfig.from_file(str(tmp_path / 'none.json'))

    def test_from_file(self, tmp_path):
        """测试从文件加载"""
        path = tmp_path / 'exp.json'
        path.write_text(json.dumps({'name': 'demo', 'n': 2, 'nodes': 17, 'p': 3.0}), encoding='utf-8')
        cfg = ExperimentConfig.from_file(str(path))

        assert cfg.name == 'demo'
        assert cfg.lower == (-1.0, -1.0)
        assert cfg.grid().space.shape == (17, 17)

    def test_default_sets(self):
        """测试默认集合族"""
        kinds = [spec.kind for spec in ExperimentConfig().shape_specs()]

        assert kinds == ['cylinder', 'cylinder', 'slice', 'graph', 'union']

    def test_cli_precedence(self, tmp_path):
        """测试文件 < 命令行选项 < --set"""
        path = tmp_path / 'exp.json'
        path.write_text(json.dumps({'nodes': 17, 'steps': 8, 'p': 3.0}), encoding='utf-8')
        args = build_parser().parse_args(['scaling', '--config', str(path), '--nodes', '33',
                                          '--set', 'p=2.5'])
        cfg = load_experiment(args)

        assert cfg.nodes == 33
        assert cfg.steps == 8
        assert cfg.p == 2.5


# ==================== 扫描实验 ====================

class TestExperiments:
    """扫描实验测试"""

    def test_loglog_fit(self):
        """测试幂律拟合斜率"""
        fit = loglog_fit('tau', 0.25, [1.0, 2.0, 4.0], [3.0, 6.0, 12.0])

        assert fit.slope == pytest.approx(1.0)
        assert fit.points == 3

    def test_loglog_fit_degenerate(self):
        """测试不足两个不同的 x"""
        assert loglog_fit('rho', 1.0, [0.5, 0.5], [1.0, 2.0]) is None

    def test_single_point_scaling(self):
        """测试单点扫描：一行、无拟合"""
        cfg = ExperimentConfig(nodes=17, steps=8, rhos=(0.25,), taus=(0.2,), method='conic')
        report = run_cylinder_scaling(cfg)

        assert len(report.rows) == 1
        assert report.fits == ()
        assert report.failures == 0
        assert report.rows[0].value > 0
        assert report.rows[0].bound == pytest.approx(0.25 + 0.2 / 0.25)
        assert list(report.to_frame().columns) == SCALING_COLUMNS

    def test_three_capacities_empty(self, grid_1d):
        """测试空集的三种容量均为 0"""
        values = three_capacities(SetMask.empty(grid_1d), 2.0, None, 1e-6)

        assert values == {'variational': 0.0, 'energy': 0.0, 'measure': 0.0}

    def test_three_capacities_single_balayage(self, grid_1d, monkeypatch):
        """测试能量容量与测度容量共用一次 balayage"""
        import capcli.experiments as experiments
        import core.parabolic as parabolic

        calls = []
        original = parabolic.balayage

        def counting(*args, **kwargs):
            calls.append(args[0].count)
            return original(*args, **kwargs)

        monkeypatch.setattr(parabolic, 'balayage', counting)
        monkeypatch.setattr(experiments, 'balayage', counting)
        K = rasterize(ShapeSpec.cylinder((0.0,), 0.75, 0.25, 0.25), grid_1d)
        values = three_capacities(K, 2.0, CapacityOptions(method='conic'), 1e-6)

        assert len(calls) == 1
        assert values['measure'] == pytest.approx(measure_capacity(K, 2.0, tol=1e-6).value)

    def test_equivalence_band(self):
        """测试等价带 B 与加密变宽的计算"""
        base = (EquivalenceRow('0:cylinder', 'cylinder', {'variational': 2.0, 'energy': 1.0, 'measure': 1.0}),
                EquivalenceRow('1:slice', 'slice', {'variational': 1.0, 'energy': 1.0, 'measure': 0.8}))
        refined = (EquivalenceRow('0:cylinder', 'cylinder', {'variational': 2.2, 'energy': 1.0, 'measure': 1.0}),)
        report = EquivalenceReport({}, base, refined, max_widening=0.25)

        assert report.band == pytest.approx((1.0, 2.0, 2.0))
        assert report.widening == pytest.approx(0.1)
        assert report.passed
        assert not EquivalenceReport({}, base, refined, max_widening=0.05).passed

    def test_equivalence_error_fails(self):
        """测试有集合求解失败时不通过"""
        rows = (EquivalenceRow('0:cylinder', 'cylinder', {}, 'solver failed'),)

        assert not EquivalenceReport({}, rows).passed

    @pytest.mark.slow
    def test_equivalence_refined(self):
        """测试五个标准集合的三种容量可比，加密后等价带变宽不超过 25%"""
        cfg = ExperimentConfig(nodes=33, steps=16, method='conic', refine=True)
        report = run_equivalence(cfg)

        assert len(report.rows) == 5 and len(report.refined_rows) == 5
        assert not any(row.error for row in report.rows + report.refined_rows)
        assert math.isfinite(report.band[2])
        assert report.widening <= 0.25
        assert report.passed

    @pytest.mark.slow
    def test_cylinder_tau_slope(self):
        """测试 τ ≫ ρ^p 时 cap ~ τ：log-log 斜率 1 ± 0.15"""
        cfg = ExperimentConfig(T=2.0, nodes=33, steps=64, rhos=(0.125,), taus=(0.5, 1.0, 1.5),
                               method='conic')
        report = run_cylinder_scaling(cfg)
        tau_fits = [fit for fit in report.fits if fit.kind == 'tau']

        assert report.failures == 0
        assert len(tau_fits) == 1 and tau_fits[0].points == 3
        assert tau_fits[0].slope == pytest.approx(1.0, abs=0.15)

    @pytest.mark.slow
    @pytest.mark.parametrize('p', [2.0, 3.0])
    def test_slice_rho_slope(self, p):
        """测试抛物自相似网格上切片容量 ~ ρⁿ"""
        rhos = (0.125, 0.25, 0.5)
        values = []
        for rho in rhos:
            T = 2 * rho ** p
            grid = build_grid(Domain.ball((0.0,), 2 * rho, T, p), 33, 16)
            K = rasterize(ShapeSpec.slice((0.0,), T, rho), grid)
            values.append(variational_capacity(K, p, CapacityOptions(method='conic')).value)
        fit = loglog_fit('rho', 0.0, rhos, values)

        assert fit.slope == pytest.approx(1.0, abs=0.2)


# ==================== 显式例子 ====================

class TestMonster:
    """显式爆破解测试"""

    def test_origin_value(self):
        """测试 D(0,0) = A^{(p-1)/(p-2)}"""
        params = MonsterParams(A=2.0, tau=1.0, p=3.0)

        assert eval_monster(0.0, 0.0, params) == pytest.approx(4.0)
        assert params.lam == pytest.approx(4.0)

    def test_monotone_in_radius(self):
        """测试 |x| 越大值越大"""
        params = MonsterParams(A=1.0, tau=1.0, p=3.0, n=2)
        values = eval_monster(np.array([[0.0, 0.0], [0.3, 0.4], [0.6, 0.8]]), 0.5, params)

        assert np.all(np.diff(values) > 0)

    def test_blowup_time(self):
        """测试 t ≥ τ 不在定义域内"""
        with pytest.raises(DomainError):
            eval_monster(0.5, 1.0, MonsterParams(A=1.0, tau=1.0, p=3.0))

    def test_needs_p_above_two(self):
        """测试 p ≤ 2"""
        with pytest.raises(ConfigurationError):
            MonsterParams(A=1.0, tau=1.0, p=2.0)

    def test_ray_increasing(self):
        """测试爆破射线上单调增"""
        values = [v for _, v in blowup_ray((1.0,), MonsterParams(A=1.0, tau=1.0, p=3.0))]

        assert all(b > a for a, b in zip(values, values[1:]))

    def test_residual_decays(self):
        """测试加密后弱残差下降，斜率大于 1/2"""
        params = MonsterParams(A=1.0, tau=1.0, p=3.0)
        report = check_monster_residual(params, default_monster_grid(params, 17, 16), refinements=2)
        residuals = [level.max_residual for level in report.levels]

        assert all(b < a for a, b in zip(residuals, residuals[1:]))
        assert report.slope > 0.5
        assert report.blows_up
        assert report.passed

    def test_time_window(self):
        """测试时间窗超过 0.9τ"""
        params = MonsterParams(A=1.0, tau=1.0, p=3.0)
        grid = build_grid(Domain.box((0.5,), (1.5,), 1.0, 3.0), 17, 16)
        with pytest.raises(DomainError):
            weak_residual(params, grid)


# ==================== 输出 ====================

def _scaling_report():
    row = ScalingRow(0.25, 0.2, 1.5, 0.5, 0.5, 0.5, 1.05, 0.0, 1e-7, 1e-8, 12, 0.3, 'conic')
    return ScalingReport({'name': 'demo'}, (row,))


class TestEmit:
    """报告输出测试"""

    def test_json_deterministic(self, tmp_path):
        """测试重复输出字节相同"""
        report = CapacityReport(1.5, 'elliptic', 2.0, residuals={'kkt': 1e-9}, seconds=0.42)
        first = emit(report, 'json', str(tmp_path / 'a'), 'r').read_bytes()
        second = emit(report, 'json', str(tmp_path / 'b'), 'r').read_bytes()

        assert first == second
        assert b'seconds' not in first
        assert json.loads(first)['value'] == 1.5

    def test_empty_report(self, tmp_path):
        """测试空报告输出 {}"""
        path = emit(None, 'json', str(tmp_path), 'empty')

        assert path.read_text(encoding='utf-8') == '{}\n'

    def test_csv_columns(self, tmp_path):
        """测试 CSV 列顺序固定"""
        path = emit(_scaling_report(), 'csv', str(tmp_path), 'scaling')
        header = path.read_text(encoding='utf-8').splitlines()[0]

        assert header == ','.join(SCALING_COLUMNS)

    def test_svg_deterministic(self, tmp_path):
        """测试 SVG 字节确定"""
        first = emit(_scaling_report(), 'plot', str(tmp_path / 'a'), 's').read_bytes()
        second = emit(_scaling_report(), 'plot', str(tmp_path / 'b'), 's').read_bytes()

        assert first == second

    def test_unknown_format(self, tmp_path):
        """测试未知格式"""
        with pytest.raises(ValueError):
            emit(_scaling_report(), 'xml', str(tmp_path), 's')

    def test_emit_all(self, tmp_path):
        """测试多格式输出"""
        paths = emit_all(_scaling_report(), ['json', 'csv'], str(tmp_path), 's')

        assert [p.suffix for p in paths] == ['.json', '.csv']


# ==================== 不等式台账 ====================

class TestLedger:
    """不等式台账测试"""

    def test_poincare_hand_value(self, unit_grid):
        """测试 u = t·sin(πx)、F = -cos(πx)/π 时的常数"""
        u = ScalarField.from_function(unit_grid, lambda x, t: t * np.sin(np.pi * x[:, 0])).with_zero_trace()
        space = unit_grid.space
        midpoints = space.coords[space.simplices].mean(axis=1)[:, 0]
        flux = np.tile((-np.cos(np.pi * midpoints) / np.pi)[None, :, None], (unit_grid.levels, 1, 1))
        lhs, rhs = poincare_terms(u, FluxField(unit_grid, flux), 2.0)

        expected_lhs = 1 / 6 - 1 / math.pi ** 2
        expected_rhs = 0.25 * math.pi ** 2 / 6 + (2 / math.pi ** 2 * 0.5) ** 2
        assert lhs / rhs == pytest.approx(expected_lhs / expected_rhs, rel=0.1)

    def test_select_checks(self):
        """测试条目选择保持固定顺序"""
        assert [c.name for c in select_checks(['hardy', 'poincare'])] == ['poincare', 'hardy']
        assert len(select_checks([])) == len(CHECK_NAMES)
        with pytest.raises(ConfigurationError):
            select_checks(['bogus'])

    def test_subset_run(self):
        """测试只运行部分条目"""
        cfg = ExperimentConfig(nodes=17, steps=8, refine=False, pairs=1, method='conic',
                               checks=('poincare', 'hardy', 'energy_identity'))
        ledger = check_inequalities(cfg)

        assert [e.name for e in ledger.entries] == ['poincare', 'hardy', 'energy_identity']
        assert all(math.isfinite(e.constant) for e in ledger.entries)
        assert ledger.entry('energy_identity').passed
        assert ledger.entry('energy_identity').bound == 0.01
        assert list(ledger.to_frame().columns) == LEDGER_COLUMNS
        assert ledger.to_dict()['experiment'] == 'check'

    def test_across_grids_uses_refined_grid(self):
        """测试跨网格条目在未开启 refine 时也拿到加密网格，且常数不超过上界才通过"""
        cfg = ExperimentConfig(nodes=17, steps=8, refine=False)
        base = _Workspace(cfg, cfg.grid())
        seen = []

        def shrinking(coarse, fine):
            seen.append((coarse.grid.space.nodes_per_axis, fine.grid.space.nodes_per_axis,
                         fine.grid.time_steps))
            return 0.5, 1.0, 0.5, ''

        entry = _evaluate(Check('shrinking', shrinking, 1.0, across_grids=True), base, None, 0.25)
        assert seen == [(17, 33, 16)]
        assert entry.passed
        assert entry.refined_constant is None and entry.drift is None

        growing = Check('growing', lambda coarse, fine: (2.0, 1.0, 2.0, ''), 1.0, across_grids=True)
        assert not _evaluate(growing, base, None, 0.25).passed

    def test_decreasing_limit_gap_shrinks(self):
        """测试 |cap(K) - cap(内缩 K)| 在加密网格上变小"""
        cfg = ExperimentConfig(nodes=17, steps=8, refine=False, method='conic',
                               checks=('decreasing_limit',))
        entry = check_inequalities(cfg).entry('decreasing_limit')

        assert entry.bound == 1.0
        assert 0 < entry.lhs <= entry.rhs
        assert entry.constant == pytest.approx(entry.lhs / entry.rhs)
        assert entry.passed

    def test_missing_archive(self, tmp_path):
        """测试归档缺失时指出前置操作"""
        cfg = ExperimentConfig(nodes=17, steps=8, refine=False, checks=('poincare',),
                               archive=str(tmp_path / 'none.pack'))
        with pytest.raises(DependencyError) as info:
            check_inequalities(cfg)

        assert info.value.producer == 'balayage'

    def test_balayage_key(self, grid_1d):
        """测试归档条目名"""
        assert balayage_key(grid_1d) == 'balayage/33x8'


# ==================== 命令行 ====================

class TestMain:
    """命令行退出码测试"""

    def test_unknown_check(self, tmp_path):
        """测试未知条目名返回 2"""
        assert main(['check', '--only', 'bogus', '--out', str(tmp_path)]) == EXIT_USAGE

    def test_monster_needs_p(self, tmp_path):
        """测试 p ≤ 2 返回 2"""
        assert main(['monster', '--p', '2', '--out', str(tmp_path)]) == EXIT_USAGE

    def test_bad_set_index(self, tmp_path):
        """测试集合编号越界返回 2"""
        assert main(['cap-var', '--set-index', '9', '--out', str(tmp_path)]) == EXIT_USAGE

    def test_monster_run(self, tmp_path):
        """测试显式例子输出 JSON"""
        code = main(['monster', '--p', '3', '--nodes', '17', '--steps', '16', '--refinements', '1',
                     '--out', str(tmp_path)])
        data = json.loads((tmp_path / 'monster-monster.json').read_text(encoding='utf-8'))

        assert code in (0, 1)
        assert data['experiment'] == 'monster'
        assert len(data['levels']) == 2

    def test_cap_elliptic(self, tmp_path):
        """测试椭圆容量子命令（一维闭式 2/(1-ρ)）"""
        code = main(['cap-elliptic', '--nodes', '33', '--out', str(tmp_path), '--format', 'json',
                     '--format', 'csv'])
        data = json.loads((tmp_path / 'cap-elliptic-cap-elliptic.json').read_text(encoding='utf-8'))

        assert code == 0
        assert data['value'] == pytest.approx(2.0 / 0.75, rel=0.02)
        assert (tmp_path / 'cap-elliptic-cap-elliptic.csv').exists()
