"""
Unit tests for the discretization core

覆盖：配置、错误类型、确定性随机数、报告序列化、时空网格与集合、产物归档
"""

import json
from pathlib import Path

import numpy as np
import pytest

from core.archive import MAGIC_COMPRESSED, MAGIC_RAW, ArtifactArchive
from core.config import CONFIG, Config, get_config
from core.errors import (CapacityError, ConfigurationError, ContractError, DependencyError,
                         GeometryError, SolverError)
from core.report import CapacityReport, WNormBreakdown, canonical_json, digest, to_jsonable
from core.rng import DeterministicRNG
from core.stgrid import (Domain, FluxField, ScalarField, SetMask, ShapeSpec, build_grid, dilate, div,
                         erode, grad, inner_cells, inner_nodes, lp_norm_grad, measure,
                         mollified_indicator, parabolic_cylinder, rasterize, raw_mask, refine,
                         sup_t_l2)


# ==================== Config 测试 ====================

class TestConfig:
    """全局配置测试"""

    def test_defaults_loaded(self):
        """测试默认值来自 config.json"""
        config = get_config()

        assert config.grid.nodes_per_axis == 65
        assert config.solver.capacity_method in ('pdhg', 'conic')
        assert isinstance(config.solver.eps_ladder, tuple)

    def test_schema_doc_exists(self):
        """测试模块说明里引用的字段文档存在"""
        import core.config as module
        root = Path(module.__file__).resolve().parent.parent
        referenced = [word for word in module.__doc__.split() if word.startswith('docs/')]

        assert referenced
        for relative in referenced:
            assert (root / relative).is_file(), relative

    def test_load_and_save(self, tmp_path):
        """测试保存后重新加载"""
        config = Config()
        config.solver.tol = 1e-8
        path = tmp_path / 'config.json'
        config.save_to_file(str(path))

        other = Config()
        assert other.load_from_file(str(path))
        assert other.solver.tol == 1e-8

    def test_missing_file(self, tmp_path):
        """测试文件不存在时保留默认值"""
        config = Config()

        assert not config.load_from_file(str(tmp_path / 'missing.json'))
        assert config.grid.time_steps == 32

    def test_unknown_key_rejected(self, tmp_path):
        """测试未知字段报错"""
        path = tmp_path / 'bad.json'
        path.write_text(json.dumps({'grid': {'cells': 3}}))

        with pytest.raises(ConfigurationError):
            Config().load_from_file(str(path))

    def test_malformed_json(self, tmp_path):
        """测试 JSON 格式错误"""
        path = tmp_path / 'bad.json'
        path.write_text('{grid: ')

        with pytest.raises(ConfigurationError):
            Config().load_from_file(str(path))

    def test_global_instance(self):
        """测试全局实例"""
        assert get_config() is CONFIG
        assert CONFIG.to_dict()['experiment']['max_drift'] == 0.25


# ==================== Errors 测试 ====================

class TestErrors:
    """错误类型测试"""

    def test_hierarchy(self):
        """测试继承关系"""
        assert issubclass(ConfigurationError, CapacityError)
        assert issubclass(ConfigurationError, ValueError)
        assert issubclass(SolverError, RuntimeError)
        assert issubclass(DependencyError, LookupError)

    def test_solver_error_fields(self):
        """测试求解器错误携带残差与步号"""
        error = SolverError("no convergence", residual=1e-3, iterations=7, step=4)

        assert error.step == 4
        assert 'step=4' in str(error)
        assert 'iterations=7' in str(error)

    def test_dependency_names_producer(self):
        """测试依赖错误指明生成操作"""
        error = DependencyError("artifact missing", 'balayage')

        assert error.producer == 'balayage'
        assert '`balayage`' in str(error)


# ==================== DeterministicRNG 测试 ====================

class TestDeterministicRNG:
    """DeterministicRNG 测试"""

    def test_determinism(self):
        """测试确定性"""
        rng1 = DeterministicRNG(12345)
        rng2 = DeterministicRNG(12345)

        for _ in range(100):
            assert rng1.range(0, 100) == rng2.range(0, 100)

    def test_different_seeds(self):
        """测试不同种子"""
        rng1 = DeterministicRNG(12345)
        rng2 = DeterministicRNG(54321)

        values1 = [rng1.range(0, 100) for _ in range(10)]
        values2 = [rng2.range(0, 100) for _ in range(10)]

        assert values1 != values2

    def test_range(self):
        """测试范围"""
        rng = DeterministicRNG(12345)

        for _ in range(1000):
            val = rng.range(10, 20)
            assert 10 <= val <= 20

    def test_state_roundtrip(self):
        """测试状态保存与恢复"""
        rng = DeterministicRNG(7)
        state = rng.get_state()
        first = rng.uniform_range(0.0, 1.0)
        rng.set_state(state)

        assert rng.uniform_range(0.0, 1.0) == first

    def test_spawn_independent(self):
        """测试子流可复现且互不相同"""
        a = DeterministicRNG(3).spawn(1).uniform_range(0.0, 1.0)
        b = DeterministicRNG(3).spawn(1).uniform_range(0.0, 1.0)
        c = DeterministicRNG(3).spawn(2).uniform_range(0.0, 1.0)

        assert a == b
        assert a != c

    def test_smooth_field_zero_trace(self, grid_1d):
        """测试光滑随机场侧边迹为零"""
        v = DeterministicRNG(1).smooth_field(grid_1d)

        assert v.has_zero_trace
        assert np.abs(v.values).max() > 0

    def test_cylinder_pair_nested(self, grid_1d):
        """测试嵌套柱体对"""
        for seed in range(5):
            inner, outer = DeterministicRNG(seed).cylinder_pair(grid_1d, nested=True)

            assert inner.center == outer.center
            assert inner.radius <= outer.radius
            assert inner.t0 <= outer.t0 + 1e-12
            assert inner.t0 - inner.duration >= outer.t0 - outer.duration - 1e-12

    def test_cylinder_pair_disjoint(self, grid_1d):
        """测试互不相交的柱体对"""
        for seed in range(5):
            first, second = DeterministicRNG(seed).cylinder_pair(grid_1d, nested=False)
            K1 = rasterize(first, grid_1d)
            K2 = rasterize(second, grid_1d)

            assert not np.any(K1.values & K2.values)


# ==================== Report 测试 ====================

class TestReport:
    """报告序列化测试"""

    def test_to_jsonable(self):
        """测试 numpy 类型与非有限值的转换"""
        data = to_jsonable({'a': np.float64(1.5), 'b': np.arange(2), 'c': float('nan'),
                            'd': float('inf'), 'e': (np.bool_(True),)})

        assert data == {'a': 1.5, 'b': [0, 1], 'c': None, 'd': 'inf', 'e': [True]}

    def test_canonical_json_sorted(self):
        """测试键排序"""
        assert canonical_json({'b': 1, 'a': 2}) == '{"a":2,"b":1}'
        assert digest({'b': 1, 'a': 2}) == digest({'a': 2, 'b': 1})

    def test_hash_ignores_timing(self):
        """测试耗时不影响哈希"""
        terms = WNormBreakdown(1.0, 2.0, 3.0)
        a = CapacityReport(6.0, 'variational', 2.0, terms=terms, seconds=0.1)
        b = CapacityReport(6.0, 'variational', 2.0, terms=terms, seconds=9.0)

        assert terms.total == 6.0
        assert a.compute_hash() == b.compute_hash()
        assert 'seconds' not in a.to_dict()
        assert a.to_dict(timings=True)['seconds'] == 0.1

    def test_terms_keys(self):
        """测试分项的键名"""
        assert set(WNormBreakdown(1.0, 0.0, 0.0).to_dict()) == {'grad', 'dual', 'supL2'}


# ==================== 网格测试 ====================

class TestDomain:
    """区域测试"""

    def test_box(self):
        """测试盒子区域"""
        domain = Domain.box((-1.0,), (1.0,), 1.0)

        assert domain.extents == (2.0,)
        assert domain.radius == 1.0
        assert domain.center[0] == 0.0

    def test_invalid(self):
        """测试非法参数"""
        with pytest.raises(ConfigurationError):
            Domain.box((0.0,), (1.0,), 1.0, p=1.0)
        with pytest.raises(ConfigurationError):
            Domain.box((0.0,), (1.0,), 0.0)
        with pytest.raises(ConfigurationError):
            Domain(3, (0.0,) * 3, (1.0,) * 3, 1.0)
        with pytest.raises(ConfigurationError):
            Domain.ball((0.0,), -1.0, 1.0)

    def test_ball_free_nodes(self):
        """测试球区域的内部节点"""
        grid = build_grid(Domain.ball((0.0, 0.0), 1.0, 1.0), 17, 4)
        r = np.linalg.norm(grid.space.coords, axis=1)

        assert np.all(r[grid.space.free] < 1.0)


class TestSpaceTimeGrid:
    """时空网格测试"""

    def test_build(self, grid_1d):
        """测试网格尺寸"""
        assert grid_1d.h == pytest.approx(1.0 / 16)
        assert grid_1d.dt == pytest.approx(0.125)
        assert grid_1d.shape == (9, 33)
        assert grid_1d.time_weights[0] == 0.0

    def test_too_coarse(self):
        """测试网格过粗"""
        domain = Domain.box((0.0,), (1.0,), 1.0)
        with pytest.raises(ConfigurationError):
            build_grid(domain, 4, 8)
        with pytest.raises(ConfigurationError):
            build_grid(domain, 16, 2)

    def test_refine(self, grid_1d):
        """测试加密"""
        fine = refine(grid_1d)

        assert fine.space.nodes_per_axis == 65
        assert fine.time_steps == 16
        assert fine.h == pytest.approx(grid_1d.h / 2)

    def test_with_final_time(self, grid_1d):
        """测试保持 Δt 延长时间"""
        longer = grid_1d.with_final_time(2.0)

        assert longer.time_steps == 16
        assert longer.space is grid_1d.space
        with pytest.raises(ConfigurationError):
            grid_1d.with_final_time(1.05)

    def test_simplex_count_2d(self, grid_2d):
        """测试二维三角剖分"""
        assert grid_2d.space.num_simplices == 2 * 8 * 8
        assert grid_2d.space.simplex_volume == pytest.approx(grid_2d.h ** 2 / 2)


class TestOperators:
    """微分算子测试"""

    @pytest.mark.parametrize('fixture', ['grid_1d', 'grid_2d'])
    def test_adjoint(self, fixture, request):
        """测试 <grad v, F> + <v, div F> = 0"""
        grid = request.getfixturevalue(fixture)
        rng = DeterministicRNG(5)
        v = rng.zero_trace_field(grid)
        F = rng.flux_field(grid)

        lhs = inner_cells(grid, grad(v), F.values)
        rhs = inner_nodes(grid, v.values, div(F))
        assert lhs + rhs == pytest.approx(0.0, abs=1e-10 * (abs(lhs) + 1.0))

    def test_affine_gradient_exact(self, grid_2d):
        """测试仿射函数的梯度精确"""
        v = ScalarField.from_function(grid_2d, lambda x, t: 2.0 * x[:, 0] - 3.0 * x[:, 1] + t)
        g = grad(v)

        assert np.allclose(g[..., 0], 2.0)
        assert np.allclose(g[..., 1], -3.0)

    def test_tent_norm(self, grid_1d):
        """测试 lp_norm_grad(1-|x|) = 2T"""
        v = ScalarField.from_function(grid_1d, lambda x, t: 1.0 - np.abs(x[:, 0]))

        for q in (1.5, 2.0, 3.0):
            assert lp_norm_grad(v, q) == pytest.approx(2.0 * grid_1d.domain.T)

    def test_norm_exponent(self, grid_1d):
        """测试指数不合法"""
        with pytest.raises(ConfigurationError):
            lp_norm_grad(ScalarField.zeros(grid_1d), 1.0)

    def test_sup_l2(self, grid_1d):
        """测试 sup_t ∫v²"""
        v = ScalarField.from_function(grid_1d, lambda x, t: t * np.ones(len(x)))

        assert sup_t_l2(v) == pytest.approx(2.0)

    def test_field_contract(self, grid_1d):
        """测试形状和非有限值"""
        with pytest.raises(ContractError):
            ScalarField(grid_1d, np.zeros((3, 3)))
        values = np.zeros(grid_1d.shape)
        values[1, 1] = np.nan
        with pytest.raises(ContractError):
            ScalarField(grid_1d, values)

    def test_different_grids(self, grid_1d):
        """测试不同网格的场不能相加"""
        other = refine(grid_1d)
        with pytest.raises(ContractError):
            ScalarField.zeros(grid_1d) + ScalarField.zeros(other)

    def test_time_derivative(self, grid_1d):
        """测试后向差商"""
        v = ScalarField.from_function(grid_1d, lambda x, t: 3.0 * t * np.ones(len(x)))

        assert np.allclose(v.time_derivative(), 3.0)


# ==================== 集合测试 ====================

class TestShapes:
    """集合描述与栅格化测试"""

    def test_cylinder_mask(self, grid_1d):
        """测试柱体的节点与时间层"""
        K = rasterize(ShapeSpec.cylinder((0.0,), 0.75, 0.25, 0.25), grid_1d)

        assert list(K.active_levels) == [4, 5, 6]
        assert K.values[5].sum() == 9
        assert measure(K) == pytest.approx(0.125 * 3 * 9 / 16)

    def test_slice_snapped(self, grid_1d):
        """测试切片吸附到最近时间层"""
        K = rasterize(ShapeSpec.slice((0.0,), 0.3, 0.25), grid_1d)

        assert list(K.active_levels) == [2]
        assert K.snapped == ((0.3, 0.25),)

    def test_graph_mask(self, grid_1d):
        """测试图像集每个节点只有一个时间层"""
        K = rasterize(ShapeSpec.graph((0.0,), 0.25, 0.5, 0.5), grid_1d)

        assert K.values.sum(axis=0).max() == 1
        assert K.values[:, 16].any()

    def test_union(self, grid_1d):
        """测试并集的栅格化"""
        a = ShapeSpec.cylinder((-0.5,), 0.5, 0.2, 0.25)
        b = ShapeSpec.cylinder((0.5,), 1.0, 0.2, 0.25)
        K = rasterize(ShapeSpec.union([a, b]), grid_1d)

        assert np.array_equal(K.values, rasterize(a, grid_1d).values | rasterize(b, grid_1d).values)
        assert len(K.provenance.cylinders) == 2

    def test_boundary_rejected(self, grid_1d):
        """测试距侧边界不足 h 的集合"""
        with pytest.raises(GeometryError):
            rasterize(ShapeSpec.cylinder((0.9,), 0.5, 0.1, 0.1), grid_1d)
        with pytest.raises(GeometryError):
            rasterize(ShapeSpec.cylinder((0.0,), 1.5, 0.1, 0.1), grid_1d)

    def test_raw_mask(self, grid_1d):
        """测试原始掩码的边界检查"""
        values = np.zeros(grid_1d.shape, dtype=bool)
        values[3, 0] = True
        with pytest.raises(GeometryError):
            raw_mask(grid_1d, values)

    def test_spec_invalid(self):
        """测试非法描述"""
        with pytest.raises(ConfigurationError):
            ShapeSpec('torus', (0.0,), 1.0, 0.1, 0.1)
        with pytest.raises(ConfigurationError):
            ShapeSpec.cylinder((0.0,), 1.0, -0.1, 0.1)
        with pytest.raises(ConfigurationError):
            ShapeSpec.from_dict({'kind': 'cylinder', 'center': [0.0]})

    def test_spec_dict(self):
        """测试并集描述的字典形式"""
        spec = ShapeSpec.union([ShapeSpec.slice((0.0,), 0.5, 0.2),
                                ShapeSpec.graph((0.1,), 0.2, 0.3, 0.4, 'dome')])

        assert ShapeSpec.from_dict(spec.to_dict()) == spec

    def test_parabolic_cylinder(self):
        """测试 d_p 球的时间窗"""
        spec = parabolic_cylinder((0.0,), 0.5, 0.5, 2.0)

        assert spec.t0 == pytest.approx(0.75)
        assert spec.duration == pytest.approx(0.5)

    def test_dilate_erode(self, grid_1d):
        """测试膨胀与收缩的包含关系"""
        K = rasterize(ShapeSpec.cylinder((0.0,), 0.75, 0.25, 0.25), grid_1d)

        assert K.issubset(dilate(K, 1))
        assert erode(K, 1).issubset(K)
        assert dilate(K, 1).count > K.count

    def test_mollified_indicator(self, grid_1d):
        """测试光滑指示函数"""
        K = rasterize(ShapeSpec.cylinder((0.0,), 0.75, 0.25, 0.25), grid_1d)
        psi = mollified_indicator(K, 2 * grid_1d.h)

        assert np.all(psi.values[K.values] == 1.0)
        assert psi.values[5, 0] == 0.0
        assert psi.values[5, 30] == 0.0
        assert 0.0 < psi.values[5, 21] < 1.0
        assert np.all(psi.values[:4] == 0.0)

    def test_empty_mask(self, grid_1d):
        """测试空集"""
        K = SetMask.empty(grid_1d)

        assert K.is_empty
        assert K.first_level is None
        assert measure(K) == 0.0


# ==================== 归档测试 ====================

class TestArtifactArchive:
    """产物归档测试"""

    @pytest.mark.parametrize('compress', [True, False])
    def test_save_load(self, grid_1d, tmp_path, compress):
        """测试保存和加载"""
        v = DeterministicRNG(2).smooth_field(grid_1d)
        K = rasterize(ShapeSpec.cylinder((0.0,), 0.75, 0.25, 0.25), grid_1d)
        archive = ArtifactArchive(seed=9, metadata={'command': 'test'})
        archive.put_field('v', v, 'balayage')
        archive.put_mask('K', K, 'balayage')
        path = tmp_path / 'artifacts.pca'
        archive.save(str(path), compress=compress)

        with open(path, 'rb') as f:
            assert f.read(4) == (MAGIC_COMPRESSED if compress else MAGIC_RAW)
        loaded = ArtifactArchive.load(str(path))
        assert loaded.header.seed == 9
        assert np.array_equal(loaded.get_field('v', 'balayage').values, v.values)
        mask = loaded.get_mask('K', 'balayage')
        assert np.array_equal(mask.values, K.values)
        assert mask.provenance == K.provenance
        assert loaded.get_stats() == {'entries': 2, 'field': 1, 'mask': 1}

    def test_missing_entry(self):
        """测试缺失条目报依赖错误"""
        archive = ArtifactArchive()
        with pytest.raises(DependencyError) as info:
            archive.get_field('balayage/33x8', 'balayage')
        assert info.value.producer == 'balayage'

    def test_wrong_kind(self, grid_1d):
        """测试条目类型不符"""
        archive = ArtifactArchive()
        archive.put_field('v', ScalarField.zeros(grid_1d), 'balayage')
        with pytest.raises(ContractError):
            archive.get_mask('v', 'balayage')

    def test_missing_file(self, tmp_path):
        """测试文件不存在"""
        with pytest.raises(DependencyError):
            ArtifactArchive.load(str(tmp_path / 'none.pca'), producer='balayage')

    def test_bad_magic(self, tmp_path):
        """测试魔数错误"""
        path = tmp_path / 'bad.pca'
        path.write_bytes(b'XXXX1234')
        with pytest.raises(ContractError):
            ArtifactArchive.load(str(path))

    def test_report_with_minimizer(self, grid_1d):
        """测试报告与极小元一起保存"""
        v = DeterministicRNG(2).smooth_field(grid_1d)
        report = CapacityReport(1.0, 'energy', 2.0, minimizer=v)
        archive = ArtifactArchive()
        archive.put_report('r', report, 'balayage')

        assert 'r/minimizer' in archive
        assert archive.get_report('r', 'balayage')['value'] == 1.0
        assert archive.get_field('r/minimizer', 'balayage').grid is not None

    def test_grid_rebuilt_compatible(self, grid_1d):
        """测试读回的网格与原网格兼容"""
        v = DeterministicRNG(2).smooth_field(grid_1d)
        archive = ArtifactArchive()
        archive.put_field('v', v, 'balayage')
        loaded = archive.get_field('v', 'balayage')

        total = loaded + ScalarField.zeros(grid_1d)
        assert np.array_equal(total.values, v.values)
        assert FluxField.zeros(loaded.grid).values.shape == (9, 32, 1)
