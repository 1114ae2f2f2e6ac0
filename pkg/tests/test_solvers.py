"""
Unit tests for the elliptic and parabolic solvers

椭圆容量、对偶范数、厚度比与 Hardy 比；隐式 Euler、balayage、Riesz 测度、延拓与能量收支
"""

import math

import numpy as np
import pytest

from core.elliptic import (dual_norm_dt, elliptic_capacity, fatness_ratio, hardy_ratio, pairing_dt,
                           radial_capacity, solve_p_poisson)
from core.errors import ConfigurationError, ContractError, GeometryError
from core.parabolic import (balayage, energy_identity, energy_norm, evolve, extend_by_solution,
                            measure_capacity, riesz_measure)
from core.rng import DeterministicRNG
from core.stgrid import (Domain, ScalarField, SetMask, ShapeSpec, SpatialField, build_grid,
                         l2_per_level, rasterize)
from core.varcap import w_norm


def _interval_space(p: float, nodes: int = 129):
    return build_grid(Domain.box((-1.0,), (1.0,), 1.0, p), nodes, 4).space


def _v_norm(phi: ScalarField, p: float) -> float:
    """(Σ_k Δt ∫|∇φ^k|^p)^{1/p}"""
    grid = phi.grid
    mags = np.linalg.norm(grid.space.grad(phi.values[1:]), axis=-1)
    return (grid.dt * float(grid.space.integrate_cells(mags ** p).sum())) ** (1.0 / p)


# ==================== 椭圆容量 ====================

class TestEllipticCapacity:
    """椭圆 p-容量测试"""

    @pytest.mark.parametrize('p', [2.0, 3.0])
    def test_interval_oracle(self, p):
        """测试 cap_e((-ρ,ρ), (-1,1)) = 2(1-ρ)^{1-p}"""
        space = _interval_space(p)
        K = space.ball((0.0,), 0.25) & space.free
        report = elliptic_capacity(K, space, p)

        assert report.value == pytest.approx(2.0 * 0.75 ** (1 - p), rel=0.02)
        assert report.residuals['gap'] < 1e-3
        assert report.residuals['obstacle'] == pytest.approx(0.0, abs=1e-8)

    def test_radial_oracle_1d(self):
        """测试径向公式在一维退化为闭式"""
        for p in (1.5, 2.0, 3.0):
            assert radial_capacity(1, p, 0.25, 1.0) == pytest.approx(2.0 * 0.75 ** (1 - p))

    @pytest.mark.slow
    @pytest.mark.parametrize('p', [1.5, 2.5])
    def test_radial_oracle_2d(self, p):
        """测试 129² 节点上 cap_e(B̄_{1/4}, B_1) 与径向公式相差不超过 5%"""
        space = build_grid(Domain.ball((0.0, 0.0), 1.0, 1.0, p), 129, 4).space
        K = space.ball((0.0, 0.0), 0.25) & space.free
        report = elliptic_capacity(K, space, p)

        assert report.value == pytest.approx(radial_capacity(2, p, 0.25, 1.0), rel=0.05)

    @pytest.mark.parametrize('p', [1.5, 2.0, 3.0])
    def test_scaling_exponent_1d(self, p):
        """测试 cap_e(B̄_ρ, B_{2ρ}) ~ ρ^{n-p}"""
        rhos = np.array([0.125, 0.25, 0.5])
        values = []
        for rho in rhos:
            space = build_grid(Domain.ball((0.0,), 2 * rho, 1.0, p), 65, 4).space
            values.append(elliptic_capacity(space.ball((0.0,), rho) & space.free, space, p).value)
        slope = np.polyfit(np.log(rhos), np.log(values), 1)[0]

        assert slope == pytest.approx(1.0 - p, abs=0.05)
        assert values[0] == pytest.approx(2.0 * 0.125 ** (1 - p), rel=0.02)

    @pytest.mark.slow
    @pytest.mark.parametrize('p', [1.5, 2.5])
    def test_scaling_exponent_2d(self, p):
        """测试二维 cap_e(B̄_ρ, B_{2ρ}) ~ ρ^{2-p}"""
        rhos = np.array([0.125, 0.25, 0.5])
        values = []
        for rho in rhos:
            space = build_grid(Domain.ball((0.0, 0.0), 2 * rho, 1.0, p), 33, 4).space
            values.append(elliptic_capacity(space.ball((0.0, 0.0), rho) & space.free, space, p).value)
        slope = np.polyfit(np.log(rhos), np.log(values), 1)[0]

        assert slope == pytest.approx(2.0 - p, abs=0.05)

    def test_radial_invalid(self):
        """测试 ρ ≥ R"""
        with pytest.raises(ConfigurationError):
            radial_capacity(2, 2.0, 1.0, 0.5)

    def test_empty(self):
        """测试空集容量为 0"""
        space = _interval_space(2.0, 33)
        report = elliptic_capacity(np.zeros(space.size, dtype=bool), space, 2.0)

        assert report.value == 0.0

    def test_boundary_rejected(self):
        """测试集合触及边界"""
        space = _interval_space(2.0, 33)
        K = np.zeros(space.size, dtype=bool)
        K[0] = True
        with pytest.raises(GeometryError):
            elliptic_capacity(K, space, 2.0)

    def test_monotone(self):
        """测试单调性"""
        space = _interval_space(2.0, 65)
        small = elliptic_capacity(space.ball((0.0,), 0.125) & space.free, space, 2.0).value
        large = elliptic_capacity(space.ball((0.0,), 0.25) & space.free, space, 2.0).value

        assert small <= large

    def test_half_space_fatness(self):
        """测试半空间的厚度比为 3/4（p=2）"""
        report = fatness_ratio(lambda x: x[:, 0] >= 0.0, (0.0,), 0.25, 2.0, nodes_per_axis=129)

        assert report.ratio == pytest.approx(0.75, rel=0.02)
        assert report.to_dict()['radius'] == 0.25

    def test_poisson_p2(self):
        """测试 p=2 时 -w'' = 1 的解 w = (1-x²)/2"""
        space = _interval_space(2.0, 65)
        w = solve_p_poisson(SpatialField(space, np.where(space.free, 1.0, 0.0)), 2.0)

        exact = 0.5 * (1.0 - space.coords[:, 0] ** 2)
        assert np.abs(w.values - exact).max() < 1e-6

    def test_hardy_ratio(self):
        """测试 Hardy 比有限且不超过一维常数 (p/(p-1))^p"""
        space = build_grid(Domain.box((0.0,), (1.0,), 1.0, 2.0), 129, 4).space
        u = SpatialField.from_function(space, lambda x: np.sin(np.pi * x[:, 0])).with_zero_trace()
        ratio = hardy_ratio(u, 2.0)

        assert 0.0 < ratio <= 4.0


class TestDualNorm:
    """‖∂ₜv‖_{V′} 测试"""

    def test_fourier_oracle(self, unit_grid):
        """测试 v = t·sin(πx)，p=2：value² = T/(2π²)"""
        v = ScalarField.from_function(unit_grid, lambda x, t: t * np.sin(np.pi * x[:, 0])).with_zero_trace()
        result = dual_norm_dt(v, 2.0)

        assert result.value ** 2 == pytest.approx(1.0 / (2 * math.pi ** 2), rel=0.01)
        assert result.power == pytest.approx(result.value ** 2)
        assert len(result.witnesses) == unit_grid.time_steps

    def test_time_constant(self, grid_1d):
        """测试时间常数场的对偶范数为 0"""
        v = ScalarField.from_function(grid_1d, lambda x, t: 1.0 - np.abs(x[:, 0]))
        result = dual_norm_dt(v.with_zero_trace(), 2.0)

        assert result.power == 0.0
        assert np.all(result.flux.values == 0.0)

    def test_witness_flux(self, grid_1d):
        """测试见证通量满足 ∂ₜv = div F"""
        v = DeterministicRNG(4).smooth_field(grid_1d)
        result = dual_norm_dt(v, 2.0)
        rates = v.time_derivative()
        coupling = rates - grid_1d.space.div(result.flux.values[1:])

        assert np.abs(coupling[:, grid_1d.space.free]).max() < 1e-5 * max(1.0, np.abs(rates).max())

    def test_nonzero_trace(self, grid_1d):
        """测试侧边迹不为零"""
        v = ScalarField.from_function(grid_1d, lambda x, t: np.ones(len(x)))
        with pytest.raises(ContractError):
            dual_norm_dt(v, 2.0)

    @pytest.mark.parametrize('p', [2.0, 3.0])
    def test_pairing_bounded_by_norms(self, grid_1d, p):
        """测试 ⟨∂ₜv, φ⟩ ≤ ‖∂ₜv‖_{V′}·‖φ‖_V"""
        v = DeterministicRNG(11).smooth_field(grid_1d)
        dual = dual_norm_dt(v, p, tol=1e-8).value
        for i in range(5):
            phi = DeterministicRNG(12).spawn(i).smooth_field(grid_1d)
            for sign in (1.0, -1.0):
                test = ScalarField(grid_1d, sign * phi.values)
                assert pairing_dt(v, test) <= dual * _v_norm(test, p) * (1 + 1e-6) + 1e-12

    @pytest.mark.parametrize('p', [2.0, 3.0])
    def test_pairing_attained_by_witnesses(self, grid_1d, p):
        """测试以见证函数为 φ 时配对等于 Σ Δt ∫|∇w|^p"""
        v = DeterministicRNG(11).smooth_field(grid_1d)
        result = dual_norm_dt(v, p, tol=1e-8)
        phi = ScalarField.from_levels(grid_1d, [np.zeros(grid_1d.space.size)]
                                      + [w.values for w in result.witnesses])

        assert pairing_dt(v, phi) == pytest.approx(result.power, rel=1e-3)
        assert _v_norm(phi, p) ** p == pytest.approx(result.power, rel=1e-9)

    @pytest.mark.parametrize('p', [1.5, 2.0, 3.0])
    def test_triangle_inequality(self, grid_1d, p):
        """测试随机场对上的三角不等式"""
        for i in range(3):
            a = DeterministicRNG(20).spawn(i).smooth_field(grid_1d)
            b = DeterministicRNG(30).spawn(i).smooth_field(grid_1d)
            total = dual_norm_dt(ScalarField(grid_1d, a.values + b.values), p, tol=1e-8).value
            parts = dual_norm_dt(a, p, tol=1e-8).value + dual_norm_dt(b, p, tol=1e-8).value

            assert total <= parts * (1 + 1e-4)

    @pytest.mark.parametrize('p', [2.0, 3.0])
    def test_homogeneity(self, grid_1d, p):
        """测试 ‖∂ₜ(cv)‖ = |c|·‖∂ₜv‖"""
        v = DeterministicRNG(13).smooth_field(grid_1d)
        value = dual_norm_dt(v, p, tol=1e-8).value
        for c in (-2.0, 0.5, 3.0):
            scaled = dual_norm_dt(ScalarField(grid_1d, c * v.values), p, tol=1e-8).value
            assert scaled == pytest.approx(abs(c) * value, rel=1e-4)


# ==================== 抛物求解 ====================

def _cylinder(grid):
    return rasterize(ShapeSpec.cylinder((0.0,), 0.75, 0.25, 0.25), grid)


class TestEvolve:
    """隐式 Euler 测试"""

    def test_heat_decay(self, grid_1d):
        """测试无障碍时 L² 能量单调不增"""
        initial = DeterministicRNG(6).smooth_field(grid_1d).level(0)
        result = evolve(initial, 2.0, grid_1d)
        l2 = l2_per_level(result.trajectory)

        assert np.all(np.diff(l2) <= 1e-12)
        assert result.obstacle is None

    @pytest.mark.parametrize('p', [2.0, 3.0])
    def test_comparison(self, grid_1d, p):
        """测试有序初值给出有序解"""
        lower = DeterministicRNG(6).smooth_field(grid_1d).level(0)
        bump = np.where(grid_1d.space.free, 1.0 - np.abs(grid_1d.space.coords[:, 0]), 0.0)
        upper = SpatialField(grid_1d.space, lower.values + bump)
        u = evolve(lower, p, grid_1d).trajectory.values
        v = evolve(upper, p, grid_1d).trajectory.values

        assert np.all(u <= v + 1e-6 * max(1.0, np.abs(v).max()))

    def test_initial_trace(self, grid_1d):
        """测试初值迹不为零"""
        initial = SpatialField(grid_1d.space, np.ones(grid_1d.space.size))
        with pytest.raises(ContractError):
            evolve(initial, 2.0, grid_1d)


class TestBalayage:
    """balayage 与 Riesz 测度测试"""

    def test_above_obstacle(self, grid_1d):
        """测试 balayage 在 K 上为 1、处处不超过 1、K 出现前为 0"""
        K = _cylinder(grid_1d)
        result = balayage(K, 2.0)
        u = result.trajectory.values

        assert np.all(u[K.values] >= 1.0 - 1e-5)
        assert u.max() <= 1.0 + 1e-6
        assert np.all(u[:K.first_level] == 0.0)
        assert result.contact is not None

    def test_empty_set(self, grid_1d):
        """测试空集的 balayage 为 0"""
        result = balayage(SetMask.empty(grid_1d), 2.0)

        assert np.all(result.trajectory.values == 0.0)
        assert riesz_measure(result).total == 0.0

    def test_riesz_support(self, grid_1d):
        """测试 Riesz 质量集中在 K 附近"""
        result = balayage(_cylinder(grid_1d), 2.0)
        mu = riesz_measure(result)

        assert mu.total > 0
        assert mu.support_fraction(_cylinder(grid_1d), cells=1) >= 0.95
        assert set(mu.to_frame().columns) == {'x0', 't', 'mass'}

    def test_free_evolution_massless(self, grid_1d):
        """测试无障碍演化的 Riesz 质量远小于 balayage 的质量"""
        reference = riesz_measure(balayage(_cylinder(grid_1d), 2.0)).total
        initial = DeterministicRNG(6).smooth_field(grid_1d).level(0)
        free = riesz_measure(evolve(initial, 2.0, grid_1d, tol=1e-10))

        assert free.total < 1e-4 * reference

    def test_measure_capacity(self, grid_1d):
        """测试测度型容量"""
        report = measure_capacity(_cylinder(grid_1d), 2.0)

        assert report.kind == 'measure'
        assert report.value > 0
        assert report.extras['support_fraction'] >= 0.95

    @pytest.mark.parametrize('p', [2.0, 3.0])
    def test_monotone_in_set(self, grid_1d, p):
        """测试 K1 ⊆ K2 ⇒ R̂_{K1} ≤ R̂_{K2}"""
        small = rasterize(ShapeSpec.cylinder((0.0,), 0.75, 0.125, 0.125), grid_1d)
        large = _cylinder(grid_1d)
        assert small.issubset(large)

        u1 = balayage(small, p, tol=1e-8).trajectory.values
        u2 = balayage(large, p, tol=1e-8).trajectory.values
        assert np.all(u1 <= u2 + 1e-6)

    @pytest.mark.parametrize('p', [2.0, 3.0])
    def test_idempotent(self, grid_1d, p):
        """测试以 R̂_K 为障碍再求一次，结果仍为 R̂_K"""
        u = balayage(_cylinder(grid_1d), p, tol=1e-8).trajectory
        zero = SpatialField(grid_1d.space, np.zeros(grid_1d.space.size))
        again = evolve(zero, p, grid_1d, obstacle=u, tol=1e-8).trajectory

        assert np.abs(again.values - u.values).max() < 1e-5

    def test_measure_capacity_reuses_evolution(self, grid_1d):
        """测试给定 balayage 时测度容量与重新求解一致，网格不符时报错"""
        K = _cylinder(grid_1d)
        result = balayage(K, 2.0, tol=1e-8)
        reused = measure_capacity(K, 2.0, tol=1e-8, evolution=result)

        assert reused.value == pytest.approx(measure_capacity(K, 2.0, tol=1e-8).value)
        assert reused.minimizer is result.trajectory

        other = build_grid(Domain.box((-1.0,), (1.0,), 1.0, 2.0), 17, 8)
        with pytest.raises(ContractError):
            measure_capacity(_cylinder(other), 2.0, evolution=result)

    def test_energy_norm_positive(self, grid_1d):
        """测试 balayage 的能量范数"""
        u = balayage(_cylinder(grid_1d), 2.0).trajectory

        assert energy_norm(u, 2.0) > 0.5 * 0.5


class TestExtension:
    """延拓与能量收支测试"""

    @pytest.mark.parametrize('p', [2.0, 3.0])
    def test_energy_identity(self, grid_1d, p):
        """测试隐式 Euler 下能量收支精确成立"""
        v1 = DeterministicRNG(8).smooth_field(grid_1d)
        extended = extend_by_solution(v1, 2.0, p)
        identity = energy_identity(v1, extended, p)

        assert extended.grid.time_steps == 2 * grid_1d.time_steps
        assert np.array_equal(extended.values[:grid_1d.levels], v1.values)
        assert identity.defect < 1e-4
        assert identity.lhs <= identity.initial * (1 + 1e-4)

    def test_extension_bound_random(self, grid_1d):
        """测试 10 个随机初段：‖v̂‖_W ≤ 3‖v₁‖_W + 1e-6，能量收支偏差 < 1%（p=2）"""
        for i in range(10):
            v1 = DeterministicRNG(12345).spawn(i).smooth_field(grid_1d)
            extended = extend_by_solution(v1, 2.0, 2.0, tol=1e-8)
            lhs = w_norm(extended, 2.0, tol=1e-8).total
            rhs = 3.0 * w_norm(v1, 2.0, tol=1e-8).total + 1e-6

            assert lhs <= rhs, i
            assert energy_identity(v1, extended, 2.0).defect < 0.01, i

    def test_extension_time(self, grid_1d):
        """测试延拓时间不超过原时间"""
        v1 = DeterministicRNG(8).smooth_field(grid_1d)
        with pytest.raises(ConfigurationError):
            extend_by_solution(v1, 1.0)

    def test_extension_trace(self, grid_1d):
        """测试侧边迹不为零"""
        v1 = ScalarField.from_function(grid_1d, lambda x, t: np.ones(len(x)))
        with pytest.raises(ContractError):
            extend_by_solution(v1, 2.0)
