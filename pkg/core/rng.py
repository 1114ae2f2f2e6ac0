"""
确定性随机数生成器

本模块为随机性质检查提供可复现的随机输入：
- DeterministicRNG: 基于 numpy Generator（PCG64）的确定性 RNG
- 零迹随机场、随机通量、随机柱体对的生成

相同种子总是产生相同的检查输入，因此命令行的每次运行都可复现。
"""

from typing import Any, Dict, List, Sequence, Tuple
import copy

import numpy as np

from .stgrid import FluxField, ScalarField, ShapeSpec, SpaceTimeGrid, SpatialField, SpatialGrid


class DeterministicRNG:
    """
    确定性随机数生成器

    使用场景：
    - 伴随性检查：v = rng.zero_trace_field(grid); F = rng.flux_field(grid)
    - 单调性 / 次可加性：K1, K2 = rng.cylinder_pair(grid, nested=True)
    - 延拓界：v1 = rng.smooth_field(grid, modes=3)

    属性:
        seed (int): 初始化种子
        generator (np.random.Generator): 内部生成器

    示例:
        rng = DeterministicRNG(seed=12345)
        phi = rng.smooth_field(grid)     # 相同种子得到相同的 phi
    """

    def __init__(self, seed: int):
        """
        初始化 RNG

        Args:
            seed: 随机种子（非负整数）
        """
        self.seed = int(seed)
        self.generator = np.random.default_rng(self.seed)

    def uniform_range(self, min_val: float, max_val: float, size=None):
        """[min_val, max_val) 上的均匀分布"""
        return self.generator.uniform(min_val, max_val, size)

    def range(self, min_val: int, max_val: int) -> int:
        """[min_val, max_val] 上的整数"""
        return int(self.generator.integers(min_val, max_val, endpoint=True))

    def chance(self, probability: float) -> bool:
        return bool(self.generator.random() < probability)

    def pick(self, items: Sequence) -> Any:
        """随机选择一个元素，空序列返回 None"""
        if not items:
            return None
        return items[self.range(0, len(items) - 1)]

    def shuffle(self, items: List) -> List:
        """返回洗牌后的新列表（原列表不变）"""
        order = self.generator.permutation(len(items))
        return [items[i] for i in order]

    def spawn(self, key: int) -> 'DeterministicRNG':
        """派生独立子流（用于并行扫描中的各个参数点）"""
        state = np.random.SeedSequence([self.seed, int(key)]).generate_state(1)[0]
        return DeterministicRNG(int(state))

    def get_state(self) -> Dict:
        """获取当前状态，之后可以用 set_state 恢复"""
        return copy.deepcopy(self.generator.bit_generator.state)

    def set_state(self, state: Dict):
        self.generator.bit_generator.state = copy.deepcopy(state)

    # ==================== 随机场 ====================

    def spatial_field(self, space: SpatialGrid, scale: float = 1.0) -> SpatialField:
        """零迹的节点白噪声"""
        values = scale * self.generator.standard_normal(space.size)
        return SpatialField(space, np.where(space.free, values, 0.0))

    def zero_trace_field(self, grid: SpaceTimeGrid, scale: float = 1.0) -> ScalarField:
        """零侧边迹的时空白噪声"""
        values = scale * self.generator.standard_normal(grid.shape)
        return ScalarField(grid, np.where(grid.space.free, values, 0.0))

    def flux_field(self, grid: SpaceTimeGrid, scale: float = 1.0) -> FluxField:
        shape = (grid.levels, grid.space.num_simplices, grid.space.n)
        return FluxField(grid, scale * self.generator.standard_normal(shape))

    def smooth_field(self, grid: SpaceTimeGrid, modes: int = 3, scale: float = 1.0) -> ScalarField:
        """
        光滑的零迹随机场

        空间上为随机系数的正弦模态之和，乘以 [0,1] 上的随机时间多项式，
        再乘以到 ∂Ω 的距离截断，保证侧边界为 0。

        Args:
            grid: 时空网格
            modes: 每个方向的模态数
            scale: 幅值
        """
        space = grid.space
        domain = grid.domain
        lower = np.asarray(domain.lower)
        extents = np.asarray(domain.extents)
        xi = (space.coords - lower) / extents
        spatial = np.zeros(space.size)
        for index in np.ndindex(*([modes] * space.n)):
            k = np.asarray(index) + 1
            coefficient = self.generator.standard_normal() / float(k.sum())
            spatial += coefficient * np.prod(np.sin(np.pi * k * xi), axis=1)
        if domain.shape == 'ball':
            spatial *= space.boundary_distance() / domain.radius
        spatial = np.where(space.free, spatial, 0.0)

        tau = grid.times / domain.T
        a, b, c = self.generator.standard_normal(3)
        temporal = 1.0 + a * tau + b * tau ** 2 + c * np.sin(np.pi * tau)
        return ScalarField(grid, scale * np.outer(temporal, spatial))

    # ==================== 随机集合 ====================

    def cylinder(self, grid: SpaceTimeGrid, max_radius: float = None) -> ShapeSpec:
        """
        随机柱体，保证与侧边界至少相距 h、时间窗在 [0,T] 内

        Args:
            grid: 时空网格
            max_radius: 半径上限（默认取内切半径的 1/3）
        """
        domain = grid.domain
        h = grid.h
        inner = domain.radius
        if max_radius is None:
            max_radius = inner / 3
        radius = float(self.uniform_range(2 * h, max(2 * h, max_radius) + 1e-12))
        room = inner - radius - h
        if domain.shape == 'ball':
            direction = self.generator.standard_normal(domain.n)
            direction /= max(np.linalg.norm(direction), 1e-12)
            offset = direction * self.uniform_range(0.0, max(room, 0.0) + 1e-12)
        else:
            offset = self.uniform_range(-max(room, 0.0), max(room, 0.0) + 1e-12, domain.n)
        center = tuple(float(c) for c in domain.center + offset)
        duration = float(self.uniform_range(0.0, 0.4 * domain.T))
        t0 = float(self.uniform_range(duration + grid.dt, domain.T))
        return ShapeSpec.cylinder(center, t0, radius, duration)

    def cylinder_pair(self, grid: SpaceTimeGrid, nested: bool) -> Tuple[ShapeSpec, ShapeSpec]:
        """
        随机柱体对

        Args:
            nested: True 返回 K1 ⊆ K2；False 返回 K1、K2 互不相交

        Returns:
            (K1, K2)
        """
        outer = self.cylinder(grid)
        if nested:
            shrink = float(self.uniform_range(0.4, 1.0))
            radius = max(grid.h, outer.radius * shrink)
            duration = outer.duration * float(self.uniform_range(0.0, 1.0))
            slack = outer.duration - duration
            t0 = outer.t0 - float(self.uniform_range(0.0, slack + 1e-12))
            inner = ShapeSpec.cylinder(outer.center, t0, radius, duration)
            return inner, outer

        # 时间上错开：K1 在 T/2-Δt 结束，K2 在 T/2+Δt 开始
        half = 0.5 * grid.domain.T
        first = self.cylinder(grid)
        second = self.cylinder(grid)
        d1 = min(first.duration, 0.4 * half)
        d2 = min(second.duration, 0.4 * half)
        k1 = ShapeSpec.cylinder(first.center, half - grid.dt, first.radius, d1)
        k2 = ShapeSpec.cylinder(second.center, half + grid.dt + d2, second.radius, d2)
        return k1, k2
