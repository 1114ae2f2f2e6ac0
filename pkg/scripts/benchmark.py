#!/usr/bin/env python3
"""
Wall-time benchmarks for the acceptance-size solves

    python scripts/benchmark.py [--quick] [--out PATH]
"""

import argparse
import json
import logging
import math
import os
import sys
import time
from typing import Callable, Dict, List

# 添加父目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np  # noqa: E402

from core.elliptic import dual_norm_dt, elliptic_capacity, radial_capacity  # noqa: E402
from core.parabolic import balayage, riesz_measure  # noqa: E402
from core.parhaus import hausdorff_content  # noqa: E402
from core.stgrid import Domain, ScalarField, ShapeSpec, build_grid, rasterize  # noqa: E402
from core.varcap import CapacityOptions, variational_capacity  # noqa: E402
from capcli.experiments import ExperimentConfig, run_cylinder_scaling  # noqa: E402

logger = logging.getLogger(__name__)


class Benchmark:
    """基准测试类"""

    def __init__(self, name: str, limit: float):
        self.name = name
        self.limit = limit
        self.times: List[float] = []
        self.results: Dict = {}

    def run(self, fn: Callable[[], Dict], repeat: int = 1) -> Dict:
        """执行 fn 并记录耗时；fn 返回的诊断量写入 results"""
        for _ in range(repeat):
            started = time.perf_counter()
            self.results = fn()
            self.times.append(time.perf_counter() - started)
        return self.get_stats()

    def get_stats(self) -> Dict:
        """获取统计信息"""
        if not self.times:
            return {}
        best = min(self.times)
        return {
            'name': self.name,
            'runs': len(self.times),
            'best_s': best,
            'mean_s': sum(self.times) / len(self.times),
            'limit_s': self.limit,
            'within_limit': best <= self.limit,
            **self.results,
        }


def _print(stats: Dict):
    flag = 'ok' if stats['within_limit'] else 'SLOW'
    print(f"  {stats['name']:<28} {stats['best_s']:8.2f}s  (limit {stats['limit_s']:g}s) {flag}")


def benchmark_elliptic(quick: bool) -> List[Dict]:
    """一维与二维椭圆容量"""
    print("\n" + "=" * 50)
    print("Benchmark: Elliptic Capacity")
    print("=" * 50)

    results = []
    nodes = 129 if quick else 512
    for p in (1.5, 2.0, 3.0):
        space = build_grid(Domain.box((-1.0,), (1.0,), 1.0, p), nodes, 4).space
        K = space.ball((0.0,), 0.25) & space.free
        bench = Benchmark(f"elliptic_1d_p{p:g}", 5.0)

        def solve():
            value = elliptic_capacity(K, space, p).value
            oracle = 2.0 * 0.75 ** (1 - p)
            return {'value': value, 'relative_error': abs(value / oracle - 1)}

        stats = bench.run(solve)
        _print(stats)
        results.append(stats)

    nodes = 33 if quick else 129
    for p in (1.5, 2.5):
        space = build_grid(Domain.ball((0.0, 0.0), 1.0, 1.0, p), nodes, 4).space
        K = space.ball((0.0, 0.0), 0.25) & space.free
        bench = Benchmark(f"elliptic_2d_p{p:g}", 60.0)

        def solve():
            value = elliptic_capacity(K, space, p).value
            oracle = radial_capacity(2, p, 0.25, 1.0)
            return {'value': value, 'relative_error': abs(value / oracle - 1)}

        stats = bench.run(solve)
        _print(stats)
        results.append(stats)
    return results


def benchmark_dual_norm(quick: bool) -> Dict:
    """p=2 对偶范数与 Fourier 公式"""
    print("\n" + "=" * 50)
    print("Benchmark: Dual Norm")
    print("=" * 50)

    grid = build_grid(Domain.box((0.0,), (1.0,), 1.0, 2.0), 129 if quick else 257, 64)
    v = ScalarField.from_function(grid, lambda x, t: t * np.sin(np.pi * x[:, 0])).with_zero_trace()
    bench = Benchmark("dual_norm_p2", 30.0)

    def solve():
        value = dual_norm_dt(v, 2.0).value
        return {'value': value, 'relative_error': abs(value ** 2 * 2 * math.pi ** 2 - 1)}

    stats = bench.run(solve)
    _print(stats)
    return stats


def benchmark_balayage(quick: bool) -> Dict:
    """balayage 与 Riesz 测度"""
    print("\n" + "=" * 50)
    print("Benchmark: Balayage")
    print("=" * 50)

    grid = build_grid(Domain.box((-1.0,), (1.0,), 1.0, 2.0), 65 if quick else 257, 32 if quick else 64)
    K = rasterize(ShapeSpec.cylinder((0.0,), 0.75, 0.25, 0.25), grid)
    bench = Benchmark("balayage_1d", 60.0)

    def solve():
        mu = riesz_measure(balayage(K, 2.0))
        return {'mass': mu.total, 'support_fraction': mu.support_fraction(K)}

    stats = bench.run(solve)
    _print(stats)
    return stats


def benchmark_capacity(quick: bool) -> List[Dict]:
    """两种方法的变分容量"""
    print("\n" + "=" * 50)
    print("Benchmark: Variational Capacity")
    print("=" * 50)

    grid = build_grid(Domain.box((-1.0,), (1.0,), 1.0, 2.0), 33 if quick else 65, 16 if quick else 32)
    K = rasterize(ShapeSpec.cylinder((0.0,), 0.75, 0.25, 0.25), grid)
    results = []
    for method in ('conic', 'pdhg'):
        bench = Benchmark(f"cap_var_{method}", 120.0)
        options = CapacityOptions.from_config(method=method)
        stats = bench.run(lambda: {'value': variational_capacity(K, 2.0, options).value})
        _print(stats)
        results.append(stats)
    return results


def benchmark_hausdorff(quick: bool) -> Dict:
    """Hausdorff 容度"""
    print("\n" + "=" * 50)
    print("Benchmark: Hausdorff Content")
    print("=" * 50)

    grid = build_grid(Domain.box((-1.0,), (1.0,), 1.0, 2.0), 257, 256)
    E = rasterize(ShapeSpec.cylinder((0.0,), 0.75, 0.5, 0.5), grid)
    bench = Benchmark("hausdorff_1d", 10.0)
    stats = bench.run(lambda: {'content': hausdorff_content(E, 1.0, 1.5).content}, repeat=1 if quick else 3)
    _print(stats)
    return stats


def benchmark_scaling(quick: bool) -> Dict:
    """柱体标度扫描（n=1）"""
    print("\n" + "=" * 50)
    print("Benchmark: Cylinder Scaling Sweep")
    print("=" * 50)

    if quick:
        cfg = ExperimentConfig(nodes=33, steps=16, rhos=(0.25,), taus=(0.1, 0.2, 0.4), method='conic')
    else:
        cfg = ExperimentConfig(nodes=257, steps=64)
    bench = Benchmark("scaling_n1", 600.0)

    def sweep():
        report = run_cylinder_scaling(cfg)
        return {'points': len(report.rows), 'failures': report.failures,
                'slopes': [fit.slope for fit in report.fits]}

    stats = bench.run(sweep)
    _print(stats)
    return stats


def run_all_benchmarks(quick: bool, report_path: str):
    """运行所有基准测试"""
    print("\n" + "=" * 60)
    print("  Parabolic Capacity Benchmarks" + (" (quick)" if quick else ""))
    print("=" * 60)

    all_results = {
        'elliptic': benchmark_elliptic(quick),
        'dual_norm': benchmark_dual_norm(quick),
        'balayage': benchmark_balayage(quick),
        'capacity': benchmark_capacity(quick),
        'hausdorff': benchmark_hausdorff(quick),
        'scaling': benchmark_scaling(quick),
    }

    with open(report_path, 'w') as f:
        json.dump(all_results, f, indent=2, default=str)

    print(f"\nFull report saved to: {report_path}")
    return all_results


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Benchmark the acceptance-size solves')
    parser.add_argument('--quick', action='store_true', help='smaller grids')
    parser.add_argument('--out', default='/tmp/benchmark_report.json', help='JSON report path')
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    run_all_benchmarks(args.quick, args.out)
