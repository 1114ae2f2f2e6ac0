"""
命令行入口

    python -m capcli.main <子命令> [选项]

子命令：cap-var、cap-elliptic、balayage、cap-measure、hausdorff、
scaling、equivalence、check、monster。

选项覆盖实验配置中的同名键；--set key=value 可以覆盖任意键。

退出码：
    0 - 成功（所有检查通过）
    1 - 有检查未通过
    2 - 配置、几何、约定、分辨率、定义域或依赖错误
    3 - 求解器失败
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import argparse  # noqa: E402
import logging  # noqa: E402
from typing import Any, List, Optional, Sequence, Tuple  # noqa: E402

from core.archive import ArtifactArchive  # noqa: E402
from core.config import load_config  # noqa: E402
from core.elliptic import elliptic_capacity  # noqa: E402
from core.errors import CapacityError, SolverError  # noqa: E402
from core.parabolic import balayage, energy_norm, measure_capacity  # noqa: E402
from core.parhaus import hausdorff_content  # noqa: E402
from core.report import CapacityReport  # noqa: E402
from core.stgrid import rasterize  # noqa: E402
from core.varcap import capacity_of_union, variational_capacity  # noqa: E402

from capcli.emit import FORMATS, emit_all  # noqa: E402
from capcli.experiments import ExperimentConfig, run_cylinder_scaling, run_equivalence  # noqa: E402
from capcli.ledger import balayage_key, check_inequalities, grid_tag, ledger_set  # noqa: E402
from capcli.monster import MonsterParams, check_monster_residual, default_monster_grid  # noqa: E402

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_SOLVER = 3

COMMANDS = ('cap-var', 'cap-elliptic', 'balayage', 'cap-measure', 'hausdorff',
            'scaling', 'equivalence', 'check', 'monster')


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='experiment config (JSON)')
    common.add_argument('--defaults', help='global defaults file (replaces config.json)')
    common.add_argument('--p', type=float, help='exponent p')
    common.add_argument('--nodes', type=int, help='nodes per axis')
    common.add_argument('--steps', type=int, help='time steps')
    common.add_argument('--seed', type=int, help='seed for randomized checks')
    common.add_argument('--out', help='output directory')
    common.add_argument('--format', action='append', choices=FORMATS, dest='formats',
                        help='output format (repeatable, default json)')
    common.add_argument('--set', action='append', default=[], dest='assignments', metavar='KEY=VALUE',
                        help='override any experiment key')
    common.add_argument('-v', '--verbose', action='store_true', help='debug logging')

    parser = argparse.ArgumentParser(prog='capcli', description='Parabolic p-capacity toolkit')
    sub = parser.add_subparsers(dest='command', required=True)

    for name in ('cap-var', 'cap-measure'):
        p = sub.add_parser(name, parents=[common], help=f'{name} of one set')
        p.add_argument('--set-index', type=int, default=0, help='index into the configured sets')
        p.add_argument('--archive', help='store the report in this archive')
    p = sub.add_parser('cap-elliptic', parents=[common], help='elliptic capacity of a ball')
    p.add_argument('--rho', type=float, help='ball radius (default 0.25 R)')
    p = sub.add_parser('balayage', parents=[common], help='balayage of the ledger set')
    p.add_argument('--archive', help='store the potential in this archive')
    p = sub.add_parser('hausdorff', parents=[common], help='parabolic Hausdorff content')
    p.add_argument('--set-index', type=int, default=0, help='index into the configured sets')
    p.add_argument('--s', type=float, help='dimension s (default n)')
    p.add_argument('--delta', type=float, help='cover scale delta')
    sub.add_parser('scaling', parents=[common], help='cylinder capacity scaling sweep')
    sub.add_parser('equivalence', parents=[common], help='three-capacity equivalence band')
    p = sub.add_parser('check', parents=[common], help='inequality ledger')
    p.add_argument('--archive', help='reuse balayage from this archive')
    p.add_argument('--only', action='append', dest='checks', help='run only this check (repeatable)')
    p = sub.add_parser('monster', parents=[common], help='residual of the explicit blow-up solution')
    p.add_argument('--A', type=float, dest='monster_A', help='amplitude A')
    p.add_argument('--tau', type=float, dest='monster_tau', help='blow-up time tau')
    p.add_argument('--refinements', type=int, default=2, help='number of refinements')
    return parser


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    """实验配置：文件 < 命令行选项 < --set"""
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig(name=args.command)
    overrides = {key: getattr(args, key, None)
                 for key in ('p', 'nodes', 'steps', 'seed', 'out', 'checks', 'archive', 's', 'delta',
                             'monster_A', 'monster_tau')}
    cfg = cfg.with_overrides(**overrides)
    return cfg.with_assignments(args.assignments)


def _pick_set(cfg: ExperimentConfig, index: int):
    specs = cfg.shape_specs()
    if not 0 <= index < len(specs):
        raise IndexError(f"set index {index} out of range 0..{len(specs) - 1}")
    return specs[index]


def _capacity_report(cfg: ExperimentConfig, index: int, kind: str) -> CapacityReport:
    spec = _pick_set(cfg, index)
    grid = cfg.grid()
    if kind == 'cap-var' and spec.kind == 'union':
        masks = [rasterize(part, grid) for part in spec.parts]
        return capacity_of_union(masks, cfg.p, cfg.capacity_options())
    K = rasterize(spec, grid)
    if kind == 'cap-var':
        return variational_capacity(K, cfg.p, cfg.capacity_options())
    return measure_capacity(K, cfg.p, tol=cfg.tol)


def run_command(args: argparse.Namespace, cfg: ExperimentConfig) -> Tuple[Any, bool]:
    """执行子命令，返回 (报告, 是否通过)"""
    command = args.command
    if command in ('cap-var', 'cap-measure'):
        report = _capacity_report(cfg, args.set_index, command)
        if args.archive:
            archive = ArtifactArchive(cfg.seed, {'command': command})
            archive.put_report(f'{command}/{args.set_index}', report, command)
            archive.save(args.archive)
        logger.info(f"{command}: value={report.value:.6g}")
        return report, True

    if command == 'cap-elliptic':
        grid = cfg.grid()
        domain = grid.domain
        rho = args.rho if args.rho is not None else 0.25 * domain.radius
        K = grid.space.ball(cfg.set_center(domain), rho) & grid.space.free
        report = elliptic_capacity(K, grid.space, cfg.p, cfg.tol)
        logger.info(f"cap-elliptic: rho={rho:g}, value={report.value:.6g}")
        return report, True

    if command == 'balayage':
        grid = cfg.grid()
        K = rasterize(ledger_set(cfg), grid)
        result = balayage(K, cfg.p, tol=cfg.tol)
        report = CapacityReport(energy_norm(result.trajectory, cfg.p), 'energy', cfg.p,
                                minimizer=result.trajectory,
                                residuals={'kkt': result.max_residual},
                                iterations=result.iterations, set_spec=K.describe(),
                                grid=grid.to_dict())
        if args.archive:
            archive = ArtifactArchive(cfg.seed, {'command': command})
            archive.put_field(balayage_key(grid), result.trajectory, 'balayage')
            archive.put_mask(f'K/{grid_tag(grid)}', K, 'balayage')
            archive.put_report('balayage/report', report, 'balayage')
            archive.save(args.archive)
        return report, True

    if command == 'hausdorff':
        K = rasterize(_pick_set(cfg, args.set_index), cfg.grid())
        report = hausdorff_content(K, cfg.dimension, cfg.delta, cfg.p)
        logger.info(f"hausdorff: s={report.s:g}, delta={report.delta:g}, content={report.content:.6g}")
        return report, True

    if command == 'scaling':
        report = run_cylinder_scaling(cfg)
        return report, report.failures == 0

    if command == 'equivalence':
        report = run_equivalence(cfg)
        return report, report.passed

    if command == 'check':
        report = check_inequalities(cfg)
        return report, report.passed

    if command == 'monster':
        params = MonsterParams(cfg.monster_A, cfg.monster_tau, cfg.p, cfg.n)
        grid = default_monster_grid(params, cfg.nodes, cfg.steps)
        report = check_monster_residual(params, grid, refinements=args.refinements)
        return report, report.passed

    raise ValueError(f"unknown command '{command}'")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    formats: List[str] = args.formats or ['json']

    try:
        if args.defaults:
            load_config(args.defaults)
        cfg = load_experiment(args)
        report, passed = run_command(args, cfg)
        paths = emit_all(report, formats, cfg.out, f'{cfg.name}-{args.command}')
    except SolverError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_SOLVER
    except (CapacityError, IndexError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except OSError as e:
        logger.error(str(e))
        return EXIT_USAGE

    for path in paths:
        print(path)
    if not passed:
        logger.warning(f"{args.command}: checks failed")
        return EXIT_FAILED
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
