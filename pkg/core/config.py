"""
全局配置模块

支持从 JSON 配置文件加载默认参数，实验脚本和命令行共用同一份配置。

使用方法：
    from core.config import CONFIG

    # 自动加载 config.json
    print(CONFIG.solver.tol)

    # 或指定配置文件
    CONFIG.load_from_file('custom_config.json')

配置文件格式：
    config.json - 见项目根目录的 config.json 示例，字段说明见 docs/03-formats.md
"""

from dataclasses import dataclass, field, asdict, fields
from typing import Optional, Tuple
import json
import logging
from pathlib import Path

from .errors import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass
class GridConfig:
    """
    网格默认值

    属性:
        nodes_per_axis: 每个空间方向的节点数（含边界节点）
        time_steps: 时间步数 M
        obstacle_width: 障碍函数光滑宽度 η，以 h 为单位
    """
    nodes_per_axis: int = 65
    time_steps: int = 32
    obstacle_width: float = 2.0


@dataclass
class SolverConfig:
    """
    求解器配置

    tol 是所有内层求解（Newton、有效集）的相对容差；
    capacity_method 选择容量规划的外层求解器：'pdhg' 或 'conic'。
    """

    tol: float = 1e-6
    newton_max_iterations: int = 60
    active_set_max_iterations: int = 50
    eps_ladder: Tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)
    capacity_method: str = 'pdhg'
    pdhg_max_iterations: int = 20000
    pdhg_check_every: int = 50
    objective_rtol: float = 1e-7
    feasibility_tol: float = 1e-6
    conic_solver: Optional[str] = None
    fallback_to_conic: bool = True

    def __post_init__(self):
        self.eps_ladder = tuple(self.eps_ladder)


@dataclass
class OutputConfig:
    """
    输出配置

    属性:
        directory: 默认输出目录
        float_format: CSV 浮点格式
        plot_width, plot_height: SVG 图尺寸（英寸）
        svg_hashsalt: SVG 内部 id 的固定盐
        timings: 报告 JSON 是否写入 seconds（写入后重复运行的字节不再相同）
    """

    directory: str = 'out'
    float_format: str = '%.10g'
    plot_width: float = 6.0
    plot_height: float = 4.0
    svg_hashsalt: str = 'parabolic-capacity'
    timings: bool = False


@dataclass
class ExperimentDefaults:
    """
    实验默认值

    属性:
        workers: 参数扫描的进程数（1 表示顺序执行）
        seed: 随机性质检查的种子
        max_drift: 加密一次后经验常数允许的相对漂移
        band_widening: 加密一次后等价带允许的相对变宽
    """

    workers: int = 1
    seed: int = 12345
    max_drift: float = 0.25
    band_widening: float = 0.25


@dataclass
class Config:
    """
    全局配置类

    从 JSON 文件加载配置，支持重载。

    使用方法:
        from core.config import CONFIG

        print(CONFIG.grid.nodes_per_axis)
        print(CONFIG.solver.capacity_method)

    从文件加载:
        CONFIG.load_from_file('config.json')

    保存到文件:
        CONFIG.save_to_file('config.json')
    """

    grid: GridConfig = field(default_factory=GridConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    experiment: ExperimentDefaults = field(default_factory=ExperimentDefaults)

    # 配置文件路径
    _config_path: Optional[str] = field(default=None, repr=False)
    _loaded: bool = field(default=False, repr=False)

    SECTIONS = ('grid', 'solver', 'output', 'experiment')

    def load_from_file(self, path: str) -> bool:
        """
        从 JSON 文件加载配置

        Args:
            path: 配置文件路径

        Returns:
            True 如果成功；文件不存在时返回 False 并保留默认值

        Raises:
            ConfigurationError: JSON 格式错误或出现未知字段
        """
        config_path = Path(path)
        if not config_path.exists():
            logger.debug(f"Config file not found: {path}")
            return False

        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Invalid JSON in {path}: {e}") from e

        for section, values in data.items():
            if section not in self.SECTIONS:
                raise ConfigurationError(f"Unknown config section '{section}' in {path}")
            self._update_dataclass(getattr(self, section), values, section)

        self.solver.__post_init__()
        self._config_path = path
        self._loaded = True
        logger.info(f"Loaded config: {path}")
        return True

    def save_to_file(self, path: str):
        """
        保存配置到 JSON 文件

        Args:
            path: 配置文件路径
        """
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)
        logger.info(f"Saved config: {path}")

    def reload(self) -> bool:
        """
        重新加载配置文件

        Returns:
            True 如果成功
        """
        if self._config_path:
            return self.load_from_file(self._config_path)
        return False

    @staticmethod
    def _update_dataclass(obj, data: dict, section: str):
        """更新 dataclass 对象的属性，拒绝未知字段"""
        known = {f.name for f in fields(obj)}
        for key, value in data.items():
            if key not in known:
                raise ConfigurationError(f"Unknown key '{section}.{key}'")
            setattr(obj, key, value)

    def to_dict(self) -> dict:
        """转换为字典"""
        return {section: asdict(getattr(self, section)) for section in self.SECTIONS}

    def __str__(self) -> str:
        """友好的字符串表示"""
        lines = ["=== Capacity toolkit config ==="]
        lines.append(f"grid: nodes={self.grid.nodes_per_axis}, steps={self.grid.time_steps}")
        lines.append(f"solver: tol={self.solver.tol}, method={self.solver.capacity_method}")
        lines.append(f"output: {self.output.directory}")
        lines.append(f"experiment: workers={self.experiment.workers}, seed={self.experiment.seed}")
        return '\n'.join(lines)


# ============ 全局配置实例 ============

CONFIG = Config()

_config_loaded = False
_default_config_paths = [
    Path(__file__).parent.parent / 'config.json',  # 项目根目录
    Path.cwd() / 'config.json',  # 当前工作目录
]


def _ensure_config_loaded():
    """确保配置已加载（延迟加载，避免导入时读文件）"""
    global _config_loaded

    if _config_loaded:
        return

    for config_path in _default_config_paths:
        if config_path.exists():
            CONFIG.load_from_file(str(config_path))
            break

    _config_loaded = True


# ============ 便捷访问 ============

def get_config() -> Config:
    """获取全局配置（首次调用时加载 config.json）"""
    _ensure_config_loaded()
    return CONFIG


def load_config(path: str) -> Config:
    """
    加载指定配置文件

    Args:
        path: 配置文件路径

    Returns:
        Config 实例
    """
    _ensure_config_loaded()
    CONFIG.load_from_file(path)
    return CONFIG


def reset_config():
    """重置配置为默认值（原地重置，已导入的引用同样生效）"""
    global _config_loaded
    for section in Config.SECTIONS:
        setattr(CONFIG, section, type(getattr(CONFIG, section))())
    CONFIG._config_path = None
    CONFIG._loaded = False
    _config_loaded = True
