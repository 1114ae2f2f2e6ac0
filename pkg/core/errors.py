"""
错误类型

本模块定义工具包统一的异常层次：
- CapacityError: 所有错误的基类
- ConfigurationError / GeometryError / ContractError: 输入不合法
- SolverError: 迭代求解失败，携带最后的残差
- ResolutionError / DependencyError / DomainError: 其他前置条件失败

库代码只抛出异常，由 capcli.main 统一转换为退出码。
"""

from typing import Optional


class CapacityError(Exception):
    """工具包所有异常的基类"""


class ConfigurationError(CapacityError, ValueError):
    """配置错误：区域、网格、指数或配置文件不合法"""


class GeometryError(CapacityError, ValueError):
    """几何错误：集合超出 Ω_T 或贴近侧边界"""


class ContractError(CapacityError, ValueError):
    """契约错误：场的形状与网格不匹配、数值非有限等"""


class ResolutionError(CapacityError, ValueError):
    """分辨率错误：请求的尺度小于网格可分辨的尺度"""


class DomainError(CapacityError, ValueError):
    """定义域错误：在函数定义域之外求值"""


class SolverError(CapacityError, RuntimeError):
    """
    求解器未收敛

    属性:
        residual (float): 最后一次迭代的残差
        iterations (int): 已执行的迭代次数
        step (Optional[int]): 时间步编号（演化求解时）
        gap (Optional[float]): 原始-对偶残差（容量规划求解时）
    """

    def __init__(self, message: str, residual: float = float('nan'),
                 iterations: int = 0, step: Optional[int] = None,
                 gap: Optional[float] = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.step = step
        self.gap = gap

    def __str__(self) -> str:
        parts = [super().__str__(), f"residual={self.residual:.3e}",
                 f"iterations={self.iterations}"]
        if self.step is not None:
            parts.append(f"step={self.step}")
        if self.gap is not None:
            parts.append(f"gap={self.gap:.3e}")
        return ', '.join(parts)


class DependencyError(CapacityError, LookupError):
    """
    缺少前置产物

    属性:
        producer (str): 应当生成该产物的操作名
    """

    def __init__(self, message: str, producer: str):
        super().__init__(f"{message} (produced by `{producer}`)")
        self.producer = producer
