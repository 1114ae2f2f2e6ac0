"""
容量报告

本模块提供各容量求解器共用的结果类型：
- WNormBreakdown: W 范数的分项
- CapacityReport: 容量值、分项、极小元、可行性残差与耗时

报告序列化为 JSON：
    {set_spec, p, grid, value, terms:{grad,dual,supL2}, residuals, iterations[, seconds]}

seconds 只在 output.timings 打开时写入；默认关闭，同一配置重复运行得到相同的字节。
哈希从不包含耗时。
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional
import hashlib
import json
import math

import numpy as np

from .config import get_config


def to_jsonable(obj: Any) -> Any:
    """把 numpy 标量/数组和元组转换为 JSON 可序列化的对象"""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    return obj


def canonical_json(data: Any) -> str:
    """确定性 JSON（键排序、紧凑分隔符）"""
    return json.dumps(to_jsonable(data), sort_keys=True, separators=(',', ':'))


def digest(data: Any) -> str:
    """canonical_json 的 MD5"""
    return hashlib.md5(canonical_json(data).encode()).hexdigest()


@dataclass(frozen=True)
class WNormBreakdown:
    """
    W 范数分项

    属性:
        grad (float): ∬|∇v|^p
        dual (float): ‖∂ₜv‖_{V′}^{p′}
        sup (float): sup_t ∫v²
    """
    grad: float
    dual: float
    sup: float

    @property
    def total(self) -> float:
        return self.grad + self.dual + self.sup

    def to_dict(self) -> dict:
        return {'grad': self.grad, 'dual': self.dual, 'supL2': self.sup}


@dataclass(frozen=True, eq=False)
class CapacityReport:
    """
    容量报告

    属性:
        value (float): 容量值（≥ 0）
        kind (str): 'variational' / 'elliptic' / 'measure' / 'energy'
        p (float): 指数
        terms (Optional[WNormBreakdown]): 极小元的 W 范数分项（变分容量）
        minimizer: 极小元（ScalarField 或 SpatialField）
        flux: 见证通量 FluxField（变分容量）
        residuals (Dict[str, float]): 可行性残差，如 obstacle、coupling、kkt、gap
        iterations (int): 外层迭代次数
        seconds (float): 墙钟耗时
        set_spec (dict): 集合描述（ShapeSpec.to_dict 或原始掩码摘要）
        grid (dict): 网格描述
        extras (Dict[str, Any]): 其他诊断量（如并集的柱体上界、回退记录）
    """
    value: float
    kind: str
    p: float
    terms: Optional[WNormBreakdown] = None
    minimizer: Any = None
    flux: Any = None
    residuals: Dict[str, float] = field(default_factory=dict)
    iterations: int = 0
    seconds: float = 0.0
    set_spec: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    extras: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self, timings: Optional[bool] = None) -> dict:
        """
        转换为报告 JSON 结构（不含场数据）

        Args:
            timings: 是否写入 seconds（默认取 CONFIG.output.timings）
        """
        data = {
            'set_spec': self.set_spec,
            'kind': self.kind,
            'p': self.p,
            'grid': self.grid,
            'value': self.value,
            'terms': self.terms.to_dict() if self.terms is not None else None,
            'residuals': dict(self.residuals),
            'iterations': self.iterations,
        }
        if self.extras:
            data['extras'] = self.extras
        if get_config().output.timings if timings is None else timings:
            data['seconds'] = self.seconds
        return to_jsonable(data)

    def compute_hash(self) -> str:
        """
        计算报告的确定性哈希

        Returns:
            32 字符的十六进制哈希字符串
        """
        return digest(self.to_dict(timings=False))
