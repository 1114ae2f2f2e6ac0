"""
产物归档

把计算得到的场、集合掩码和容量报告保存到一个文件，
不等式台账可以直接复用已算好的 balayage，而不必重新求解。

文件格式：
    4 字节魔数 + msgpack 数据
    'PCAZ' - msgpack 经 zlib 压缩
    'PCAM' - 未压缩的 msgpack

数组以小端 float64 / bool 的原始字节保存，网格以区域描述 + 节点数 + 步数保存，
读回时重建网格。
"""

from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Any, Dict, Optional
import logging
import zlib

import msgpack
import numpy as np

from .errors import ContractError, DependencyError
from .report import CapacityReport, to_jsonable
from .stgrid import Domain, ScalarField, SetMask, ShapeSpec, SpaceTimeGrid

logger = logging.getLogger(__name__)

MAGIC_COMPRESSED = b'PCAZ'
MAGIC_RAW = b'PCAM'


def _grid_to_dict(grid: SpaceTimeGrid) -> dict:
    return {'domain': grid.domain.to_dict(), 'nodes_per_axis': grid.space.nodes_per_axis,
            'time_steps': grid.time_steps}


def _array_to_dict(values: np.ndarray) -> dict:
    array = np.ascontiguousarray(values)
    dtype = '<f8' if array.dtype != bool else '|b1'
    return {'dtype': dtype, 'shape': list(array.shape), 'data': array.astype(dtype).tobytes()}


def _array_from_dict(data: dict) -> np.ndarray:
    return np.frombuffer(data['data'], dtype=np.dtype(data['dtype'])).reshape(data['shape']).copy()


@dataclass
class ArchiveHeader:
    """归档文件头"""
    version: str = "1.0"
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'ArchiveHeader':
        return cls(**data)


class ArtifactArchive:
    """
    产物归档

    每个条目记录产物类型、生成它的操作名和数据。
    读取缺失的条目时抛出 DependencyError，指明应当先运行的操作。
    """

    def __init__(self, seed: int = 0, metadata: Optional[dict] = None):
        self.header = ArchiveHeader(seed=seed, metadata=dict(metadata or {}))
        self.entries: Dict[str, dict] = {}
        self._grids: Dict[str, SpaceTimeGrid] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def _grid(self, data: dict) -> SpaceTimeGrid:
        key = repr(sorted(to_jsonable(data).items()))
        if key not in self._grids:
            domain = Domain(**{**data['domain'], 'lower': tuple(data['domain']['lower']),
                               'upper': tuple(data['domain']['upper'])})
            self._grids[key] = SpaceTimeGrid(domain, data['nodes_per_axis'], data['time_steps'])
        return self._grids[key]

    def _entry(self, name: str, kind: str, producer: str) -> dict:
        entry = self.entries.get(name)
        if entry is None:
            raise DependencyError(f"artifact '{name}' is missing from the archive", producer)
        if entry['kind'] != kind:
            raise ContractError(f"artifact '{name}' is a {entry['kind']}, expected a {kind}")
        return entry

    # ---------- 写入 ----------

    def put_field(self, name: str, v: ScalarField, producer: str):
        self.entries[name] = {'kind': 'field', 'producer': producer, 'grid': _grid_to_dict(v.grid),
                              'values': _array_to_dict(v.values)}

    def put_mask(self, name: str, mask: SetMask, producer: str):
        self.entries[name] = {'kind': 'mask', 'producer': producer, 'grid': _grid_to_dict(mask.grid),
                              'values': _array_to_dict(mask.values),
                              'provenance': mask.provenance.to_dict() if mask.provenance else None}

    def put_report(self, name: str, report: CapacityReport, producer: str):
        """保存报告摘要；若极小元是时空场则一并保存为 '<name>/minimizer'"""
        self.entries[name] = {'kind': 'report', 'producer': producer, 'report': report.to_dict()}
        if isinstance(report.minimizer, ScalarField):
            self.put_field(f'{name}/minimizer', report.minimizer, producer)

    # ---------- 读取 ----------

    def get_field(self, name: str, producer: str) -> ScalarField:
        entry = self._entry(name, 'field', producer)
        return ScalarField(self._grid(entry['grid']), _array_from_dict(entry['values']))

    def get_mask(self, name: str, producer: str) -> SetMask:
        entry = self._entry(name, 'mask', producer)
        spec = ShapeSpec.from_dict(entry['provenance']) if entry.get('provenance') else None
        return SetMask(self._grid(entry['grid']), _array_from_dict(entry['values']), spec)

    def get_report(self, name: str, producer: str) -> dict:
        return self._entry(name, 'report', producer)['report']

    # ---------- 文件 ----------

    def save(self, filename: str, compress: bool = True):
        """
        保存归档文件

        Args:
            filename: 文件名
            compress: 是否压缩
        """
        data = msgpack.packb({'header': self.header.to_dict(), 'entries': self.entries},
                             use_bin_type=True)
        if compress:
            data = zlib.compress(data, level=9)
        path = Path(filename)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(MAGIC_COMPRESSED if compress else MAGIC_RAW)
            f.write(data)
        logger.info(f"Saved {len(self.entries)} artifacts to {path}")

    @classmethod
    def load(cls, filename: str, producer: str = 'check') -> 'ArtifactArchive':
        """
        加载归档文件

        Args:
            filename: 文件名
            producer: 文件不存在时报告的生成操作名

        Raises:
            DependencyError: 文件不存在
            ContractError: 魔数不符
        """
        path = Path(filename)
        if not path.exists():
            raise DependencyError(f"archive {path} does not exist", producer)
        with open(path, 'rb') as f:
            magic = f.read(4)
            data = f.read()

        if magic == MAGIC_COMPRESSED:
            data = zlib.decompress(data)
        elif magic != MAGIC_RAW:
            raise ContractError(f"Invalid archive file format: {magic!r}")

        parsed = msgpack.unpackb(data, raw=False, strict_map_key=False)
        archive = cls()
        archive.header = ArchiveHeader.from_dict(parsed['header'])
        archive.entries = parsed['entries']
        return archive

    def get_stats(self) -> Dict[str, Any]:
        """各类产物的数量"""
        stats: Dict[str, Any] = {'entries': len(self.entries)}
        for entry in self.entries.values():
            stats[entry['kind']] = stats.get(entry['kind'], 0) + 1
        return stats
