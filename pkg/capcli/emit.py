"""
报告输出

emit(report, fmt, directory, stem) 把报告写成 JSON、CSV 或 SVG 图：
- json: 键排序、缩进 2 的 JSON
- csv: report.to_frame()（没有时展平 to_dict()），列顺序固定
- plot: matplotlib SVG，固定尺寸、固定 hashsalt、不写日期，因此字节确定

同一份报告重复输出得到完全相同的字节。
"""

from pathlib import Path
from typing import Any, List, Optional, Sequence
import json
import logging

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from core.config import get_config  # noqa: E402
from core.report import CapacityReport, to_jsonable  # noqa: E402
from core.stgrid import ScalarField, l2_per_level  # noqa: E402

logger = logging.getLogger(__name__)

FORMATS = ('json', 'csv', 'plot')


def report_frame(report: Any) -> pd.DataFrame:
    """报告的表格形式"""
    to_frame = getattr(report, 'to_frame', None)
    if callable(to_frame):
        return to_frame()
    data = report.to_dict() if report is not None else {}
    if not data:
        return pd.DataFrame()
    return pd.json_normalize(to_jsonable(data), sep='.')


def _capacity_plot(report: CapacityReport) -> Optional[dict]:
    v = report.minimizer
    if not isinstance(v, ScalarField):
        return None
    return {'title': f'{report.kind} capacity minimizer', 'xlabel': 't', 'ylabel': 'L2 energy per level',
            'series': [{'label': 'int v^2 dx', 'x': list(v.grid.times), 'y': list(l2_per_level(v))}]}


def plot_spec(report: Any) -> dict:
    """报告的绘图描述；不可绘制的报告返回只有标题的空图"""
    plot_data = getattr(report, 'plot_data', None)
    spec = plot_data() if callable(plot_data) else None
    if spec is None and isinstance(report, CapacityReport):
        spec = _capacity_plot(report)
    if spec is None:
        spec = {'title': type(report).__name__ if report is not None else 'empty report', 'series': []}
    return spec


def _draw(spec: dict, path: Path):
    output = get_config().output
    with plt.rc_context({'svg.hashsalt': output.svg_hashsalt, 'svg.fonttype': 'none'}):
        fig, ax = plt.subplots(figsize=(output.plot_width, output.plot_height))
        plotted = False
        for series in spec.get('series', []):
            x = np.asarray(series['x'], dtype=float)
            y = np.asarray(series['y'], dtype=float)
            keep = np.isfinite(x) & np.isfinite(y)
            if spec.get('loglog') or spec.get('logy'):
                keep &= y > 0
            if spec.get('loglog'):
                keep &= x > 0
            if not keep.any():
                continue
            ax.plot(x[keep], y[keep], marker=series.get('marker', 'o'), label=series['label'])
            plotted = True
        if plotted:
            if spec.get('loglog'):
                ax.set_xscale('log')
                ax.set_yscale('log')
            elif spec.get('logy'):
                ax.set_yscale('log')
            ax.legend(loc='best')
        if spec.get('xticks'):
            ax.set_xticks(range(len(spec['xticks'])))
            ax.set_xticklabels(spec['xticks'], rotation=20)
        ax.set_title(spec.get('title', ''))
        ax.set_xlabel(spec.get('xlabel', ''))
        ax.set_ylabel(spec.get('ylabel', ''))
        ax.grid(True, ls=':', alpha=0.4)
        fig.tight_layout()
        fig.savefig(path, format='svg', metadata={'Date': None})
        plt.close(fig)


def emit(report: Any, fmt: str, directory: str, stem: str) -> Path:
    """
    输出一份报告

    Args:
        report: 带 to_dict() 的报告（可选 to_frame()、plot_data()）
        fmt: 'json'、'csv' 或 'plot'
        directory: 输出目录（不存在时创建）
        stem: 文件名主干

    Returns:
        写出的文件路径

    Raises:
        ValueError: 未知格式
        OSError: 写文件失败（消息含路径）
    """
    if fmt not in FORMATS:
        raise ValueError(f"unknown output format '{fmt}', expected one of {FORMATS}")
    out_dir = Path(directory)
    suffix = {'json': '.json', 'csv': '.csv', 'plot': '.svg'}[fmt]
    path = out_dir / f'{stem}{suffix}'
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if fmt == 'json':
            data = to_jsonable(report.to_dict()) if report is not None else {}
            with open(path, 'w', encoding='utf-8', newline='\n') as f:
                json.dump(data, f, sort_keys=True, indent=2, ensure_ascii=False)
                f.write('\n')
        elif fmt == 'csv':
            report_frame(report).to_csv(path, index=False, float_format=get_config().output.float_format,
                                        lineterminator='\n')
        else:
            _draw(plot_spec(report), path)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    logger.info(f"wrote {path}")
    return path


def emit_all(report: Any, formats: Sequence[str], directory: str, stem: str) -> List[Path]:
    return [emit(report, fmt, directory, stem) for fmt in formats]
