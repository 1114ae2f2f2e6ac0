"""
pytest 公共夹具
"""

import os
import sys

import pytest

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.stgrid import Domain, build_grid  # noqa: E402


@pytest.fixture
def grid_1d():
    """Ω = (-1,1)，T = 1，33 个节点、8 步"""
    return build_grid(Domain.box((-1.0,), (1.0,), 1.0, 2.0), 33, 8)


@pytest.fixture
def grid_2d():
    """Ω = (-1,1)²，T = 1，9×9 个节点、4 步"""
    return build_grid(Domain.box((-1.0, -1.0), (1.0, 1.0), 1.0, 2.0), 9, 4)


@pytest.fixture
def unit_grid():
    """Ω = (0,1)，T = 1，129 个节点、64 步"""
    return build_grid(Domain.box((0.0,), (1.0,), 1.0, 2.0), 129, 64)
