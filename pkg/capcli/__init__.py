"""
Command-line front end: experiments, inequality ledger and report emission
"""

from .emit import emit, emit_all
from .experiments import ExperimentConfig, run_cylinder_scaling, run_equivalence
from .ledger import check_inequalities
from .monster import MonsterParams, check_monster_residual, eval_monster

__all__ = [
    'emit', 'emit_all',
    'ExperimentConfig', 'run_cylinder_scaling', 'run_equivalence',
    'check_inequalities',
    'MonsterParams', 'check_monster_residual', 'eval_monster',
]
