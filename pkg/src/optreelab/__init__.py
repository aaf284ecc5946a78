"""Aligning function images, operation-tree skeletons and formula strings.

Submodules: ``tree``/``formula`` (symbolic core), ``funcimg`` (rendering),
``features``/``losses``/``nets`` (learning), ``teacher``, ``train``,
``lbfgs``, ``metrics``, ``data``, ``checkpoint``, ``report``, ``pipeline``, ``cli``.
"""

from .errors import OptreeError
from .formula import parse_formula, tree_to_formula
from .funcimg import build_meshgrid, render_image
from .metrics import levenshtein, metric_suite
from .tree import ConstVec, GenConfig, OperationTree, Ots, eval_tree, ots_to_tree, sample_tree, tree_to_ots
from .vocab import OperatorVocab

__version__ = "0.1.0"

__all__ = [
    "OptreeError", "parse_formula", "tree_to_formula", "build_meshgrid", "render_image", "levenshtein",
    "metric_suite", "ConstVec", "GenConfig", "OperationTree", "Ots", "eval_tree", "ots_to_tree",
    "sample_tree", "tree_to_ots", "OperatorVocab",
]
