"""Cascaded filter pruning with hierarchical knowledge distillation.

A self-contained training engine: a minimal reverse-mode autodiff tensor
library, learned per-filter binary masks with straight-through surrogate
gradients, a weight-shared teacher/TA/student hierarchy, and exact
FLOPs/parameter accounting.
"""

__version__ = "0.1.0"
