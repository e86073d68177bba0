"""Streaming 4D reconstruction toolkit.

Grouped causal attention with KV-cache streaming inference, motion-aware
training losses, motion-mask extraction from flow discrepancy, and
trajectory/depth evaluation, all on a small float64 autodiff core.
"""

from .tensor import Tape, Tensor, finite_diff_check, softmax_rows, stop_gradient

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "finite_diff_check", "softmax_rows",
           "stop_gradient", "__version__"]
