"""Scaled-dot-product attention kernels with a compiled/numpy backend switch.

The compiled Cython extension is picked at import when it was built;
otherwise everything runs through the numpy fallback. ``STREAM4D_BACKEND``
(``compiled`` | ``numpy``) forces the choice, and :func:`set_backend`
switches it at runtime (the bench CLI compares both).
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from . import _attnkernel  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:
    _attnkernel = None
    HAVE_COMPILED = False

_backend = os.environ.get("STREAM4D_BACKEND", "compiled" if HAVE_COMPILED else "numpy")


def available_backends() -> list[str]:
    return ["compiled", "numpy"] if HAVE_COMPILED else ["numpy"]


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("compiled", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and not HAVE_COMPILED:
        raise ValueError("compiled kernel is not built; reinstall with the extension")
    _backend = name


def sdpa_numpy(q: np.ndarray, k: np.ndarray, v: np.ndarray,
               visible: np.ndarray | None = None, return_weights: bool = True):
    """Reference attention: softmax(q k^T / sqrt(dh)) v per head.

    q: (h, n, dh); k, v: (h, m, dh); visible: (n, m) bool or None.
    Hidden weights are exactly 0; a fully hidden row raises.
    """
    dh = q.shape[-1]
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    if visible is not None:
        if not visible.any(axis=-1).all():
            raise ValueError("attention row has no visible keys")
        scores = np.where(visible[None, :, :], scores, -np.inf)
    m = scores.max(axis=-1, keepdims=True)
    w = np.exp(scores - m)
    w /= w.sum(axis=-1, keepdims=True)
    out = w @ v
    return out, (w if return_weights else None)


def sdpa_compiled(q, k, v, visible=None, return_weights: bool = True):
    if _attnkernel is None:
        raise RuntimeError("compiled kernel unavailable")
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    vis = None if visible is None else np.ascontiguousarray(visible, dtype=np.uint8)
    out, w = _attnkernel.sdpa(q, k, v, vis, bool(return_weights))
    return out, (w if return_weights else None)


def sdpa(q, k, v, visible=None, return_weights: bool = True):
    if _backend == "compiled":
        return sdpa_compiled(q, k, v, visible, return_weights)
    return sdpa_numpy(q, k, v, visible, return_weights)
