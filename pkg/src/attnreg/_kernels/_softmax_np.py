"""Pure-numpy implementations of the hot row-softmax kernels."""

from __future__ import annotations

import numpy as np

NAME = "numpy"


def softmax_scaled(x: np.ndarray, scale: float) -> np.ndarray:
    """Row softmax of ``x * scale`` along the last axis, max-stabilized."""
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp((x - m) * scale)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Backward pass of row softmax: given a = softmax(z) and g = dL/da,
    return dL/dz = a * (g - sum_k g_k a_k) per row."""
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    dot = np.einsum("...k,...k->...", g, a)[..., None]
    return a * (g - dot)
