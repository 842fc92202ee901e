"""Dense cross-attention math: logit blocks, row-softmax maps, per-token grids.

Shapes follow one convention throughout: H heads, M = w*w spatial cells
(queries), N tokens (keys). Attention rows are indexed by (head, cell) and
distribute mass over tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import softmax_scaled

ROW_SUM_TOL = 1e-9


def _own_readonly(arr, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _first_nonfinite(values: np.ndarray) -> tuple:
    bad = np.argwhere(~np.isfinite(values))
    return tuple(int(v) for v in bad[0])


@dataclass(frozen=True)
class LogitBlock:
    """Raw scaled-dot-product scores Q.K^T for one cross-attention layer.

    logits has shape (H, M, N); d is the key dimension used for the 1/sqrt(d)
    softmax scale; w is the spatial grid side with w*w = M.
    """

    logits: np.ndarray
    d: int
    w: int
    layer_id: str = ""

    def __post_init__(self):
        logits = _own_readonly(self.logits)
        if logits.ndim != 3:
            raise ValueError(f"logits must be (H, M, N), got shape {logits.shape}")
        h, m, n = logits.shape
        if h < 1 or n < 1:
            raise ValueError(f"need H >= 1 and N >= 1, got H={h}, N={n}")
        if self.d < 1:
            raise ValueError(f"key dimension must be >= 1, got {self.d}")
        if self.w < 1 or self.w * self.w != m:
            raise ValueError(f"w={self.w} inconsistent with M={m} (need w*w = M)")
        if not np.isfinite(logits).all():
            head, row, col = _first_nonfinite(logits)
            raise ValueError(
                f"non-finite logit at head {head}, row {row}, token {col}"
                + (f" in layer {self.layer_id!r}" if self.layer_id else "")
            )
        object.__setattr__(self, "logits", logits)

    @property
    def H(self) -> int:
        return self.logits.shape[0]

    @property
    def M(self) -> int:
        return self.logits.shape[1]

    @property
    def N(self) -> int:
        return self.logits.shape[2]


@dataclass(frozen=True)
class AttentionMap:
    """Row-stochastic attention values, shape (H, M, N)."""

    values: np.ndarray
    w: int
    layer_id: str = ""

    def __post_init__(self):
        values = _own_readonly(self.values)
        if values.ndim != 3:
            raise ValueError(f"values must be (H, M, N), got shape {values.shape}")
        h, m, n = values.shape
        if self.w * self.w != m:
            raise ValueError(f"w={self.w} inconsistent with M={m} (need w*w = M)")
        if not np.isfinite(values).all():
            head, row, col = _first_nonfinite(values)
            raise ValueError(
                f"non-finite attention value at head {head}, row {row}, token {col}"
            )
        if values.min() < 0.0 or values.max() > 1.0:
            raise ValueError("attention values must lie in [0, 1]")
        dev = np.abs(values.sum(axis=-1) - 1.0)
        if dev.max() > ROW_SUM_TOL:
            head, row = (int(v) for v in np.unravel_index(dev.argmax(), dev.shape))
            raise ValueError(
                f"row sum off by {dev.max():.3e} at head {head}, row {row}"
                f" (tolerance {ROW_SUM_TOL})"
            )
        object.__setattr__(self, "values", values)

    @property
    def H(self) -> int:
        return self.values.shape[0]

    @property
    def M(self) -> int:
        return self.values.shape[1]

    @property
    def N(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class TokenMap2D:
    """One token's attention column reshaped to the w x w spatial grid.

    Entries are non-negative and finite. Grids taken straight from an
    AttentionMap lie in [0, 1]; derived grids (e.g. after additive map
    injection) may exceed 1.
    """

    grid: np.ndarray
    token_index: int

    def __post_init__(self):
        grid = _own_readonly(self.grid)
        if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
            raise ValueError(f"grid must be square 2-D, got shape {grid.shape}")
        if not np.isfinite(grid).all():
            raise ValueError("non-finite entry in token map")
        if grid.min() < 0.0:
            raise ValueError("token map entries must be non-negative")
        if self.token_index < 0:
            raise ValueError(f"token_index must be >= 0, got {self.token_index}")
        object.__setattr__(self, "grid", grid)

    @property
    def w(self) -> int:
        return self.grid.shape[0]


def compute_attention(block: LogitBlock) -> AttentionMap:
    """Row softmax of logits / sqrt(d) per head. Rows come out stochastic."""
    values = softmax_scaled(block.logits, 1.0 / math.sqrt(block.d))
    return AttentionMap(values=values, w=block.w, layer_id=block.layer_id)


def attention_output(attn: AttentionMap, v: np.ndarray) -> np.ndarray:
    """Apply attention to values: A @ V per head.

    v is either (N, d_v) shared across heads or (H, N, d_v) per head; the
    result is (H, M, d_v).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 2:
        if v.shape[0] != attn.N:
            raise ValueError(f"V has {v.shape[0]} rows, attention has N={attn.N}")
        return np.einsum("hmn,nd->hmd", attn.values, v)
    if v.ndim == 3:
        if v.shape[0] != attn.H or v.shape[1] != attn.N:
            raise ValueError(
                f"V shape {v.shape} incompatible with (H={attn.H}, N={attn.N}, d_v)"
            )
        return np.einsum("hmn,hnd->hmd", attn.values, v)
    raise ValueError(f"V must be 2-D or 3-D, got shape {v.shape}")


def unravel(attn: AttentionMap, head: int, token: int) -> TokenMap2D:
    """Reshape one (head, token) attention column to its w x w grid, row-major."""
    if not 0 <= head < attn.H:
        raise ValueError(f"head {head} out of range [0, {attn.H})")
    if not 0 <= token < attn.N:
        raise ValueError(f"token {token} out of range [0, {attn.N})")
    grid = attn.values[head, :, token].reshape(attn.w, attn.w)
    return TokenMap2D(grid=grid, token_index=token)


def flatten_grid(token_map: TokenMap2D) -> np.ndarray:
    """Inverse of unravel: row-major flatten back to a length-M column."""
    return token_map.grid.reshape(-1).copy()


def head_average(attn: AttentionMap) -> np.ndarray:
    """Mean over heads, shape (M, N). Rows stay stochastic."""
    return attn.values.mean(axis=0)
