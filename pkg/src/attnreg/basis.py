"""Gaussian-basis parameterization of additive logit edits.

A perturbation over the w x w grid is a weighted sum of r*r fixed Gaussian
kernels whose centers sit on the lattice (2*sigma*p, 2*sigma*q), 1-based, for
p, q = 1..r with r = w / (2*sigma). The weights theta (r x r, one grid per
edited token) are the only learnable quantity: r*r = M / (4*sigma^2) scalars.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from .attention import AttentionMap, LogitBlock, _own_readonly, compute_attention
from ._kernels import softmax_scaled


def gaussian_kernel(x0: int, y0: int, sigma: int, w: int) -> np.ndarray:
    """w x w kernel with entry (i, j) = exp(-((i-y0)^2 + (j-x0)^2) / (2 sigma^2)),
    indices 1-based. x0 is the column center, y0 the row center."""
    if w < 1:
        raise ValueError(f"grid side must be >= 1, got {w}")
    if sigma < 1:
        raise ValueError(f"sigma must be >= 1, got {sigma}")
    if not (1 <= x0 <= w and 1 <= y0 <= w):
        raise ValueError(f"center ({x0}, {y0}) outside 1..{w} grid")
    idx = np.arange(1, w + 1, dtype=np.float64)
    di2 = (idx - y0) ** 2
    dj2 = (idx - x0) ** 2
    return np.exp(-(di2[:, None] + dj2[None, :]) / (2.0 * sigma * sigma))


def default_sigma(w: int) -> int:
    """Largest kernel width consistent with the grid: aims for r = 4 at w = 16
    and r = 2 at the coarser sides, always keeping 2*sigma a divisor of w."""
    r = max(2, w // 4)
    if w % (2 * r) == 0:
        return w // (2 * r)
    for sigma in range(w // 4, 0, -1):
        if w % (2 * sigma) == 0:
            return sigma
    raise ValueError(f"no valid sigma for grid side {w}")


@dataclass(frozen=True)
class GaussianBasis:
    """All r*r kernels for one (w, sigma), plus their flattened form.

    kernels[p-1, q-1] is gaussian_kernel(x0=2*sigma*p, y0=2*sigma*q, sigma, w);
    flat is the same data reshaped to (r, r, M) for gradient contractions.
    """

    w: int
    sigma: int
    kernels: np.ndarray = field(repr=False)
    flat: np.ndarray = field(repr=False)

    @property
    def r(self) -> int:
        return self.w // (2 * self.sigma)


@lru_cache(maxsize=None)
def make_basis(w: int, sigma: int) -> GaussianBasis:
    if sigma < 1:
        raise ValueError(f"sigma must be >= 1, got {sigma}")
    if w % (2 * sigma) != 0:
        raise ValueError(f"2*sigma = {2 * sigma} must divide w = {w}")
    r = w // (2 * sigma)
    kernels = np.empty((r, r, w, w), dtype=np.float64)
    for p in range(1, r + 1):
        for q in range(1, r + 1):
            kernels[p - 1, q - 1] = gaussian_kernel(2 * sigma * p, 2 * sigma * q, sigma, w)
    kernels.setflags(write=False)
    flat = kernels.reshape(r, r, w * w).copy()
    flat.setflags(write=False)
    return GaussianBasis(w=w, sigma=sigma, kernels=kernels, flat=flat)


@dataclass(frozen=True)
class EditParams:
    """Learnable weights for one (layer, target token): theta is r x r."""

    theta: np.ndarray
    sigma: int
    layer_id: str
    token_index: int

    def __post_init__(self):
        theta = _own_readonly(self.theta)
        if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
            raise ValueError(f"theta must be square 2-D, got shape {theta.shape}")
        if not np.isfinite(theta).all():
            raise ValueError(
                f"non-finite theta for layer {self.layer_id!r}, token {self.token_index}"
            )
        object.__setattr__(self, "theta", theta)

    @classmethod
    def zeros(cls, basis: GaussianBasis, layer_id: str, token_index: int) -> "EditParams":
        return cls(
            theta=np.zeros((basis.r, basis.r)),
            sigma=basis.sigma,
            layer_id=layer_id,
            token_index=token_index,
        )

    def with_theta(self, theta: np.ndarray) -> "EditParams":
        return EditParams(
            theta=theta, sigma=self.sigma, layer_id=self.layer_id, token_index=self.token_index
        )


def build_perturbation(params: EditParams, basis: GaussianBasis) -> np.ndarray:
    """S_t = sum_{p,q} theta[p,q] * kernel[p,q], a w x w map. Linear in theta."""
    if params.sigma != basis.sigma:
        raise ValueError(f"sigma mismatch: params {params.sigma}, basis {basis.sigma}")
    if params.theta.shape != (basis.r, basis.r):
        raise ValueError(
            f"theta shape {params.theta.shape} does not match basis r={basis.r}"
        )
    return np.einsum("pq,pqij->ij", params.theta, basis.kernels)


def build_s_full(s_maps: Mapping[int, np.ndarray], m: int, n: int, w: int) -> np.ndarray:
    """Assemble the (M, N) additive logit matrix: column t is S_t flattened
    row-major for each edited token t, zero columns elsewhere."""
    s_full = np.zeros((m, n), dtype=np.float64)
    for token, s_map in s_maps.items():
        if not 0 <= token < n:
            raise ValueError(f"target token {token} out of range [0, {n})")
        s_map = np.asarray(s_map, dtype=np.float64)
        if s_map.shape != (w, w):
            raise ValueError(
                f"perturbation for token {token} has shape {s_map.shape}, expected {(w, w)}"
            )
        s_full[:, token] = s_map.reshape(-1)
    return s_full


def apply_edit(
    block: LogitBlock, s_maps: Mapping[int, np.ndarray], targets: frozenset | set
) -> AttentionMap:
    """Softmax of (QK^T + S_full) / sqrt(d) per head, sharing one S_full across
    heads. s_maps must carry exactly the target tokens. All-zero maps take the
    unedited path so a zero edit reproduces compute_attention bit-for-bit."""
    if set(s_maps.keys()) != set(targets):
        raise ValueError(
            f"perturbation keys {sorted(s_maps)} do not match targets {sorted(targets)}"
        )
    s_full = build_s_full(s_maps, block.M, block.N, block.w)
    if not s_full.any():
        return compute_attention(block)
    values = softmax_scaled(block.logits + s_full[None, :, :], 1.0 / math.sqrt(block.d))
    return AttentionMap(values=values, w=block.w, layer_id=block.layer_id)
