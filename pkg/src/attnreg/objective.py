"""Regulation loss and its analytic gradient with respect to the edit weights.

The loss on an edited map A' against the original A is

    L = E(A', T) + beta * sqrt(sum((A' - A)^2) + eps)

where E, computed on the head-averaged map, drives each target token's
90th-quantile attention toward a setpoint and its column mass toward mu * M:

    E = (1/|T|) sum_t (phi(A'_t) - q_target)^2
      + alpha * (1/|T|) sum_t (sum(A'_t) - mu * M)^2

phi is a nearest-rank-lower quantile, so its subgradient lives entirely on the
single selected element and the chain rule through softmax stays exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from ._kernels import softmax_vjp
from .attention import AttentionMap, LogitBlock, compute_attention, head_average
from .basis import EditParams, GaussianBasis, apply_edit, build_perturbation

FRO_EPS = 1e-12

_REGULATORS = ("optimize", "scaling", "none")


@dataclass(frozen=True)
class RegulationConfig:
    """Every knob of the regulation pipeline, validated on construction.

    lam is the per-step geometric decay of the edit blend (written lambda in
    config files); tau, kappa_eos and i_p belong to the scaling regulator.
    i_p = None means the run derives it from padding-token attention.
    """

    beta: float = 0.1
    alpha: float = 1.0
    mu: float = 0.2
    q_level: float = 0.9
    q_target: float = 0.9
    eta: float = 0.1
    max_iters: int = 20
    tol: float = 1e-4
    kappa_ema: float = 0.5
    lam: float = 0.95
    t_thres: int = 25
    targets: tuple[int, ...] = ()
    edit_layers: tuple[str, ...] = ()
    cfg_scale: float = 7.5
    regulator: str = "optimize"
    tau: float = 1.1
    kappa_eos: float = 0.5
    i_p: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        object.__setattr__(self, "edit_layers", tuple(str(l) for l in self.edit_layers))
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.mu < 1:
            raise ValueError(f"mu must be in (0, 1), got {self.mu}")
        if not 0 < self.q_level < 1:
            raise ValueError(f"q_level must be in (0, 1), got {self.q_level}")
        if not math.isfinite(self.q_target):
            raise ValueError("q_target must be finite")
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.tol <= 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if not 0 <= self.kappa_ema <= 1:
            raise ValueError(f"kappa_ema must be in [0, 1], got {self.kappa_ema}")
        if not 0 < self.lam <= 1:
            raise ValueError(f"lambda must be in (0, 1], got {self.lam}")
        if self.t_thres < 0:
            raise ValueError(f"t_thres must be >= 0, got {self.t_thres}")
        if any(t < 0 for t in self.targets):
            raise ValueError(f"target indices must be >= 0, got {self.targets}")
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        if self.regulator not in _REGULATORS:
            raise ValueError(
                f"regulator must be one of {_REGULATORS}, got {self.regulator!r}"
            )
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.kappa_eos < 0:
            raise ValueError(f"kappa_eos must be >= 0, got {self.kappa_eos}")
        if self.i_p is not None and self.i_p < 0:
            raise ValueError(f"i_p must be >= 0 when given, got {self.i_p}")

    def replace(self, **changes) -> "RegulationConfig":
        return replace(self, **changes)


def quantile(values, q: float) -> tuple[float, int]:
    """Nearest-rank-lower quantile: the element at zero-based sorted index
    floor(q * (M - 1)). Returns (value, original index); on ties the lowest
    original position holding the selected value wins."""
    vals = np.asarray(values, dtype=np.float64).reshape(-1)
    if vals.size == 0:
        raise ValueError("quantile of an empty list")
    if not 0 < q < 1:
        raise ValueError(f"q must be in (0, 1), got {q}")
    k = int(math.floor(q * (vals.size - 1)))
    order = np.argsort(vals, kind="stable")
    value = vals[order[k]]
    index = int(np.flatnonzero(vals == value)[0])
    return float(value), index


def _error_terms(abar: np.ndarray, cfg: RegulationConfig) -> tuple[float, np.ndarray]:
    """E on a head-averaged (M, N) map plus dE/d(abar)."""
    if not cfg.targets:
        raise ValueError("target token set is empty")
    m, n = abar.shape
    for t in cfg.targets:
        if t >= n:
            raise ValueError(f"target token {t} out of range [0, {n})")
    grad = np.zeros_like(abar)
    inv = 1.0 / len(cfg.targets)
    quant_sq = 0.0
    mass_sq = 0.0
    for t in cfg.targets:
        col = abar[:, t]
        qval, qidx = quantile(col, cfg.q_level)
        resid = qval - cfg.q_target
        quant_sq += resid * resid
        grad[qidx, t] += 2.0 * inv * resid
        mresid = col.sum() - cfg.mu * m
        mass_sq += mresid * mresid
        grad[:, t] += 2.0 * cfg.alpha * inv * mresid
    e = inv * quant_sq + cfg.alpha * inv * mass_sq
    if not math.isfinite(e):
        raise ValueError("non-finite error term E")
    return e, grad


def error_E(a_prime: AttentionMap, cfg: RegulationConfig) -> float:
    """Quantile + mass error on the head-averaged target columns."""
    e, _ = _error_terms(head_average(a_prime), cfg)
    return e


def total_loss(a_prime: AttentionMap, a_orig: AttentionMap, cfg: RegulationConfig) -> float:
    """E(A', T) + beta * smoothed Frobenius distance over all heads."""
    if a_prime.values.shape != a_orig.values.shape:
        raise ValueError(
            f"shape mismatch: {a_prime.values.shape} vs {a_orig.values.shape}"
        )
    e, _ = _error_terms(head_average(a_prime), cfg)
    diff = a_prime.values - a_orig.values
    fro = math.sqrt(float((diff * diff).sum()) + FRO_EPS)
    return e + cfg.beta * fro


def loss_and_grad(
    block: LogitBlock,
    params_by_token: Mapping[int, EditParams],
    basis: GaussianBasis,
    cfg: RegulationConfig,
    a_orig: AttentionMap | None = None,
) -> tuple[float, dict[int, np.ndarray], AttentionMap]:
    """Loss at the given edit weights plus d(loss)/d(theta) for every target.

    The chain runs theta -> S (linear in the kernel basis) -> logit shift ->
    softmax rows -> head average -> E terms, alongside the Frobenius penalty
    acting on all heads. The quantile term back-propagates only through its
    selected element. Returns (loss, grads keyed by token, edited map).
    """
    if set(params_by_token) != set(cfg.targets):
        raise ValueError(
            f"edit params for {sorted(params_by_token)} do not match targets "
            f"{sorted(cfg.targets)}"
        )
    if a_orig is None:
        a_orig = compute_attention(block)
    s_maps = {t: build_perturbation(p, basis) for t, p in params_by_token.items()}
    a_prime = apply_edit(block, s_maps, set(cfg.targets))

    a = a_prime.values
    abar = a.mean(axis=0)
    e, de_dabar = _error_terms(abar, cfg)
    diff = a - a_orig.values
    fro = math.sqrt(float((diff * diff).sum()) + FRO_EPS)
    loss = e + cfg.beta * fro
    if not math.isfinite(loss):
        raise ValueError("non-finite total loss (frobenius term)")

    g_a = de_dabar[None, :, :] / block.H + (cfg.beta / fro) * diff
    dz = softmax_vjp(a, g_a)
    if not np.isfinite(dz).all():
        raise ValueError("non-finite softmax backward pass")
    ds_full = dz.sum(axis=0) / math.sqrt(block.d)

    grads: dict[int, np.ndarray] = {}
    for t in cfg.targets:
        g = np.einsum("pqm,m->pq", basis.flat, ds_full[:, t])
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite theta gradient for token {t}")
        grads[t] = g
    return loss, grads, a_prime


def grad_theta(
    block: LogitBlock,
    params_by_token: Mapping[int, EditParams],
    basis: GaussianBasis,
    cfg: RegulationConfig,
) -> dict[int, np.ndarray]:
    """Analytic gradient of total_loss with respect to every theta entry."""
    _, grads, _ = loss_and_grad(block, params_by_token, basis, cfg)
    return grads


def loss_at(
    block: LogitBlock,
    params_by_token: Mapping[int, EditParams],
    basis: GaussianBasis,
    cfg: RegulationConfig,
    a_orig: AttentionMap | None = None,
) -> float:
    """total_loss evaluated at the given edit weights (no gradient)."""
    if a_orig is None:
        a_orig = compute_attention(block)
    s_maps = {t: build_perturbation(p, basis) for t, p in params_by_token.items()}
    a_prime = apply_edit(block, s_maps, set(cfg.targets))
    return total_loss(a_prime, a_orig, cfg)


# --- finite-difference verification -------------------------------------

@dataclass
class GradCheckReport:
    trials: int
    max_rel_err: float
    skipped_ties: int
    errors: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.trials > 0 and self.max_rel_err < 1e-4


def make_gradcheck_instance(
    rng: np.random.Generator,
    m: int = 64,
    n: int = 8,
    heads: int = 2,
    d: int = 8,
    n_targets: int = 2,
    sigma: int = 1,
    theta_scale: float = 0.1,
):
    """One random (block, params, basis, config) tuple for gradient checking."""
    from .basis import make_basis

    w = math.isqrt(m)
    if w * w != m:
        raise ValueError(f"m={m} is not a perfect square")
    logits = rng.normal(size=(heads, m, n))
    block = LogitBlock(logits=logits, d=d, w=w, layer_id="gradcheck")
    basis = make_basis(w, sigma)
    targets = tuple(sorted(int(t) for t in rng.choice(n, size=n_targets, replace=False)))
    cfg = RegulationConfig(targets=targets)
    params = {
        t: EditParams(
            theta=theta_scale * rng.normal(size=(basis.r, basis.r)),
            sigma=sigma,
            layer_id="gradcheck",
            token_index=t,
        )
        for t in targets
    }
    return block, params, basis, cfg


def has_quantile_tie(
    block: LogitBlock,
    params_by_token: Mapping[int, EditParams],
    basis: GaussianBasis,
    cfg: RegulationConfig,
    gap_tol: float = 1e-4,
) -> bool:
    """True when any target's selected quantile element sits within gap_tol of
    a sorted neighbour, which would let finite differences flip the selection."""
    s_maps = {t: build_perturbation(p, basis) for t, p in params_by_token.items()}
    a_prime = apply_edit(block, s_maps, set(cfg.targets))
    abar = head_average(a_prime)
    for t in cfg.targets:
        col = np.sort(abar[:, t])
        k = int(math.floor(cfg.q_level * (col.size - 1)))
        if k > 0 and col[k] - col[k - 1] < gap_tol:
            return True
        if k + 1 < col.size and col[k + 1] - col[k] < gap_tol:
            return True
    return False


def fd_gradcheck(
    n_trials: int = 50,
    seed: int = 101,
    h: float = 1e-5,
    m: int = 64,
    n: int = 8,
    n_targets: int = 2,
) -> GradCheckReport:
    """Central-difference check of the analytic gradient on seeded tie-free
    instances. Keeps drawing until n_trials tie-free instances have been
    checked; tied draws are skipped and counted."""
    rng = np.random.default_rng(seed)
    max_err = 0.0
    errors: list[float] = []
    skipped = 0
    accepted = 0
    while accepted < n_trials:
        block, params, basis, cfg = make_gradcheck_instance(
            rng, m=m, n=n, n_targets=n_targets
        )
        if has_quantile_tie(block, params, basis, cfg):
            skipped += 1
            continue
        a_orig = compute_attention(block)
        _, grads, _ = loss_and_grad(block, params, basis, cfg, a_orig)
        trial_err = 0.0
        for t in cfg.targets:
            theta = params[t].theta
            for p in range(theta.shape[0]):
                for q in range(theta.shape[1]):
                    bumped = dict(params)
                    up = theta.copy()
                    up[p, q] += h
                    bumped[t] = params[t].with_theta(up)
                    l_up = loss_at(block, bumped, basis, cfg, a_orig)
                    dn = theta.copy()
                    dn[p, q] -= h
                    bumped[t] = params[t].with_theta(dn)
                    l_dn = loss_at(block, bumped, basis, cfg, a_orig)
                    fd = (l_up - l_dn) / (2.0 * h)
                    ana = grads[t][p, q]
                    denom = max(abs(ana), abs(fd), 1e-6)
                    trial_err = max(trial_err, abs(ana - fd) / denom)
        errors.append(trial_err)
        max_err = max(max_err, trial_err)
        accepted += 1
    return GradCheckReport(
        trials=accepted, max_rel_err=max_err, skipped_ties=skipped, errors=errors
    )
