"""Closed-form scaling regulator with a machine-checkable attention bound.

Instead of optimizing edit weights, this variant rebalances per-token maps
directly: the dominant token's map is multiplied by (1 - Gamma) so its peak
drops exactly to the average level of the others, and the end-of-sequence map
is added (weighted by kappa_eos) onto the least attended token.

With I_avg taken as the mean of the non-dominant maxima, the post-edit peak
M' provably satisfies

    M' <= max(tau * (I_avg + delta), I_l + kappa_eos * I_eos),

where delta = max(I_k - I_avg over non-dominant k) + i_p and the edit fires
only when the dominant peak exceeds tau * (I_avg + delta) - tau * i_p.
verify_bound checks that inequality instance by instance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .attention import AttentionMap, TokenMap2D

BOUND_SLACK = 1e-12


@dataclass(frozen=True)
class ScalerParams:
    """Pre-edit state of one regulation decision.

    token_maxima are the per-token map peaks of the regulated token set (the
    EOS token included); dominant_index, least_index and eos_index point into
    that list. least_index is the weakest non-EOS token, the injection target.
    """

    tau: float
    kappa_eos: float
    i_p: float
    token_maxima: tuple[float, ...]
    dominant_index: int
    least_index: int
    eos_index: int
    i_avg: float

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.kappa_eos < 0:
            raise ValueError(f"kappa_eos must be >= 0, got {self.kappa_eos}")
        if self.i_p < 0:
            raise ValueError(f"i_p must be >= 0, got {self.i_p}")
        k = len(self.token_maxima)
        for name in ("dominant_index", "least_index", "eos_index"):
            idx = getattr(self, name)
            if not 0 <= idx < k:
                raise ValueError(f"{name}={idx} out of range [0, {k})")
        maxima = self.token_maxima
        if any(not 0 <= v <= 1 for v in maxima):
            raise ValueError("token maxima must lie in [0, 1]")
        if maxima and self.i_avg > max(maxima) + BOUND_SLACK:
            raise ValueError(f"i_avg={self.i_avg} exceeds the largest token maximum")


def gamma_for(i_t: float, i_avg: float) -> float:
    """Scaling strength for a dominant peak i_t: Gamma = 1 - i_avg / i_t, so
    multiplying the map by (1 - Gamma) lands its peak exactly on i_avg."""
    if i_t == 0:
        raise ValueError("dominant peak is 0; nothing to scale")
    if not 0 < i_avg <= i_t:
        raise ValueError(f"need 0 < i_avg <= i_t, got i_avg={i_avg}, i_t={i_t}")
    return 1.0 - i_avg / i_t


def scale_dominant(a_t: TokenMap2D, gamma: float) -> TokenMap2D:
    """Multiply the map by (1 - gamma). The argmax cell never moves."""
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    return TokenMap2D(grid=a_t.grid * (1.0 - gamma), token_index=a_t.token_index)


def inject_eos(a_l: TokenMap2D, a_eos: TokenMap2D, kappa_eos: float) -> TokenMap2D:
    """Add kappa_eos * A_eos onto A_l. The new peak is at most
    max(A_l) + kappa_eos * max(A_eos)."""
    if a_l.grid.shape != a_eos.grid.shape:
        raise ValueError(
            f"shape mismatch: {a_l.grid.shape} vs {a_eos.grid.shape}"
        )
    if kappa_eos < 0:
        raise ValueError(f"kappa_eos must be >= 0, got {kappa_eos}")
    return TokenMap2D(grid=a_l.grid + kappa_eos * a_eos.grid, token_index=a_l.token_index)


def delta_level(params: ScalerParams) -> float:
    """delta = max over non-dominant tokens of (I_k - I_avg), plus i_p."""
    others = [
        v for i, v in enumerate(params.token_maxima) if i != params.dominant_index
    ]
    if not others:
        raise ValueError("delta undefined with fewer than 2 tokens")
    return max(v - params.i_avg for v in others) + params.i_p


def verify_bound(
    params: ScalerParams, regulated_maxima: Sequence[float]
) -> tuple[bool, dict | None]:
    """Check M' = max(regulated maxima) against the closed-form bound.

    Returns (True, None) when the bound holds, else (False, witness) where the
    witness names the violating token position and the slack."""
    if len(params.token_maxima) < 2:
        raise ValueError("bound needs at least 2 tokens (delta undefined)")
    if len(regulated_maxima) != len(params.token_maxima):
        raise ValueError(
            f"{len(regulated_maxima)} regulated maxima for "
            f"{len(params.token_maxima)} tokens"
        )
    delta = delta_level(params)
    i_l = params.token_maxima[params.least_index]
    i_eos = params.token_maxima[params.eos_index]
    bound = max(params.tau * (params.i_avg + delta), i_l + params.kappa_eos * i_eos)
    worst = int(np.argmax(regulated_maxima))
    m_prime = float(regulated_maxima[worst])
    if m_prime <= bound + BOUND_SLACK:
        return True, None
    return False, {
        "token_position": worst,
        "m_prime": m_prime,
        "bound": bound,
        "slack": m_prime - bound,
    }


@dataclass(frozen=True)
class RegulationOutcome:
    params: ScalerParams
    triggered: bool
    regulated_maxima: tuple[float, ...]
    grids: dict[int, TokenMap2D]


def regulate_token_maps(
    grids: Mapping[int, TokenMap2D],
    eos_token: int,
    tau: float,
    kappa_eos: float,
    i_p: float,
) -> RegulationOutcome:
    """Run the scale + inject pipeline on one set of per-token maps.

    grids must include the EOS token's map. Scaling targets the overall
    dominant token (which may be EOS); injection always lands on the weakest
    non-EOS token and always uses the original, pre-scaling EOS map.
    """
    tokens = sorted(grids)
    if len(tokens) < 2:
        raise ValueError("regulation needs at least 2 token maps")
    if eos_token not in grids:
        raise ValueError(f"EOS token {eos_token} missing from the map set")
    if i_p < 0:
        raise ValueError(f"i_p must be >= 0, got {i_p}")

    maxima = [float(grids[t].grid.max()) for t in tokens]
    eos_pos = tokens.index(eos_token)
    dominant = int(np.argmax(maxima))
    non_eos = [i for i in range(len(tokens)) if i != eos_pos]
    if not non_eos:
        raise ValueError("no non-EOS token to inject into")
    least = min(non_eos, key=lambda i: (maxima[i], i))

    others = [v for i, v in enumerate(maxima) if i != dominant]
    i_avg = float(np.mean(others))
    delta = max(v - i_avg for v in others) + i_p
    m_peak = maxima[dominant]
    triggered = m_peak > tau * (i_avg + delta) - tau * i_p

    out = dict(grids)
    if triggered:
        if i_avg > 0:
            gamma = gamma_for(m_peak, i_avg)
        else:
            gamma = 1.0
        out[tokens[dominant]] = scale_dominant(grids[tokens[dominant]], gamma)
        out[tokens[least]] = inject_eos(out[tokens[least]], grids[eos_token], kappa_eos)

    params = ScalerParams(
        tau=tau,
        kappa_eos=kappa_eos,
        i_p=i_p,
        token_maxima=tuple(maxima),
        dominant_index=dominant,
        least_index=least,
        eos_index=eos_pos,
        i_avg=i_avg,
    )
    regulated = tuple(float(out[t].grid.max()) for t in tokens)
    return RegulationOutcome(
        params=params, triggered=triggered, regulated_maxima=regulated, grids=out
    )


@dataclass
class BoundTrialReport:
    trials: int
    triggered: int
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations


def run_bound_trials(
    n_trials: int,
    tau: float = 1.1,
    kappa_eos: float = 0.5,
    seed: int = 2024,
    w: int = 4,
) -> BoundTrialReport:
    """Randomized check of the closed-form bound on the full scale + inject
    pipeline. Each trial draws 2..5 token maps with varied peak levels plus a
    random i_p, regulates them, and verifies the bound."""
    if n_trials < 1:
        raise ValueError(f"need at least 1 trial, got {n_trials}")
    rng = np.random.default_rng(seed)
    triggered = 0
    violations = []
    for trial in range(n_trials):
        k = int(rng.integers(2, 6))
        scales = rng.uniform(0.05, 1.0, size=k)
        grids = {
            t: TokenMap2D(
                grid=scales[t] * rng.uniform(0.0, 1.0, size=(w, w)), token_index=t
            )
            for t in range(k)
        }
        eos_token = int(rng.integers(0, k))
        i_p = float(rng.uniform(0.0, 0.2))
        outcome = regulate_token_maps(grids, eos_token, tau, kappa_eos, i_p)
        if outcome.triggered:
            triggered += 1
        ok, witness = verify_bound(outcome.params, outcome.regulated_maxima)
        if not ok:
            violations.append((trial, witness))
    return BoundTrialReport(trials=n_trials, triggered=triggered, violations=violations)


def regulate_attention(
    attn: AttentionMap,
    targets: Sequence[int],
    eos_token: int,
    tau: float,
    kappa_eos: float,
    i_p: float | None = None,
    pad_tokens: Sequence[int] = (),
) -> tuple[AttentionMap, list[RegulationOutcome]]:
    """Apply the scaling regulator to every head of an attention map.

    The regulated token set is targets plus the EOS column. When i_p is None
    it is taken per head as the peak attention of the padding columns (0.0
    with no padding given). Edited columns are written back and each row is
    renormalized, so the result stays row-stochastic.
    """
    token_set = sorted(set(int(t) for t in targets) | {int(eos_token)})
    for t in token_set:
        if not 0 <= t < attn.N:
            raise ValueError(f"token {t} out of range [0, {attn.N})")
    for t in pad_tokens:
        if not 0 <= t < attn.N:
            raise ValueError(f"padding token {t} out of range [0, {attn.N})")

    new_values = np.array(attn.values, copy=True)
    outcomes: list[RegulationOutcome] = []
    for h in range(attn.H):
        head_vals = new_values[h]
        if i_p is None:
            head_ip = float(
                max((head_vals[:, p].max() for p in pad_tokens), default=0.0)
            )
        else:
            head_ip = float(i_p)
        grids = {
            t: TokenMap2D(grid=head_vals[:, t].reshape(attn.w, attn.w), token_index=t)
            for t in token_set
        }
        outcome = regulate_token_maps(grids, eos_token, tau, kappa_eos, head_ip)
        outcomes.append(outcome)
        for t in token_set:
            head_vals[:, t] = outcome.grids[t].grid.reshape(-1)
        head_vals /= head_vals.sum(axis=-1, keepdims=True)
    return AttentionMap(new_values, w=attn.w, layer_id=attn.layer_id), outcomes
