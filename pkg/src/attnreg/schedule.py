"""Temporal control of edits: EMA smoothing, geometric decay, hard cutoff,
and the choice of which cross-attention layers get edited."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .attention import AttentionMap

_KINDS = ("down", "mid", "up")


@dataclass(frozen=True)
class LayerDesc:
    layer_id: str
    kind: str

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"layer kind must be one of {_KINDS}, got {self.kind!r}")


def select_layers(layout: Sequence[LayerDesc], k: int | None = None) -> tuple[str, ...]:
    """Pick edited layers from a network-ordered layout.

    Default (k = None): the last down layer and the first up layer, the pair
    flanking the bottleneck. An explicit even k expands that pair symmetrically
    outward; mid layers are never selected. k = 0 selects nothing.
    """
    if not layout:
        raise ValueError("empty layer layout")
    downs = [l.layer_id for l in layout if l.kind == "down"]
    ups = [l.layer_id for l in layout if l.kind == "up"]
    if k is None:
        if not downs or not ups:
            raise ValueError("default selection needs at least one down and one up layer")
        return (downs[-1], ups[0])
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k == 0:
        return ()
    if k % 2 != 0:
        raise ValueError(f"k must be even for symmetric expansion, got {k}")
    half = k // 2
    if half > len(downs) or half > len(ups):
        raise ValueError(
            f"k={k} needs {half} down and {half} up layers, layout has "
            f"{len(downs)} down / {len(ups)} up"
        )
    return tuple(downs[-half:] + ups[:half])


@dataclass
class ScheduleState:
    """Per-layer EMA of optimized maps for one generation run."""

    ema: dict[str, AttentionMap] = field(default_factory=dict)
    step: int = -1


def ema_update(
    state: ScheduleState, layer_id: str, a_star: AttentionMap, kappa_ema: float
) -> ScheduleState:
    """A_EMA <- kappa * A_EMA + (1 - kappa) * A*; the first update seeds the
    EMA with A* itself. Mutates and returns the state."""
    if not 0 <= kappa_ema <= 1:
        raise ValueError(f"kappa_ema must be in [0, 1], got {kappa_ema}")
    prev = state.ema.get(layer_id)
    if prev is None:
        state.ema[layer_id] = a_star
        return state
    if prev.values.shape != a_star.values.shape:
        raise ValueError(
            f"EMA shape {prev.values.shape} does not match update {a_star.values.shape}"
        )
    blended = kappa_ema * prev.values + (1.0 - kappa_ema) * a_star.values
    state.ema[layer_id] = AttentionMap(values=blended, w=a_star.w, layer_id=layer_id)
    return state


def apply_schedule(
    a_orig: AttentionMap,
    state: ScheduleState,
    layer_id: str,
    lam: float,
    t: int,
    t_thres: int,
) -> AttentionMap:
    """Blend the EMA into the original map with decaying weight lambda^t:
    A <- lambda^t * A_EMA + (1 - lambda^t) * A_orig for t < t_thres.

    At or past the threshold (or with no EMA yet) the original map is returned
    as the identical object, so late steps are bit-exact pass-throughs.
    """
    if not 0 < lam <= 1:
        raise ValueError(f"lambda must be in (0, 1], got {lam}")
    if t < 0:
        raise ValueError(f"step index must be >= 0, got {t}")
    ema = state.ema.get(layer_id)
    if t >= t_thres or ema is None:
        return a_orig
    if ema.values.shape != a_orig.values.shape:
        raise ValueError(
            f"EMA shape {ema.values.shape} does not match map {a_orig.values.shape}"
        )
    wt = lam ** t
    blended = wt * ema.values + (1.0 - wt) * a_orig.values
    return AttentionMap(blended, w=a_orig.w, layer_id=a_orig.layer_id)
