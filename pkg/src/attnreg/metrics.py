"""Attention-dominance diagnostics, coverage proxies, overhead accounting, and
the box-similarity scoring composition behind a pluggable backend."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .attention import AttentionMap, head_average
from .objective import quantile
from .recording import RunRecord


def head_max_stats(record: RunRecord, layer: str, step: int) -> list[list[float]]:
    """Per-token lists of per-head map maxima at one (layer, step)."""
    key = (step, layer)
    if key not in record.stats:
        raise ValueError(f"no stats recorded for layer {layer!r} at step {step}")
    maxima = record.stats[key]["max"]
    return [[float(v) for v in maxima[:, tok]] for tok in range(maxima.shape[1])]


def mean_head_max_stats(
    record: RunRecord, layer: str, steps: Sequence[int]
) -> list[list[float]]:
    """head_max_stats averaged over a window of steps.

    Single-step maxima at late steps mostly reflect trajectory drift; the mean
    over the window where edits are active is the stable paired-run statistic.
    """
    steps = list(steps)
    if not steps:
        raise ValueError("empty step window")
    for t in steps:
        if (t, layer) not in record.stats:
            raise ValueError(f"no stats recorded for layer {layer!r} at step {t}")
    mean = np.array([record.stats[(t, layer)]["max"] for t in steps]).mean(axis=0)
    return [[float(v) for v in mean[:, tok]] for tok in range(mean.shape[1])]


def dominance_index(stats: Sequence[Sequence[float]], targets: Sequence[int]) -> float:
    """How far the strongest target stands above the average target:
    max over targets of head-mean peak, divided by the mean of the same
    quantity. Always >= 1, equal exactly when all targets match."""
    targets = list(targets)
    if len(targets) < 2:
        raise ValueError(f"need at least 2 target tokens, got {len(targets)}")
    levels = []
    for t in targets:
        if not 0 <= t < len(stats):
            raise ValueError(f"target {t} outside recorded tokens [0, {len(stats)})")
        levels.append(float(np.mean(stats[t])))
    mean_level = float(np.mean(levels))
    if mean_level <= 0:
        raise ValueError("target attention levels are all zero")
    return max(levels) / mean_level


def target_coverage(
    final_maps: Mapping[str, AttentionMap],
    targets: Sequence[int],
    threshold: float = 0.5,
) -> float:
    """Fraction of targets whose head-averaged 90th-quantile attention reaches
    the threshold in at least one of the given layers."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    targets = list(targets)
    if not targets:
        raise ValueError("empty target set")
    if not final_maps:
        raise ValueError("no attention maps given")
    covered = 0
    for t in targets:
        best = 0.0
        for attn in final_maps.values():
            if not 0 <= t < attn.N:
                raise ValueError(f"target {t} out of range [0, {attn.N})")
            qval, _ = quantile(head_average(attn)[:, t], 0.9)
            best = max(best, qval)
        if best >= threshold:
            covered += 1
    return covered / len(targets)


Box = tuple[float, float, float, float]


class BackendError(RuntimeError):
    """The scoring backend failed; distinct from a legitimate score of 0."""


@runtime_checkable
class ScoreBackend(Protocol):
    capabilities: str

    def locate(self, image, label: str) -> list[tuple[Box, float]]:
        ...


@dataclass
class FixtureBackend:
    """Deterministic backend reading boxes and similarities from a fixture
    mapping label -> [(box, similarity), ...]. Labels listed in fail_on raise
    BackendError to exercise the failure path."""

    fixtures: dict[str, list[tuple[Box, float]]]
    fail_on: frozenset = frozenset()
    capabilities: str = "fixture"

    def locate(self, image, label: str) -> list[tuple[Box, float]]:
        if label in self.fail_on:
            raise BackendError(f"backend cannot locate {label!r}")
        return list(self.fixtures.get(label, []))


def object_score(image, label: str, backend: ScoreBackend) -> float:
    """Max similarity over the backend's boxes for one label; 0 with no boxes."""
    hits = backend.locate(image, label)
    best = 0.0
    for _, sim in hits:
        if not 0 <= sim <= 1 or not math.isfinite(sim):
            raise ValueError(f"backend similarity {sim} outside [0, 1] for {label!r}")
        best = max(best, float(sim))
    return best if hits else 0.0


def composite_score(image, objects: Sequence[str], backend: ScoreBackend) -> float:
    """Min over objects of the per-object max-box similarity."""
    if not objects:
        raise ValueError("composite score needs at least one object label")
    return min(object_score(image, label, backend) for label in objects)


def overhead(t_reg: float, t_base: float) -> float:
    """Relative wall-clock overhead (t_reg - t_base) / t_base."""
    if t_base <= 0:
        raise ValueError(f"baseline time must be > 0, got {t_base}")
    return (t_reg - t_base) / t_base


def attn_quantile_profile(record: RunRecord, layers: Sequence[str], targets: Sequence[int]) -> float:
    """Mean over steps, probe layers, and targets of the recorded per-step
    90th-quantile attention. The sweep proxy metric."""
    layers = list(layers)
    targets = list(targets)
    if not layers or not targets:
        raise ValueError("need at least one probe layer and one target")
    total = 0.0
    count = 0
    for step in range(record.steps):
        for lid in layers:
            key = (step, lid)
            if key not in record.q90:
                raise ValueError(f"no quantile profile for layer {lid!r} step {step}")
            row = record.q90[key]
            for t in targets:
                total += float(row[t])
                count += 1
    return total / count
