"""Run records and their on-disk forms: manifest JSON, attention CSV, and
latent frames as portable graymaps.

The CSV layout is fixed at `step,layer,head,token,max,sum`. Timings live in
their own manifest field so byte-level determinism checks can skip them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import AttentionMap

CSV_HEADER = "step,layer,head,token,max,sum"
RECORD_Q_LEVEL = 0.9

GRAY_OFFSET = 128.0
GRAY_SCALE = 16.0


@dataclass
class RunRecord:
    """Everything one generation run produced, keyed for later analytics.

    stats maps (step, layer_id) to a dict with "max" and "sum" arrays of shape
    (H, N); q90 maps the same key to the per-token 90th-quantile of the
    head-averaged map actually used in the forward pass.
    """

    model_seed: int
    run_seed: int
    prompt_ids: tuple[int, ...]
    targets: tuple[int, ...]
    regulator: str
    steps: int
    layer_order: tuple[str, ...]
    config_echo: dict
    stats: dict = field(default_factory=dict)
    q90: dict = field(default_factory=dict)
    latents: list = field(default_factory=list)
    final_maps: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    max_row_dev: float = 0.0

    def note_attention(self, step: int, layer_id: str, attn: AttentionMap) -> None:
        values = attn.values
        self.stats[(step, layer_id)] = {
            "max": values.max(axis=1),
            "sum": values.sum(axis=1),
        }
        abar = values.mean(axis=0)
        k = int(math.floor(RECORD_Q_LEVEL * (abar.shape[0] - 1)))
        self.q90[(step, layer_id)] = np.sort(abar, axis=0)[k].copy()
        dev = float(np.abs(values.sum(axis=-1) - 1.0).max())
        if dev > self.max_row_dev:
            self.max_row_dev = dev
        self.final_maps[layer_id] = attn

    def note_latent(self, x: np.ndarray) -> None:
        self.latents.append(x)

    @property
    def final_latent(self) -> np.ndarray:
        if not self.latents:
            raise ValueError("run recorded no latents")
        return self.latents[-1]


def write_attention_csv(record: RunRecord, path) -> None:
    layer_pos = {lid: i for i, lid in enumerate(record.layer_order)}
    lines = [CSV_HEADER]
    for (step, layer_id) in sorted(record.stats, key=lambda k: (k[0], layer_pos[k[1]])):
        entry = record.stats[(step, layer_id)]
        maxima, sums = entry["max"], entry["sum"]
        heads, tokens = maxima.shape
        for h in range(heads):
            for tok in range(tokens):
                lines.append(
                    f"{step},{layer_id},{h},{tok},"
                    f"{repr(float(maxima[h, tok]))},{repr(float(sums[h, tok]))}"
                )
    Path(path).write_text("\n".join(lines) + "\n")


def write_manifest(record: RunRecord, path, extra: dict | None = None) -> None:
    doc = {
        "config": record.config_echo,
        "seeds": {"model_seed": record.model_seed, "run_seed": record.run_seed},
        "prompt_ids": list(record.prompt_ids),
        "targets": list(record.targets),
        "regulator": record.regulator,
        "steps": record.steps,
        "layers": list(record.layer_order),
        "row_sum_max_dev": record.max_row_dev,
        "timings": dict(record.timings),
    }
    if extra:
        for key, value in extra.items():
            if key == "timings":
                doc["timings"].update(value)
            else:
                doc[key] = value
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def latent_to_gray(latent: np.ndarray) -> np.ndarray:
    """Fixed linear map from a (w, w, C) latent to 8-bit grayscale."""
    mean = np.asarray(latent, dtype=np.float64).mean(axis=-1)
    return np.clip(np.rint(GRAY_OFFSET + GRAY_SCALE * mean), 0, 255).astype(np.int64)


def write_pgm(gray: np.ndarray, path) -> None:
    h, w = gray.shape
    rows = [" ".join(str(int(v)) for v in row) for row in gray]
    Path(path).write_text(f"P2\n{w} {h}\n255\n" + "\n".join(rows) + "\n")


def write_latent_frames(record: RunRecord, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for step, latent in enumerate(record.latents):
        write_pgm(latent_to_gray(latent), directory / f"step_{step:04d}.pgm")


def write_run(record: RunRecord, out_dir, extra: dict | None = None) -> None:
    """Write manifest.json, attention.csv, and latents/ under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_manifest(record, out_dir / "manifest.json", extra)
    write_attention_csv(record, out_dir / "attention.csv")
    write_latent_frames(record, out_dir / "latents")
