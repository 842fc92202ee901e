"""Deterministic desk-scale latent diffusion: a small untrained denoiser with
cross-attention at three resolutions, a deterministic reverse sampler with
classifier-free guidance, and a hook contract letting regulators edit
attention in flight.

The denoiser is never trained; every weight comes from a seeded draw. What
matters here is attention dynamics, so cells are RMS-normalized before the
query projection and all mixing goes through tanh, keeping activations and
attention logits well-behaved at any latent scale.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .attention import AttentionMap, LogitBlock, compute_attention
from .objective import RegulationConfig
from .optimizer import OptimizationDiverged, optimize
from .recording import RunRecord
from .scaling import regulate_attention
from .schedule import LayerDesc, ScheduleState, apply_schedule, ema_update, select_layers

PAD, BOS, EOS = 0, 1, 2
TIME_DIM = 8
RMS_EPS = 1e-8

HookFn = Callable[[int, str, LogitBlock], AttentionMap]


class HookContractError(RuntimeError):
    """A registered attention hook violated its contract."""


@dataclass(frozen=True)
class LayerSpec:
    layer_id: str
    kind: str
    level: int
    w: int
    channels: int


@dataclass(frozen=True)
class SamplerConfig:
    """Deterministic reverse sampler over a subsampled training schedule."""

    steps: int = 50
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    cfg_scale: float = 7.5

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.train_steps < self.steps:
            raise ValueError(
                f"train_steps ({self.train_steps}) must be >= steps ({self.steps})"
            )
        if not 0 < self.beta_start < self.beta_end:
            raise ValueError(
                f"need 0 < beta_start < beta_end, got {self.beta_start}, {self.beta_end}"
            )
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")

    def alphas_bar(self) -> np.ndarray:
        betas = np.linspace(self.beta_start, self.beta_end, self.train_steps)
        return np.cumprod(1.0 - betas)

    def timesteps(self) -> np.ndarray:
        """Training timesteps visited by the sampler, noisiest first."""
        return np.linspace(self.train_steps - 1, 0, self.steps).round().astype(int)


@dataclass(frozen=True)
class ToyModel:
    """Seeded untrained denoiser: 3 down, 1 mid, 3 up cross-attention layers
    at grid sides 16/8/4, with per-level channel widths."""

    seed: int
    latent_side: int
    channels: tuple[int, ...]
    heads: int
    d_head: int
    embed_dim: int
    vocab_size: int
    n_max: int
    dominance_bias: tuple[tuple[int, float], ...]
    layout: tuple[LayerSpec, ...] = field(repr=False)
    weights: dict = field(repr=False, default_factory=dict)

    @classmethod
    def build(
        cls,
        seed: int = 0,
        latent_side: int = 16,
        channels: Sequence[int] = (8, 16, 32),
        heads: int = 2,
        d_head: int = 8,
        embed_dim: int = 8,
        vocab_size: int = 32,
        n_max: int = 16,
        dominance_bias: Sequence[tuple[int, float]] = (),
    ) -> "ToyModel":
        if latent_side % 4 != 0:
            raise ValueError(f"latent_side must be divisible by 4, got {latent_side}")
        if len(channels) != 3:
            raise ValueError(f"need 3 channel widths, got {channels}")
        if heads < 1 or d_head < 1:
            raise ValueError("heads and d_head must be >= 1")
        if vocab_size < 3:
            raise ValueError("vocabulary must cover PAD, BOS, EOS")
        if n_max < 3:
            raise ValueError("n_max must fit BOS + token + EOS")
        channels = tuple(int(c) for c in channels)
        bias = tuple((int(t), float(m)) for t, m in dominance_bias)
        for tok, _ in bias:
            if not 0 <= tok < vocab_size:
                raise ValueError(f"dominance_bias token {tok} outside vocabulary")

        sides = (latent_side, latent_side // 2, latent_side // 4)
        layout = (
            LayerSpec("d0", "down", 0, sides[0], channels[0]),
            LayerSpec("d1", "down", 1, sides[1], channels[1]),
            LayerSpec("d2", "down", 2, sides[2], channels[2]),
            LayerSpec("mid", "mid", 2, sides[2], channels[2]),
            LayerSpec("u0", "up", 2, sides[2], channels[2]),
            LayerSpec("u1", "up", 1, sides[1], channels[1]),
            LayerSpec("u2", "up", 0, sides[0], channels[0]),
        )

        rng = np.random.default_rng(np.random.SeedSequence(seed))
        proj = heads * d_head
        weights: dict[str, np.ndarray] = {}

        def draw(name: str, shape: tuple[int, ...]):
            fan_in = shape[0]
            weights[name] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

        embed = rng.normal(size=(vocab_size, embed_dim))
        embed /= np.linalg.norm(embed, axis=1, keepdims=True)
        weights["embed"] = embed

        draw("w_in", (channels[0], channels[0]))
        for spec in layout:
            draw(f"{spec.layer_id}_wq", (spec.channels, proj))
            draw(f"{spec.layer_id}_wk", (embed_dim, proj))
            draw(f"{spec.layer_id}_wv", (embed_dim, proj))
            draw(f"{spec.layer_id}_wo", (proj, spec.channels))
        draw("dn0", (channels[0], channels[1]))
        draw("dn1", (channels[1], channels[2]))
        draw("up1", (channels[2], channels[1]))
        draw("up0", (channels[1], channels[0]))
        for name, width in (
            ("t_in", channels[0]),
            ("t_d1", channels[1]),
            ("t_d2", channels[2]),
            ("t_u1", channels[1]),
            ("t_u0", channels[0]),
        ):
            draw(name, (TIME_DIM, width))
        draw("w_eps", (channels[0], channels[0]))
        for arr in weights.values():
            arr.setflags(write=False)

        return cls(
            seed=seed,
            latent_side=latent_side,
            channels=channels,
            heads=heads,
            d_head=d_head,
            embed_dim=embed_dim,
            vocab_size=vocab_size,
            n_max=n_max,
            dominance_bias=bias,
            layout=layout,
            weights=weights,
        )

    def layer_descs(self) -> list[LayerDesc]:
        return [LayerDesc(s.layer_id, s.kind) for s in self.layout]

    def config_dict(self) -> dict:
        return {
            "seed": self.seed,
            "latent_side": self.latent_side,
            "channels": list(self.channels),
            "heads": self.heads,
            "d_head": self.d_head,
            "embed_dim": self.embed_dim,
            "vocab_size": self.vocab_size,
            "n_max": self.n_max,
            "dominance_bias": [[t, m] for t, m in self.dominance_bias],
        }


def encode_prompt(model: ToyModel, token_ids: Sequence[int]) -> np.ndarray:
    """BOS + tokens + EOS, padded to n_max with PAD."""
    ids = [int(t) for t in token_ids]
    for tok in ids:
        if not 0 <= tok < model.vocab_size:
            raise ValueError(f"token id {tok} outside vocabulary [0, {model.vocab_size})")
    if len(ids) > model.n_max - 2:
        raise ValueError(
            f"prompt of {len(ids)} tokens exceeds capacity {model.n_max - 2}"
        )
    seq = [BOS] + ids + [EOS]
    seq += [PAD] * (model.n_max - len(seq))
    return np.array(seq, dtype=np.int64)


def time_embedding(timestep: int, dim: int = TIME_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = timestep * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _rms_norm(cells: np.ndarray) -> np.ndarray:
    scale = np.sqrt((cells * cells).mean(axis=-1, keepdims=True) + RMS_EPS)
    return cells / scale


def _pool2(h: np.ndarray) -> np.ndarray:
    w = h.shape[0]
    return h.reshape(w // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))


def _up2(h: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(h, 2, axis=0), 2, axis=1)


def _attention_layer(
    model: ToyModel,
    spec: LayerSpec,
    h: np.ndarray,
    context: np.ndarray,
    bias_positions: Sequence[tuple[int, float]],
    t_index: int,
    hooks: Mapping[str, HookFn] | None,
    record_cb: Callable[[str, AttentionMap], None] | None,
) -> np.ndarray:
    w = spec.w
    m = w * w
    cells = h.reshape(m, spec.channels)
    q = (_rms_norm(cells) @ model.weights[f"{spec.layer_id}_wq"]).reshape(
        m, model.heads, model.d_head
    )
    k = (context @ model.weights[f"{spec.layer_id}_wk"]).reshape(
        -1, model.heads, model.d_head
    )
    v = (context @ model.weights[f"{spec.layer_id}_wv"]).reshape(
        -1, model.heads, model.d_head
    )
    if bias_positions:
        k = k.copy()
        for pos, mag in bias_positions:
            for head in range(model.heads):
                vec = k[pos, head]
                norm = np.linalg.norm(vec)
                if norm > 0:
                    k[pos, head] = vec + mag * vec / norm
    logits = np.einsum("mhd,nhd->hmn", q, k)
    block = LogitBlock(logits=logits, d=model.d_head, w=w, layer_id=spec.layer_id)

    hook = hooks.get(spec.layer_id) if hooks else None
    if hook is None:
        attn = compute_attention(block)
    else:
        try:
            attn = hook(t_index, spec.layer_id, block)
        except (HookContractError, OptimizationDiverged):
            raise
        except Exception as exc:
            raise HookContractError(
                f"hook failed at layer {spec.layer_id!r} step {t_index}: {exc}"
            ) from exc
        if not isinstance(attn, AttentionMap):
            raise HookContractError(
                f"hook at layer {spec.layer_id!r} step {t_index} returned "
                f"{type(attn).__name__}, expected AttentionMap"
            )
        if attn.values.shape != block.logits.shape:
            raise HookContractError(
                f"hook at layer {spec.layer_id!r} step {t_index} returned shape "
                f"{attn.values.shape}, expected {block.logits.shape}"
            )
        dev = float(np.abs(attn.values.sum(axis=-1) - 1.0).max())
        if dev > 1e-9:
            raise HookContractError(
                f"hook at layer {spec.layer_id!r} step {t_index} returned rows "
                f"off stochastic by {dev:.3e}"
            )
    if record_cb is not None:
        record_cb(spec.layer_id, attn)

    mixed = np.einsum("hmn,nhd->mhd", attn.values, v).reshape(
        m, model.heads * model.d_head
    )
    out = np.tanh(mixed @ model.weights[f"{spec.layer_id}_wo"])
    return h + out.reshape(w, w, spec.channels)


def denoise(
    model: ToyModel,
    x: np.ndarray,
    t_index: int,
    temb: np.ndarray,
    context: np.ndarray,
    bias_positions: Sequence[tuple[int, float]] = (),
    hooks: Mapping[str, HookFn] | None = None,
    record_cb: Callable[[str, AttentionMap], None] | None = None,
) -> np.ndarray:
    """One noise prediction. tanh on the head keeps it bounded."""
    wts = model.weights
    specs = {s.layer_id: s for s in model.layout}

    def attn(lid, h):
        return _attention_layer(
            model, specs[lid], h, context, bias_positions, t_index, hooks, record_cb
        )

    h0 = np.tanh(x @ wts["w_in"] + temb @ wts["t_in"])
    h0 = attn("d0", h0)
    h1 = np.tanh(_pool2(h0) @ wts["dn0"] + temb @ wts["t_d1"])
    h1 = attn("d1", h1)
    h2 = np.tanh(_pool2(h1) @ wts["dn1"] + temb @ wts["t_d2"])
    h2 = attn("d2", h2)
    h2 = attn("mid", h2)
    h2 = attn("u0", h2)
    h1u = np.tanh(_up2(h2) @ wts["up1"] + temb @ wts["t_u1"]) + h1
    h1u = attn("u1", h1u)
    h0u = np.tanh(_up2(h1u) @ wts["up0"] + temb @ wts["t_u0"]) + h0
    h0u = attn("u2", h0u)
    return np.tanh(h0u @ wts["w_eps"])


def make_regulator_hooks(
    model: ToyModel,
    reg: RegulationConfig,
    encoded_ids: np.ndarray,
) -> tuple[dict[str, HookFn], ScheduleState]:
    """Hooks implementing the configured regulator on its edited layers.

    The optimizing regulator runs optimize -> EMA update -> decayed blend; the
    scaling regulator rebalances per-token maps in closed form. Both pass the
    original attention through untouched at t >= t_thres, and max_iters = 0
    turns the optimizing path into an exact bypass.
    """
    if reg.regulator not in ("optimize", "scaling"):
        raise ValueError(f"no hooks for regulator {reg.regulator!r}")
    if not reg.targets:
        raise ValueError("regulated runs need a non-empty target set")
    layer_ids = [s.layer_id for s in model.layout]
    edit_layers = tuple(reg.edit_layers) or select_layers(model.layer_descs())
    for lid in edit_layers:
        if lid not in layer_ids:
            raise ValueError(f"edit layer {lid!r} not in model layout {layer_ids}")

    state = ScheduleState()
    pad_positions = tuple(int(i) for i in np.flatnonzero(encoded_ids == PAD))
    eos_matches = np.flatnonzero(encoded_ids == EOS)
    eos_position = int(eos_matches[0]) if eos_matches.size else None

    def optimize_hook(t: int, layer_id: str, block: LogitBlock) -> AttentionMap:
        a_orig = compute_attention(block)
        if reg.max_iters == 0 or t >= reg.t_thres:
            return a_orig
        a_star, _ = optimize(block, reg)
        ema_update(state, layer_id, a_star, reg.kappa_ema)
        return apply_schedule(a_orig, state, layer_id, reg.lam, t, reg.t_thres)

    def scaling_hook(t: int, layer_id: str, block: LogitBlock) -> AttentionMap:
        a_orig = compute_attention(block)
        if t >= reg.t_thres:
            return a_orig
        if eos_position is None:
            raise ValueError("scaling regulator needs an EOS token in the prompt")
        regulated, _ = regulate_attention(
            a_orig,
            reg.targets,
            eos_position,
            reg.tau,
            reg.kappa_eos,
            reg.i_p,
            pad_positions,
        )
        return regulated

    hook = optimize_hook if reg.regulator == "optimize" else scaling_hook
    return {lid: hook for lid in edit_layers}, state


def run_generation(
    model: ToyModel,
    prompt: Sequence[int],
    sampler: SamplerConfig,
    regulation: RegulationConfig | None = None,
    seed: int = 0,
    hooks: Mapping[str, HookFn] | None = None,
) -> RunRecord:
    """One full reverse-diffusion run.

    prompt is the raw token id list (specials added here). Regulator hooks are
    installed on the conditional branch only; per-step per-layer attention
    statistics are recorded from that branch, and the latent after every
    update lands in the record.
    """
    ids = encode_prompt(model, prompt)
    regulator_name = regulation.regulator if regulation is not None else "none"

    user_hooks = dict(hooks or {})
    layer_ids = [s.layer_id for s in model.layout]
    for lid in user_hooks:
        if lid not in layer_ids:
            raise ValueError(f"hook layer {lid!r} not in model layout {layer_ids}")

    if regulation is not None and regulation.regulator != "none":
        for t in regulation.targets:
            if not 0 <= t < model.n_max:
                raise ValueError(f"target {t} out of range [0, {model.n_max})")
            if ids[t] == PAD:
                raise ValueError(f"target {t} points at a padding position")
        reg_hooks, _ = make_regulator_hooks(model, regulation, ids)
        overlap = set(reg_hooks) & set(user_hooks)
        if overlap:
            raise ValueError(
                f"layers {sorted(overlap)} already have a hook; "
                "at most one regulator per layer"
            )
        all_hooks: dict[str, HookFn] = {**user_hooks, **reg_hooks}
    else:
        all_hooks = user_hooks

    record = RunRecord(
        model_seed=model.seed,
        run_seed=seed,
        prompt_ids=tuple(int(i) for i in ids),
        targets=tuple(regulation.targets) if regulation is not None else (),
        regulator=regulator_name,
        steps=sampler.steps,
        layer_order=tuple(layer_ids),
        config_echo={
            "seed": int(seed),
            "model": model.config_dict(),
            "sampler": asdict_sampler(sampler),
            "regulation": regulation_to_public(regulation),
        },
    )

    embed = model.weights["embed"]
    ctx_cond = embed[ids]
    uncond_ids = np.full(model.n_max, PAD, dtype=np.int64)
    ctx_uncond = embed[uncond_ids]
    bias_cond = [
        (int(pos), mag)
        for tok, mag in model.dominance_bias
        for pos in np.flatnonzero(ids == tok)
    ]
    bias_uncond = [
        (int(pos), mag)
        for tok, mag in model.dominance_bias
        for pos in np.flatnonzero(uncond_ids == tok)
    ]

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    x = rng.standard_normal((model.latent_side, model.latent_side, model.channels[0]))

    alphas_bar = sampler.alphas_bar()
    timesteps = sampler.timesteps()
    start = time.perf_counter()
    for t_index in range(sampler.steps):
        ts = int(timesteps[t_index])
        temb = time_embedding(ts)
        eps_u = denoise(model, x, t_index, temb, ctx_uncond, bias_uncond)
        eps_c = denoise(
            model,
            x,
            t_index,
            temb,
            ctx_cond,
            bias_cond,
            hooks=all_hooks,
            record_cb=lambda lid, attn, _t=t_index: record.note_attention(_t, lid, attn),
        )
        eps = eps_u + sampler.cfg_scale * (eps_c - eps_u)
        ab_t = alphas_bar[ts]
        ab_prev = alphas_bar[int(timesteps[t_index + 1])] if t_index + 1 < sampler.steps else 1.0
        x0_hat = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps
        record.note_latent(x)
    record.timings["total_s"] = time.perf_counter() - start
    return record


def asdict_sampler(sampler: SamplerConfig) -> dict:
    return {
        "steps": sampler.steps,
        "train_steps": sampler.train_steps,
        "beta_start": sampler.beta_start,
        "beta_end": sampler.beta_end,
        "cfg_scale": sampler.cfg_scale,
    }


def regulation_to_public(reg: RegulationConfig | None) -> dict | None:
    """Config-file form of a RegulationConfig (lam appears as "lambda")."""
    if reg is None:
        return None
    return {
        "regulator": reg.regulator,
        "beta": reg.beta,
        "alpha": reg.alpha,
        "mu": reg.mu,
        "q_level": reg.q_level,
        "q_target": reg.q_target,
        "eta": reg.eta,
        "max_iters": reg.max_iters,
        "tol": reg.tol,
        "kappa_ema": reg.kappa_ema,
        "lambda": reg.lam,
        "t_thres": reg.t_thres,
        "targets": list(reg.targets),
        "edit_layers": list(reg.edit_layers),
        "cfg_scale": reg.cfg_scale,
        "tau": reg.tau,
        "kappa_eos": reg.kappa_eos,
        "i_p": reg.i_p,
    }
