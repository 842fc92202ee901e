"""Gradient descent on the edit weights: A* = argmin L per layer per step."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionMap, LogitBlock, compute_attention
from .basis import EditParams, GaussianBasis, default_sigma, make_basis
from .objective import RegulationConfig, loss_and_grad

DIVERGENCE_FACTOR = 10.0
PLATEAU_WINDOW = 3


class OptimizationDiverged(RuntimeError):
    """Loss blew past the divergence guard; carries the trajectory so far."""

    def __init__(self, message: str, layer_id: str = "", iteration: int = -1,
                 loss_history: tuple = ()):
        super().__init__(message)
        self.layer_id = layer_id
        self.iteration = iteration
        self.loss_history = tuple(loss_history)


@dataclass
class OptState:
    """Edit weights per target token plus the evaluated loss trajectory."""

    params: dict[int, EditParams]
    iter: int = 0
    loss_history: list[float] = field(default_factory=list)


def zero_state(basis: GaussianBasis, layer_id: str, targets) -> OptState:
    params = {t: EditParams.zeros(basis, layer_id, t) for t in targets}
    return OptState(params=params)


def optimize_step(
    state: OptState,
    block: LogitBlock,
    basis: GaussianBasis,
    cfg: RegulationConfig,
    a_orig: AttentionMap | None = None,
) -> OptState:
    """One descent step: evaluate L and its gradient at the current weights,
    append the loss, then move every theta by -eta * grad."""
    loss, grads, _ = loss_and_grad(block, state.params, basis, cfg, a_orig)
    new_params = {
        t: p.with_theta(p.theta - cfg.eta * grads[t]) for t, p in state.params.items()
    }
    return OptState(
        params=new_params,
        iter=state.iter + 1,
        loss_history=state.loss_history + [loss],
    )


def _plateaued(history: list[float], tol: float) -> bool:
    if len(history) < PLATEAU_WINDOW + 1:
        return False
    base = history[-(PLATEAU_WINDOW + 1)]
    improvement = (base - history[-1]) / max(abs(base), 1e-30)
    return improvement < tol


def optimize(
    block: LogitBlock,
    cfg: RegulationConfig,
    basis: GaussianBasis | None = None,
) -> tuple[AttentionMap, OptState]:
    """Descend from theta = 0 until the iteration budget or a loss plateau
    (relative improvement < tol over a 3-iteration window), then return the
    best evaluated iterate's edited map and state.

    Starting at zero and keeping the best iterate guarantees the returned loss
    never exceeds the initial one; max_iters = 0 therefore reproduces the
    unedited attention exactly.
    """
    if not cfg.targets:
        raise ValueError("optimize needs a non-empty target token set")
    for t in cfg.targets:
        if t >= block.N:
            raise ValueError(f"target token {t} out of range [0, {block.N})")
    if basis is None:
        basis = make_basis(block.w, default_sigma(block.w))
    a_orig = compute_attention(block)

    params = {t: EditParams.zeros(basis, block.layer_id, t) for t in cfg.targets}
    history: list[float] = []
    best_loss = np.inf
    best_params = params
    best_map: AttentionMap | None = None

    current = params
    for it in range(cfg.max_iters + 1):
        loss, grads, a_prime = loss_and_grad(block, current, basis, cfg, a_orig)
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_params = current
            best_map = a_prime
        if loss > DIVERGENCE_FACTOR * history[0] + 1e-12:
            raise OptimizationDiverged(
                f"loss {loss:.6g} exceeded {DIVERGENCE_FACTOR}x initial "
                f"{history[0]:.6g} at iteration {it}"
                + (f" (layer {block.layer_id!r})" if block.layer_id else ""),
                layer_id=block.layer_id,
                iteration=it,
                loss_history=history,
            )
        if it == cfg.max_iters or _plateaued(history, cfg.tol):
            break
        current = {
            t: p.with_theta(p.theta - cfg.eta * grads[t]) for t, p in current.items()
        }

    state = OptState(params=best_params, iter=len(history) - 1, loss_history=history)
    assert best_map is not None
    return best_map, state
