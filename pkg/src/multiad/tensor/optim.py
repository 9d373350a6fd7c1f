"""Adam with bias correction over a named parameter dict."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """Apply one Adam update in place on ``params`` (data arrays are rebound, not mutated).

    A missing gradient counts as zero. Any non-finite gradient aborts the step before
    touching parameters or moments.
    """
    if state.lr < 0:
        raise ValueError("learning rate must be non-negative")
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        dtype = p.data.dtype
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if g is None:
            g = np.zeros_like(p.data)
        m = (b1 * m + (1 - b1) * g).astype(dtype)
        v = (b2 * v + (1 - b2) * (g * g)).astype(dtype)
        state.m[name], state.v[name] = m, v
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(dtype)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray | None]:
    return {k: p.grad for k, p in params.items()}


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
