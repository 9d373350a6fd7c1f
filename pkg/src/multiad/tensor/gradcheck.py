"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import Tape, Tensor

# ops whose derivative jumps; a central difference straddling the jump is meaningless
_BRANCHING_OPS = ("relu", "leaky_relu", "clamp")


class KinkCrossing(ArithmeticError):
    """A finite-difference probe moved some input across a non-differentiable point."""


def _branches(fn: Callable[[], Tensor]) -> tuple[float, bytes]:
    """Evaluate ``fn`` and fingerprint which side of every kink each element sits on."""
    with Tape() as tape:
        out = fn()
    parts = []
    for rec in tape.records:
        if rec.op in ("relu", "leaky_relu"):
            parts.append(np.packbits(rec.inputs[0].data > 0).tobytes())
        elif rec.op == "clamp":
            x, y = rec.inputs[0].data, rec.output.data
            parts.append(np.packbits(x == y).tobytes())
    return float(out.data), b"|".join(parts)


def numerical_grad(
    fn: Callable[[], Tensor], t: Tensor, step: float = 1e-4, guard: bool = False
) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to every element of ``t``.

    With ``guard``, a probe that flips the branch of any ReLU, LeakyReLU or clamp
    raises :class:`KinkCrossing`; ``t`` must then be tracked so the ops get recorded.
    """
    base = t.data
    g = np.zeros_like(base, dtype=np.float64)
    flat = g.reshape(-1)
    ref = _branches(fn)[1] if guard else None
    for i in range(base.size):
        values = []
        for delta in (step, -step):
            probe = base.copy()
            probe.reshape(-1)[i] += delta
            t.data = probe
            if ref is None:
                values.append(float(fn().data))
                continue
            value, sig = _branches(fn)
            if sig != ref:
                t.data = base
                raise KinkCrossing(f"probe {i} of a {base.shape} input crosses a kink")
            values.append(value)
        flat[i] = (values[0] - values[1]) / (2 * step)
    t.data = base
    return g


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if den < 1e-12:
        return num
    return num / den


def check_gradients(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4, guard_kinks: bool = True
) -> float:
    """Relative error between tape and finite-difference gradients over all ``inputs``.

    The error is taken over the concatenation of every input's gradient, so an input
    whose true gradient is exactly zero does not turn round-off into a large ratio.
    ``fn`` must be deterministic (re-seed any randomness inside it) and is evaluated
    ``2 * numel + 1`` times. Run under :func:`wide_precision` with float64 inputs.
    Raises :class:`KinkCrossing` when the instance sits too close to a kink for the
    difference quotient to be a valid oracle (unless ``guard_kinks`` is off).
    """
    analytic = analytic_grads(fn, inputs)
    numeric = [numerical_grad(fn, t, step, guard=guard_kinks) for t in inputs]
    return relative_error(
        np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric])
    )
