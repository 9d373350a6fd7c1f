"""Randomized finite-difference checks for the differentiable building blocks.

Each check draws one small float64 instance from ``rng`` and returns the worst
relative error between tape gradients and central differences over its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .backbone import Network, init_backbone, BackboneConfig, res_block, se_block
from .distill import (
    discriminator_forward,
    init_discriminator,
    loss_adversarial,
    loss_discriminator,
    loss_generator,
    loss_student,
    normalize_pyramid,
)
from .tensor import BNStats, Tensor, batch_norm, conv2d, wide_precision
from .tensor.gradcheck import KinkCrossing, check_gradients

# float64 central differences: truncation error (h^2 times curvature) dominates at 1e-4
# on low-variance batch-norm instances, while round-off (eps / h) stays near 1e-10 here
FD_STEP = 1e-6
TOLERANCE = 1e-4


def _t(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale)


def _wide(net: Network) -> Network:
    for p in net.params.values():
        p.data = p.data.astype(np.float64)
    for s in net.stats.values():
        s.mean = s.mean.astype(np.float64)
        s.var = s.var.astype(np.float64)
    return net


def _conv(dilation: int) -> Callable[[np.random.Generator], float]:
    def check(rng: np.random.Generator) -> float:
        k = int(rng.integers(1, 4))
        size = (k - 1) * dilation + 1 + int(rng.integers(0, 3))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, dilation + 1))
        x = _t(rng, int(rng.integers(1, 3)), int(rng.integers(1, 3)), size, size)
        w = _t(rng, int(rng.integers(1, 3)), x.shape[1], k, k)
        g = rng.standard_normal(conv2d(x, w, stride, pad, dilation).shape)
        return check_gradients(lambda: (conv2d(x, w, stride, pad, dilation) * g).sum(), [x, w], FD_STEP)

    return check


def check_batch_norm(rng: np.random.Generator) -> float:
    c = int(rng.integers(1, 4))
    x = _t(rng, int(rng.integers(2, 4)), c, 3, 3, scale=2.0)
    gamma, beta = _t(rng, c), _t(rng, c)
    mode = "train" if rng.random() < 0.7 else "eval"
    stats = BNStats(rng.standard_normal(c), rng.random(c) + 0.5)
    g = rng.standard_normal(x.shape)

    def fn() -> Tensor:
        return (batch_norm(x, gamma, beta, stats, mode, update_stats=False) * g).sum()

    return check_gradients(fn, [x, gamma, beta], FD_STEP)


def check_se_block(rng: np.random.Generator) -> float:
    c = 4
    x = _t(rng, 2, c, 3, 3)
    tau1, tau2 = _t(rng, 2, c), _t(rng, c, 2)
    g = rng.standard_normal(x.shape)
    return check_gradients(lambda: (se_block(x, tau1, tau2) * g).sum(), [x, tau1, tau2], FD_STEP)


def check_res_block(rng: np.random.Generator) -> float:
    cin, width = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    dilation = int(rng.choice([1, 2]))
    cfg = BackboneConfig(stem_filters=cin, widths=(width, width, width, width), se_reduction=1)
    net = _wide(init_backbone(cfg, rng))
    x = _t(rng, 2, cin, 4, 4)
    g = rng.standard_normal((2, width, 4, 4))
    prefix = "stage1.block0"
    names = [k for k in net.params if k.startswith(prefix)]

    def fn() -> Tensor:
        return (res_block(x, net, prefix, dilation, "train") * g).sum()

    return check_gradients(fn, [x] + [net.params[k] for k in names], FD_STEP)


def _disc_setup(rng: np.random.Generator, c: int = 2, extent: int = 2):
    net = _wide(init_discriminator(c, (extent, extent), rng, width_factor=1 / 256))
    return net, int(rng.integers(0, 2**31))


def _disc(features: Tensor, net: Network, seed: int, update_stats: bool = False) -> Tensor:
    drop = np.random.default_rng(seed)
    return discriminator_forward(features, net, drop, "train", update_stats=update_stats)


def check_discriminator(rng: np.random.Generator) -> float:
    net, seed = _disc_setup(rng)
    x = _t(rng, 3, 2, 2, 2)
    g = rng.standard_normal(3)
    inputs = [x] + list(net.params.values())
    return check_gradients(lambda: (_disc(x, net, seed) * g).sum(), inputs, FD_STEP)


def _pyramids(rng: np.random.Generator) -> tuple[list[np.ndarray], list[Tensor]]:
    shapes = [(2, int(rng.integers(1, 5)), 2, 2) for _ in range(int(rng.integers(1, 4)))]
    teacher = [rng.standard_normal(s) for s in shapes]
    student = [_t(rng, *s) for s in shapes]
    return teacher, student


def check_loss_generator(rng: np.random.Generator) -> float:
    teacher, student = _pyramids(rng)
    t_norm = normalize_pyramid([Tensor(t) for t in teacher])
    return check_gradients(lambda: loss_generator(t_norm, normalize_pyramid(student)), student, FD_STEP)


def check_loss_discriminator(rng: np.random.Generator) -> float:
    net, seed = _disc_setup(rng)
    real, fake = Tensor(rng.standard_normal((2, 2, 2, 2))), Tensor(rng.standard_normal((2, 2, 2, 2)))

    def fn() -> Tensor:
        return loss_discriminator(_disc(real, net, seed), _disc(fake, net, seed + 1))

    return check_gradients(fn, list(net.params.values()), FD_STEP)


def check_loss_adversarial(rng: np.random.Generator) -> float:
    net, seed = _disc_setup(rng)
    fake = _t(rng, 2, 2, 2, 2)
    frozen = net.frozen_view()
    return check_gradients(lambda: loss_adversarial(_disc(fake, frozen, seed)), [fake], FD_STEP)


def check_loss_student(rng: np.random.Generator) -> float:
    net, seed = _disc_setup(rng)
    frozen = net.frozen_view()
    teacher = [rng.standard_normal((2, int(rng.integers(1, 4)), 2, 2)) for _ in range(2)]
    teacher.append(rng.standard_normal((2, 2, 2, 2)))
    student = [_t(rng, *t.shape) for t in teacher]
    t_norm = normalize_pyramid([Tensor(t) for t in teacher])
    lam = float(rng.uniform(0.0, 1.0))

    def fn() -> Tensor:
        l_g = loss_generator(t_norm, normalize_pyramid(student))
        return loss_student(l_g, loss_adversarial(_disc(student[-1], frozen, seed)), lam)

    return check_gradients(fn, student, FD_STEP)


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "conv2d_r1": _conv(1),
    "conv2d_r2": _conv(2),
    "conv2d_r4": _conv(4),
    "batch_norm": check_batch_norm,
    "se_block": check_se_block,
    "res_block": check_res_block,
    "discriminator": check_discriminator,
    "loss_generator": check_loss_generator,
    "loss_discriminator": check_loss_discriminator,
    "loss_adversarial": check_loss_adversarial,
    "loss_student": check_loss_student,
}


@dataclass
class CheckResult:
    name: str
    errors: list[float]
    skipped: int

    @property
    def worst(self) -> float:
        return max(self.errors)

    @property
    def passed(self) -> bool:
        return len(self.errors) > 0 and self.worst < TOLERANCE


def run_check(name: str, instances: int = 100, seed: int = 0, max_skips: int | None = None) -> CheckResult:
    """Relative errors of ``instances`` independent draws of check ``name``.

    Draws whose probes straddle a kink are discarded and replaced by fresh ones.
    """
    if name not in CHECKS:
        raise KeyError(f"unknown gradient check {name!r}; choose from {', '.join(CHECKS)}")
    max_skips = instances if max_skips is None else max_skips
    errors: list[float] = []
    skipped = 0
    draw = 0
    with wide_precision():
        while len(errors) < instances:
            try:
                errors.append(CHECKS[name](np.random.default_rng([seed, draw])))
            except KinkCrossing:
                skipped += 1
                if skipped > max_skips:
                    raise
            draw += 1
    return CheckResult(name, errors, skipped)
