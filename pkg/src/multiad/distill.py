"""Teacher-to-student feature alignment and the adversarial discriminator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import FeaturePyramid, Network
from .tensor import Tensor, clamp, conv2d, dropout, l2_normalize, leaky_relu, linear, log, sigmoid

LOG_EPS = 1e-7
DISC_BASE_WIDTHS = (128, 256, 512, 1024)


@dataclass
class NormalizedPyramid:
    """Per-layer feature maps with every spatial site's channel vector L2-normalized."""

    levels: list[Tensor]

    def __len__(self) -> int:
        return len(self.levels)

    def activations(self, i: int) -> np.ndarray:
        """Site vectors of layer ``i`` as ``[b * Q_i, c]`` (row-major over sites)."""
        t = self.levels[i].data
        b, c, h, w = t.shape
        return t.transpose(0, 2, 3, 1).reshape(b * h * w, c)

    def sites(self, i: int) -> int:
        h, w = self.levels[i].shape[2:]
        return h * w


def normalize_pyramid(pyr: FeaturePyramid | list[Tensor]) -> NormalizedPyramid:
    return NormalizedPyramid([l2_normalize(f, axis=1) for f in pyr])


def loss_generator(teacher: NormalizedPyramid, student: NormalizedPyramid) -> Tensor:
    """Mean over layers of the mean per-site ``1 - cos`` between teacher and student.

    Teacher maps enter as constants; the batch is averaged together with the sites.
    A site where both vectors are null counts as identical (cos = 1).
    """
    if len(teacher) != len(student):
        raise ValueError(f"pyramid depth mismatch: {len(teacher)} vs {len(student)}")
    total = None
    for t, s in zip(teacher.levels, student.levels):
        if t.shape != s.shape:
            raise ValueError(f"layer shape mismatch: {t.shape} vs {s.shape}")
        both_null = ~np.any(t.data, axis=1) & ~np.any(s.data, axis=1)
        cos = (s * t.data).sum(axis=1) + both_null.astype(t.data.dtype)
        term = 1.0 - cos.mean()
        total = term if total is None else total + term
    return total * (1.0 / len(teacher))


# -- discriminator ----------------------------------------------------------------


def discriminator_widths(width_factor: float = 1.0) -> tuple[int, ...]:
    return tuple(max(1, int(round(w * width_factor))) for w in DISC_BASE_WIDTHS)


def init_discriminator(
    in_channels: int, extent: tuple[int, int], rng: np.random.Generator, width_factor: float = 1.0
) -> Network:
    """Four 3x3/1/1 conv-BN-LeakyReLU layers, then a single-logit FC over the flattened map."""
    net = Network()
    cin = in_channels
    for k, width in enumerate(discriminator_widths(width_factor), start=1):
        net.add_conv(f"disc.conv{k}", width, cin, 3, rng)
        net.add_bn(f"disc.bn{k}", width)
        cin = width
    net.add_linear("disc.fc", 1, cin * extent[0] * extent[1], rng, bias=True)
    return net


def discriminator_forward(
    features: Tensor,
    net: Network,
    rng: np.random.Generator | None,
    mode: str = "train",
    dropout_p: float = 0.3,
    slope: float = 0.2,
    update_stats: bool = True,
) -> Tensor:
    """Probability ``[b]`` that each feature map came from the teacher."""
    x = features
    h, w = x.shape[2:]
    k = 1
    while f"disc.conv{k}" in net.params:
        x = conv2d(x, net.params[f"disc.conv{k}"], stride=1, padding=1)
        x = leaky_relu(net.bn(x, f"disc.bn{k}", mode, update_stats=update_stats), slope)
        k += 1
    assert x.shape[2:] == (h, w)
    x = dropout(x, dropout_p, rng, mode)
    x = x.reshape(x.shape[0], -1)
    logit = linear(x, net.params["disc.fc.weight"], net.params["disc.fc.bias"])
    return sigmoid(logit).reshape(-1)


def _clamped_log(p: Tensor) -> Tensor:
    return log(clamp(p, LOG_EPS, 1.0 - LOG_EPS))


def loss_discriminator(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """Binary cross-entropy: teacher maps labelled real, student maps fake."""
    m = d_real.shape[0]
    if m == 0 or d_fake.shape[0] != m:
        raise ValueError("loss_discriminator needs equal, non-empty batches")
    return -(_clamped_log(d_real).sum() + _clamped_log(1.0 - d_fake).sum()) * (1.0 / m)


def loss_adversarial(d_fake: Tensor) -> Tensor:
    m = d_fake.shape[0]
    if m == 0:
        raise ValueError("loss_adversarial needs a non-empty batch")
    return -_clamped_log(d_fake).sum() * (1.0 / m)


def loss_student(l_g: Tensor, l_adv: Tensor | None, lam: float) -> Tensor:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if l_adv is None:
        return l_g
    return l_g + l_adv * lam
