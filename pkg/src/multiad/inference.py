"""Anomaly maps, multi-scale fusion, image scoring and AUROC metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, bilinear_upsample
from .tensor.ops import BN_EPS, L2_EPS

DEFAULT_SIGMA = 4.0


@dataclass
class AnomalyResult:
    layer_maps: list[np.ndarray]  # each [h_n, w_n]
    fused: np.ndarray  # [H, W] at input extent
    score: float


@dataclass
class RefinementParams:
    """Per-level scalar affine + frozen BN statistics applied to single-channel maps."""

    scale: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = BN_EPS

    @classmethod
    def identity(cls, levels: int) -> "RefinementParams":
        return cls(np.ones(levels), np.zeros(levels), np.zeros(levels), np.ones(levels))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"scale": self.scale, "bias": self.bias, "mean": self.mean, "var": self.var}


@dataclass
class MetricReport:
    image_auroc: float
    pixel_auroc: float
    n_normal: int
    n_anomalous: int
    n_normal_pixels: int
    n_anomalous_pixels: int
    extras: dict = field(default_factory=dict)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def anomaly_map_layer(f_t, f_s) -> np.ndarray:
    """Per-site cosine dissimilarity ``1 - cos`` over channels, ``[b,c,h,w] -> [b,h,w]``.

    Values are clipped into [0, 2] to absorb rounding. Sites where both vectors
    are null count as identical and score 0.
    """
    t = _as_array(f_t).astype(np.float64)
    s = _as_array(f_s).astype(np.float64)
    if t.shape != s.shape:
        raise ValueError(f"feature shapes differ: {t.shape} vs {s.shape}")
    nt = np.maximum(np.sqrt((t * t).sum(axis=1)), L2_EPS)
    ns = np.maximum(np.sqrt((s * s).sum(axis=1)), L2_EPS)
    cos = (t * s).sum(axis=1) / (nt * ns)
    cos[~np.any(t, axis=1) & ~np.any(s, axis=1)] = 1.0
    return np.clip(1.0 - cos, 0.0, 2.0)


def refine_map(m: np.ndarray, params: RefinementParams | None, level: int) -> np.ndarray:
    """``ReLU(BN_eval(scale * m + bias))`` with the level's calibrated statistics."""
    if params is None:
        raise RuntimeError("refinement used before calibration")
    y = params.scale[level] * m + params.bias[level]
    y = (y - params.mean[level]) / np.sqrt(params.var[level] + params.eps)
    return np.maximum(y, 0.0)


def fuse_maps(maps: Sequence[np.ndarray], extent: tuple[int, int]) -> np.ndarray:
    """Sum of the maps, each bilinearly upsampled to ``extent``; maps are ``[b,h,w]``."""
    if len(maps) == 0:
        raise ValueError("fuse_maps needs at least one map")
    total = None
    for m in maps:
        up = bilinear_upsample(Tensor(np.asarray(m, dtype=np.float64)[:, None]), *extent).data[:, 0]
        total = up if total is None else total + up
    return total


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian truncated at radius ``ceil(4 sigma)``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    radius = int(math.ceil(4 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(m: np.ndarray, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Separable Gaussian filter over the last two axes with mirror (reflect) padding."""
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = np.asarray(m, dtype=np.float64)
    for axis in (-2, -1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        win = sliding_window_view(padded, len(k), axis=axis)
        out = win @ k
    return out


def score_image(fused: np.ndarray, sigma: float = DEFAULT_SIGMA) -> float:
    return float(gaussian_smooth(fused, sigma).max())


def auroc(scores: Iterable[float], labels: Iterable[int]) -> float:
    """Mann-Whitney AUROC with midrank tie handling, O(n log n)."""
    s = np.asarray(list(scores) if not isinstance(scores, np.ndarray) else scores, dtype=np.float64).ravel()
    y = np.asarray(list(labels) if not isinstance(labels, np.ndarray) else labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both positive and negative samples")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # average rank (1-based) of each tie group
    _, first, counts = np.unique(sorted_s, return_index=True, return_counts=True)
    group_rank = first + (counts + 1) / 2.0
    ranks = np.empty_like(s)
    ranks[order] = np.repeat(group_rank, counts)
    rank_sum = ranks[y].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    if len(maps) != len(masks):
        raise ValueError("need one mask per map")
    for m, g in zip(maps, masks):
        if np.shape(m) != np.shape(g):
            raise ValueError(f"map extent {np.shape(m)} differs from mask extent {np.shape(g)}")
    scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    labels = np.concatenate([(np.asarray(g) > 0).ravel() for g in masks])
    return auroc(scores, labels)


class RunningMoments:
    """Mergeable mean/variance accumulator (population variance)."""

    def __init__(self) -> None:
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values: np.ndarray) -> None:
        v = np.asarray(values, dtype=np.float64).ravel()
        if v.size == 0:
            return
        n_b = v.size
        mean_b = float(v.mean())
        m2_b = float(((v - mean_b) ** 2).sum())
        n = self.n + n_b
        delta = mean_b - self.mean
        self.mean += delta * n_b / n
        self.m2 += m2_b + delta * delta * self.n * n_b / n
        self.n = n

    @property
    def var(self) -> float:
        return self.m2 / self.n if self.n else 0.0


def calibrate_from_maps(per_image_maps: Iterable[Sequence[np.ndarray]], levels: int) -> RefinementParams:
    """Freeze per-level BN statistics from raw layer maps of normal images."""
    acc = [RunningMoments() for _ in range(levels)]
    count = 0
    for maps in per_image_maps:
        count += 1
        for n, m in enumerate(maps):
            acc[n].update(m)
    if count < 2:
        raise ValueError("calibration needs at least 2 normal images")
    mean = np.array([a.mean for a in acc])
    var = np.array([max(a.var, BN_EPS) for a in acc])
    return RefinementParams(np.ones(levels), np.zeros(levels), mean, var)
