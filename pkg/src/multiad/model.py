"""Teacher, student, discriminator and refinement bundled for training and inference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import FeaturePyramid, Network, forward_pyramid, init_backbone
from .config import PipelineConfig
from .distill import init_discriminator, normalize_pyramid
from .inference import (
    AnomalyResult,
    RefinementParams,
    anomaly_map_layer,
    calibrate_from_maps,
    fuse_maps,
    gaussian_smooth,
    refine_map,
)
from .tensor import Tensor

INFER_BATCH = 16


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


@dataclass
class MultiADModel:
    config: PipelineConfig
    teacher: Network
    student: Network
    discriminator: Network
    refinement: RefinementParams | None = None

    @classmethod
    def initialize(cls, config: PipelineConfig) -> "MultiADModel":
        """Seeded init; teacher and student draw from separate streams of ``config.seed``."""
        bb = config.backbone
        teacher = init_backbone(bb, _rng(config.seed, 1))
        student = init_backbone(bb, _rng(config.seed, 2))
        fe = config.feature_extent
        disc = init_discriminator(bb.widths[3], (fe, fe), _rng(config.seed, 3), config.disc_width_factor)
        return cls(config, teacher, student, disc)

    @property
    def levels(self) -> int:
        return len(self.config.backbone.level_channels)

    # -- forward passes ------------------------------------------------------------
    def teacher_pyramid(self, images: np.ndarray) -> FeaturePyramid:
        return forward_pyramid(Tensor(images), self.teacher.frozen_view(), self.config.backbone, "eval")

    def student_pyramid(self, images: np.ndarray) -> FeaturePyramid:
        return forward_pyramid(Tensor(images), self.student.frozen_view(), self.config.backbone, "eval")

    def raw_layer_maps(self, images: np.ndarray) -> list[np.ndarray]:
        """Cosine-dissimilarity maps ``[b, h_n, w_n]`` per pyramid level (eval mode)."""
        per_level: list[list[np.ndarray]] = [[] for _ in range(self.levels)]
        for start in range(0, len(images), INFER_BATCH):
            chunk = images[start : start + INFER_BATCH]
            t = normalize_pyramid(self.teacher_pyramid(chunk))
            s = normalize_pyramid(self.student_pyramid(chunk))
            for n, (ft, fs) in enumerate(zip(t.levels, s.levels)):
                per_level[n].append(anomaly_map_layer(ft, fs))
        return [np.concatenate(maps) for maps in per_level]

    def fused_maps(self, images: np.ndarray, layer_maps: list[np.ndarray] | None = None) -> np.ndarray:
        maps = layer_maps if layer_maps is not None else self.raw_layer_maps(images)
        if self.config.mff_enabled:
            maps = [refine_map(m, self.refinement, n) for n, m in enumerate(maps)]
        extent = tuple(images.shape[-2:])
        return fuse_maps(maps, extent)

    def analyze(self, images: np.ndarray) -> list[AnomalyResult]:
        layer_maps = self.raw_layer_maps(images)
        fused = self.fused_maps(images, layer_maps)
        smooth = gaussian_smooth(fused, self.config.sigma_g)
        return [
            AnomalyResult([m[i] for m in layer_maps], fused[i], float(smooth[i].max()))
            for i in range(len(images))
        ]

    def calibrate_refinement(self, images: np.ndarray) -> RefinementParams:
        """Freeze refinement BN statistics from raw maps over normal ``images``."""
        if len(images) < 2:
            raise ValueError("calibration needs at least 2 normal images")
        maps = self.raw_layer_maps(images)
        per_image = ([m[i] for m in maps] for i in range(len(images)))
        params = calibrate_from_maps(per_image, self.levels)
        self.refinement = RefinementParams(
            params.scale.astype(np.float32),
            params.bias.astype(np.float32),
            params.mean.astype(np.float32),
            params.var.astype(np.float32),
        )
        return self.refinement
