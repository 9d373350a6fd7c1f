"""Inference entry points, metric reports and heatmap output."""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data import LabeledSample, stack_images
from .imageio import write_image
from .inference import AnomalyResult, MetricReport, auroc, pixel_auroc
from .model import MultiADModel


def _model(obj: Checkpoint | MultiADModel) -> MultiADModel:
    return obj.model if isinstance(obj, Checkpoint) else obj


def _require_calibration(model: MultiADModel) -> None:
    if model.config.mff_enabled and model.refinement is None:
        raise RuntimeError("checkpoint has no refinement calibration but mff_enabled is set")


# maps whose dynamic range is below this are round-off, not signal
FLAT_RANGE = 1e-6


def heatmap_bytes(fused: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Min-max normalize to 8-bit; a flat map (range below ``FLAT_RANGE``) becomes all zeros."""
    lo, hi = float(fused.min()), float(fused.max())
    if hi - lo >= FLAT_RANGE:
        scaled = (fused - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(fused)
    return np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8), lo, hi


def write_heatmap(path: str | Path, fused: np.ndarray) -> dict:
    img, lo, hi = heatmap_bytes(fused)
    write_image(path, img)
    return {"min": lo, "max": hi}


def infer(obj: Checkpoint | MultiADModel, image: np.ndarray, heatmap: str | Path | None = None) -> tuple[AnomalyResult, dict]:
    """Analyze one ``[c, h, w]`` image; optionally write its heatmap.

    Returns the result and the heatmap normalization constants.
    """
    model = _model(obj)
    _require_calibration(model)
    result = model.analyze(np.asarray(image, dtype=np.float32)[None])[0]
    norm = write_heatmap(heatmap, result.fused) if heatmap is not None else dict(zip(("min", "max"), heatmap_bytes(result.fused)[1:]))
    return result, norm


def evaluate(
    obj: Checkpoint | MultiADModel,
    eval_split: list[LabeledSample],
    heatmap_dir: str | Path | None = None,
) -> MetricReport:
    model = _model(obj)
    _require_calibration(model)
    labels = np.array([s.label for s in eval_split])
    if labels.min() == labels.max():
        raise ValueError("evaluation split must contain both normal and anomalous samples")
    images = stack_images(eval_split)
    results = model.analyze(images)
    scores = np.array([r.score for r in results])
    masks = [s.mask if s.mask is not None else np.zeros(images.shape[2:], dtype=np.uint8) for s in eval_split]
    maps = [r.fused for r in results]
    gt = np.concatenate([np.asarray(m).ravel() > 0 for m in masks])
    extras: dict = {"scores": scores.tolist(), "labels": labels.tolist()}
    if heatmap_dir is not None:
        out = Path(heatmap_dir)
        out.mkdir(parents=True, exist_ok=True)
        extras["heatmaps"] = {}
        for s, r in zip(eval_split, results):
            fname = f"{s.defect}_{s.name}.pgm"
            extras["heatmaps"][fname] = write_heatmap(out / fname, r.fused)
    return MetricReport(
        image_auroc=auroc(scores, labels),
        pixel_auroc=pixel_auroc(maps, masks),
        n_normal=int((labels == 0).sum()),
        n_anomalous=int((labels == 1).sum()),
        n_normal_pixels=int((~gt).sum()),
        n_anomalous_pixels=int(gt.sum()),
        extras=extras,
    )


def training_summary(history: list[dict]) -> dict:
    summary: dict = {"steps": len(history)}
    for key in ("L_G", "L_D", "L_adv", "L_S"):
        vals = [h[key] for h in history if h.get(key) is not None]
        if vals:
            summary[key] = {"first": vals[0], "last": vals[-1], "mean": float(np.mean(vals)), "min": float(np.min(vals))}
    return summary


def report_document(report: MetricReport, ckpt: Checkpoint | None = None) -> dict:
    doc = asdict(report)
    extras = doc.pop("extras")
    doc.update(extras)
    if ckpt is not None:
        doc["training"] = training_summary(ckpt.history)
        doc["config"] = ckpt.config.to_dict()
        doc["teacher_mode"] = ckpt.teacher_mode
    return doc


def write_report(report: MetricReport, path: str | Path, ckpt: Checkpoint | None = None) -> dict:
    doc = report_document(report, ckpt)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    return doc
