import json

import numpy as np
import pytest

from conftest import tiny_config
from multiad.data import stack_images
from multiad.evaluate import evaluate, heatmap_bytes, infer, write_report
from multiad.imageio import read_image
from multiad.inference import AnomalyResult, auroc, pixel_auroc
from multiad.model import MultiADModel
from multiad.train import train


class MaskOracle(MultiADModel):
    """Returns each sample's ground-truth mask as its anomaly map."""

    def __init__(self, base: MultiADModel, masks):
        super().__init__(base.config, base.teacher, base.student, base.discriminator, base.refinement)
        self.masks = masks

    def analyze(self, images):
        return [AnomalyResult([], m.astype(float), float(m.max())) for m in self.masks[: len(images)]]


class ConstantModel(MaskOracle):
    def analyze(self, images):
        return [AnomalyResult([], np.ones(images.shape[2:]), 1.0) for _ in images]


def _masks(split):
    return [s.mask if s.mask is not None else np.zeros((32, 32), np.uint8) for s in split]


@pytest.fixture(scope="module")
def trained(tiny_splits):
    return train(tiny_config(), tiny_splits.train)


def mirrored(cfg, splits):
    """A calibrated model whose student is an exact copy of its teacher."""
    model = MultiADModel.initialize(cfg)
    model.student = model.teacher.copy()
    model.calibrate_refinement(stack_images(splits.train))
    return model


class TestEvaluate:
    def test_oracle_detector(self, tiny_splits, tiny_cfg):
        base = MultiADModel.initialize(tiny_cfg.replace(mff_enabled=False))
        report = evaluate(MaskOracle(base, _masks(tiny_splits.eval)), tiny_splits.eval)
        assert report.image_auroc == 1.0 and report.pixel_auroc == 1.0

    def test_constant_maps(self, tiny_splits, tiny_cfg):
        base = MultiADModel.initialize(tiny_cfg.replace(mff_enabled=False))
        report = evaluate(ConstantModel(base, None), tiny_splits.eval)
        assert report.image_auroc == 0.5 and report.pixel_auroc == 0.5

    def test_report_cross_check(self, trained, tiny_splits, tmp_path):
        report = evaluate(trained, tiny_splits.eval, heatmap_dir=tmp_path / "maps")
        assert report.n_normal == 6 and report.n_anomalous == 6
        assert report.n_anomalous_pixels == sum(int(m.sum()) for m in _masks(tiny_splits.eval))
        assert report.image_auroc == auroc(report.extras["scores"], report.extras["labels"])
        results = trained.model.analyze(stack_images(tiny_splits.eval))
        assert report.pixel_auroc == pixel_auroc([r.fused for r in results], _masks(tiny_splits.eval))
        assert len(list((tmp_path / "maps").glob("*.pgm"))) == 12
        doc = write_report(report, tmp_path / "r.json", trained)
        assert json.loads((tmp_path / "r.json").read_text()) == doc
        assert doc["training"]["steps"] == trained.step and doc["teacher_mode"] == "random"

    def test_single_class_split(self, trained, tiny_splits):
        with pytest.raises(ValueError):
            evaluate(trained, tiny_splits.eval[:6])

    def test_uncalibrated(self, tiny_cfg, tiny_splits):
        with pytest.raises(RuntimeError, match="calibration"):
            evaluate(MultiADModel.initialize(tiny_cfg), tiny_splits.eval)

    def test_deterministic(self, trained, tiny_splits):
        a = evaluate(trained, tiny_splits.eval)
        b = evaluate(trained, tiny_splits.eval)
        assert a.extras["scores"] == b.extras["scores"]


class TestInfer:
    def test_student_equals_teacher(self, tiny_splits, tiny_cfg, tmp_path):
        model = mirrored(tiny_cfg, tiny_splits)
        result, norm = infer(model, tiny_splits.eval[-1].image, tmp_path / "h.pgm")
        assert all(np.abs(m).max() < 1e-6 for m in result.layer_maps)
        assert abs(result.score) < 1e-6 and np.abs(result.fused).max() < 1e-6
        assert not read_image(tmp_path / "h.pgm").any()
        assert norm["max"] == pytest.approx(norm["min"], abs=1e-6)

    def test_shapes_and_score(self, trained, tiny_splits):
        result, _ = infer(trained, tiny_splits.eval[7].image)
        assert result.fused.shape == (32, 32)
        assert [m.shape for m in result.layer_maps] == [(8, 8)] * trained.model.levels
        assert result.score <= result.fused.max() + 1e-12

    def test_repeat_calls_identical(self, trained, tiny_splits, tmp_path):
        a, _ = infer(trained, tiny_splits.eval[8].image, tmp_path / "a.pgm")
        b, _ = infer(trained, tiny_splits.eval[8].image, tmp_path / "b.pgm")
        assert a.score == b.score
        assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()

    def test_heatmap_scaling(self):
        img, lo, hi = heatmap_bytes(np.array([[1.0, 2.0], [3.0, 5.0]]))
        assert (lo, hi) == (1.0, 5.0)
        np.testing.assert_array_equal(img, [[0, 64], [128, 255]])
