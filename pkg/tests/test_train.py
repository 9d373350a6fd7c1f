import numpy as np
import pytest

from conftest import tiny_config
from multiad.data import LabeledSample, generate_synthetic_dataset, stack_images
from multiad.model import MultiADModel
from multiad.train import TrainingError, epoch_order, new_checkpoint, prepare_teacher, steps_per_epoch, train


@pytest.fixture(scope="module")
def short_run(tiny_splits):
    cfg = tiny_config(epochs=2)
    return cfg, train(cfg, tiny_splits.train)


class TestTrain:
    def test_step_count_and_history(self, short_run):
        cfg, ckpt = short_run
        assert ckpt.step == 2 * steps_per_epoch(12, cfg.batch_size) == len(ckpt.history)
        assert [h["step"] for h in ckpt.history] == list(range(ckpt.step))

    def test_student_loss_bookkeeping(self, short_run):
        cfg, ckpt = short_run
        for h in ckpt.history:
            assert h["L_S"] == pytest.approx(h["L_G"] + cfg.lam * h["L_adv"], rel=1e-5)
            assert 0.0 <= h["L_G"] <= 2.0 and h["L_D"] >= 0.0 and h["L_adv"] >= 0.0

    def test_teacher_weights_frozen(self, short_run, tiny_splits):
        cfg, ckpt = short_run
        ref = MultiADModel.initialize(cfg)
        prepare_teacher(ref, stack_images(tiny_splits.train))
        got, want = ckpt.model.teacher.arrays(), ref.teacher.arrays()
        for k in want:
            assert got[k].tobytes() == want[k].tobytes(), k
        assert ckpt.teacher_ready

    def test_student_moved(self, short_run):
        cfg, ckpt = short_run
        init = MultiADModel.initialize(cfg).student.arrays()
        assert any(not np.array_equal(v, init[k]) for k, v in ckpt.model.student.arrays().items())

    def test_refinement_calibrated_at_end(self, short_run):
        _, ckpt = short_run
        ref = ckpt.model.refinement
        assert ref is not None and ref.mean.shape == (ckpt.model.levels,)
        assert np.all(ref.var > 0)

    def test_discriminator_off(self, tiny_splits):
        cfg = tiny_config(discriminator_enabled=False)
        ckpt = train(cfg, tiny_splits.train)
        for h in ckpt.history:
            assert h["L_S"] == h["L_G"] and h["L_D"] is None and h["L_adv"] is None
        assert ckpt.disc_opt.t == 0

    def test_loss_decreases(self):
        data = generate_synthetic_dataset(4, 20, 0, 32, n_test_normal=0)
        drops = []
        for seed in range(3):
            ckpt = train(tiny_config(seed=seed, epochs=10, lam=0.01), data.train)
            lg = [h["L_G"] for h in ckpt.history]
            assert len(lg) == 50
            drops.append(np.median(lg[:5]) > np.median(lg[-5:]))
        assert all(drops)

    def test_student_copy_of_teacher_starts_at_zero(self, tiny_splits):
        # eval-mode student BN makes the copied student compute exactly the teacher's maps
        cfg = tiny_config(student_bn_mode="eval")
        ckpt = new_checkpoint(cfg)
        prepare_teacher(ckpt.model, stack_images(tiny_splits.train))
        ckpt.teacher_ready = True
        ckpt.model.student = ckpt.model.teacher.copy()
        ckpt = train(cfg, tiny_splits.train, resume=ckpt, max_steps=1)
        assert ckpt.history[0]["L_G"] == pytest.approx(0.0, abs=1e-6)
        assert ckpt.history[0]["L_adv"] > 0

    def test_ablation_flags_touch_only_their_subsystem(self, tiny_splits, short_run):
        _, full = short_run
        names = set(full.model.student.arrays())
        no_se = train(tiny_config(epochs=2, se_enabled=False), tiny_splits.train)
        assert set(no_se.model.student.arrays()) == names
        se_params = [k for k in names if ".se." in k]
        init = MultiADModel.initialize(no_se.config).student.arrays()
        assert all(np.array_equal(no_se.model.student.arrays()[k], init[k]) for k in se_params)

        no_d = train(tiny_config(epochs=2, discriminator_enabled=False), tiny_splits.train)
        d_init = MultiADModel.initialize(no_d.config).discriminator.arrays()
        assert all(np.array_equal(v, d_init[k]) for k, v in no_d.model.discriminator.arrays().items())

        no_mff = train(tiny_config(epochs=2, mff_enabled=False), tiny_splits.train)
        assert no_mff.model.refinement is None
        for k, v in no_mff.model.student.arrays().items():
            assert v.tobytes() == full.model.student.arrays()[k].tobytes()

    def test_pretext_teacher(self, tiny_splits):
        cfg = tiny_config(teacher_mode="pretext", pretext_epochs=1)
        a, b = MultiADModel.initialize(cfg), MultiADModel.initialize(cfg)
        prepare_teacher(a, stack_images(tiny_splits.train))
        prepare_teacher(b, stack_images(tiny_splits.train))
        init = MultiADModel.initialize(cfg).teacher.arrays()
        got = a.teacher.arrays()
        assert got.keys() == init.keys() and not any(k.startswith("head") for k in got)
        assert any(not np.array_equal(got[k], init[k]) for k in got if k.endswith("weight"))
        assert all(got[k].tobytes() == v.tobytes() for k, v in b.teacher.arrays().items())
        assert not any(p.requires_grad for p in a.teacher.params.values())

    def test_max_steps_defers_calibration(self, tiny_splits):
        ckpt = train(tiny_config(), tiny_splits.train, max_steps=2)
        assert ckpt.step == 2 and ckpt.model.refinement is None

    def test_rejects_anomalous_training_data(self, tiny_splits):
        with pytest.raises(TrainingError):
            train(tiny_config(), tiny_splits.eval)

    def test_rejects_wrong_extent(self, tiny_splits):
        with pytest.raises(TrainingError, match="extent"):
            train(tiny_config(input_extent=64), tiny_splits.train)

    def test_rejects_single_image(self):
        img = np.zeros((1, 32, 32), np.float32)
        with pytest.raises(TrainingError):
            train(tiny_config(), [LabeledSample(img, 0)])

    def test_resume_with_other_config(self, tiny_splits):
        ckpt = train(tiny_config(), tiny_splits.train, max_steps=1)
        with pytest.raises(TrainingError, match="config"):
            train(tiny_config(lam=0.5), tiny_splits.train, resume=ckpt)


def test_epoch_order_is_seeded_permutation():
    a = epoch_order(3, 1, 10)
    assert sorted(a) == list(range(10))
    assert np.array_equal(a, epoch_order(3, 1, 10))
    assert not np.array_equal(a, epoch_order(3, 2, 10))
