import math

import numpy as np
import pytest

from multiad.distill import (
    discriminator_forward,
    discriminator_widths,
    init_discriminator,
    loss_adversarial,
    loss_discriminator,
    loss_generator,
    loss_student,
    normalize_pyramid,
)
from multiad.tensor import AdamState, Tape, Tensor, adam_step, collect_grads, zero_grads


def pyramid_of(*arrays):
    return normalize_pyramid([Tensor(a) for a in arrays])


def sites_with_cosines(cosines):
    """One-image 2-channel layer whose student sites have the given cosine to the teacher."""
    t = np.zeros((1, 2, 1, len(cosines)))
    s = np.zeros_like(t)
    for j, c in enumerate(cosines):
        t[0, :, 0, j] = [1.0, 0.0]
        s[0, :, 0, j] = [c, math.sqrt(1 - c * c)]
    return t, s


class TestNormalize:
    def test_site_vector(self):
        pyr = pyramid_of(np.array([3.0, 4.0]).reshape(1, 2, 1, 1))
        np.testing.assert_allclose(pyr.activations(0), [[0.6, 0.8]])

    def test_idempotent_and_scale_free(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        once = pyramid_of(x).levels[0].data
        np.testing.assert_allclose(pyramid_of(once).levels[0].data, once, rtol=1e-6)
        np.testing.assert_allclose(pyramid_of(7.5 * x).levels[0].data, once, rtol=1e-6)

    def test_unit_norms_and_site_count(self, rng):
        pyr = pyramid_of(rng.standard_normal((2, 5, 3, 4)))
        assert pyr.sites(0) == 12
        np.testing.assert_allclose(np.linalg.norm(pyr.activations(0), axis=1), 1.0, atol=1e-6)


class TestLossGenerator:
    def test_identical_is_zero(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        assert loss_generator(pyramid_of(x), pyramid_of(x)).item() == pytest.approx(0.0, abs=1e-6)

    def test_null_sites_count_as_identical(self):
        t, s = sites_with_cosines([0.0, 0.0])
        t[..., 1] = s[..., 1] = 0.0
        assert loss_generator(pyramid_of(t), pyramid_of(s)).item() == pytest.approx(0.5, abs=1e-7)

    def test_orthogonal_is_one(self):
        t, s = sites_with_cosines([0.0, 0.0, 0.0])
        assert loss_generator(pyramid_of(t), pyramid_of(s)).item() == pytest.approx(1.0, abs=1e-7)

    def test_two_site_example(self):
        t, s = sites_with_cosines([1.0, 0.2])
        assert loss_generator(pyramid_of(t), pyramid_of(s)).item() == pytest.approx(0.4, abs=1e-6)

    def test_layer_average(self):
        t1, s1 = sites_with_cosines([1.0])
        t2, s2 = sites_with_cosines([0.0, 0.0])
        val = loss_generator(pyramid_of(t1, t2), pyramid_of(s1, s2)).item()
        assert val == pytest.approx(0.5, abs=1e-7)

    def test_scale_invariance(self, rng):
        t, s = rng.standard_normal((2, 4, 3, 3)), rng.standard_normal((2, 4, 3, 3))
        base = loss_generator(pyramid_of(t), pyramid_of(s)).item()
        scaled = loss_generator(pyramid_of(3.0 * t), pyramid_of(0.01 * s)).item()
        assert scaled == pytest.approx(base, abs=1e-6)

    def test_range(self, rng):
        t = rng.standard_normal((2, 4, 3, 3))
        assert loss_generator(pyramid_of(t), pyramid_of(-t)).item() == pytest.approx(2.0, abs=1e-6)

    def test_structure_mismatch(self, rng):
        a = rng.standard_normal((1, 2, 2, 2))
        with pytest.raises(ValueError):
            loss_generator(pyramid_of(a), pyramid_of(a, a))
        with pytest.raises(ValueError):
            loss_generator(pyramid_of(a), pyramid_of(rng.standard_normal((1, 2, 3, 3))))

    def test_no_gradient_to_teacher(self, rng):
        t = Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True)
        s = Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True)
        with Tape() as tape:
            loss = loss_generator(normalize_pyramid([t]), normalize_pyramid([s]))
        tape.backward(loss)
        assert t.grad is None or not np.any(t.grad)
        assert np.any(s.grad)


@pytest.fixture
def small_disc(rng):
    return init_discriminator(8, (4, 4), rng, width_factor=1 / 32)


class TestDiscriminator:
    def test_full_widths_and_flatten(self, rng):
        assert discriminator_widths() == (128, 256, 512, 1024)
        net = init_discriminator(4, (2, 3), rng)
        assert net.params["disc.fc.weight"].shape == (1, 1024 * 2 * 3)

    def test_output_in_open_interval(self, small_disc, rng):
        x = Tensor(rng.standard_normal((3, 8, 4, 4)) * 100)
        out = discriminator_forward(x, small_disc, rng, "train").data
        assert out.shape == (3,) and np.all((out > 0) & (out < 1))

    def test_zero_weights_give_half(self, small_disc, rng):
        for p in small_disc.params.values():
            p.data = np.zeros_like(p.data)
        out = discriminator_forward(Tensor(rng.standard_normal((2, 8, 4, 4))), small_disc, rng, "eval").data
        np.testing.assert_array_equal(out, 0.5)

    def test_eval_mode_deterministic(self, small_disc, rng):
        x = Tensor(rng.standard_normal((2, 8, 4, 4)))
        a = discriminator_forward(x, small_disc, None, "eval").data
        b = discriminator_forward(x, small_disc, None, "eval").data
        np.testing.assert_array_equal(a, b)

    def test_ascent_step_lowers_loss(self):
        # one Adam step on L_D with fixed inputs and dropout mask should not raise L_D
        ok = 0
        for trial in range(100):
            rng = np.random.default_rng([77, trial])
            net = init_discriminator(8, (4, 4), rng, width_factor=1 / 32)
            net.set_trainable(True)
            real = Tensor(rng.standard_normal((4, 8, 4, 4)) + 0.5)
            fake = Tensor(rng.standard_normal((4, 8, 4, 4)) - 0.5)
            seed = int(rng.integers(2**31))

            def l_d():
                drop = np.random.default_rng(seed)
                d_real = discriminator_forward(real, net, drop, "train", update_stats=False)
                d_fake = discriminator_forward(fake, net, drop, "train", update_stats=False)
                return loss_discriminator(d_real, d_fake)

            zero_grads(net.params)
            with Tape() as tape:
                before = l_d()
            tape.backward(before)
            adam_step(net.params, collect_grads(net.params), AdamState(lr=1e-3))
            ok += l_d().item() <= before.item()
        assert ok >= 95


class TestLosses:
    def test_discriminator_loss_examples(self):
        assert loss_discriminator(Tensor([1.0, 1.0]), Tensor([0.0, 0.0])).item() == pytest.approx(0.0, abs=1e-6)
        assert loss_discriminator(Tensor([0.5]), Tensor([0.5])).item() == pytest.approx(2 * math.log(2), rel=1e-6)

    def test_discriminator_loss_non_negative(self, rng):
        for _ in range(20):
            assert loss_discriminator(Tensor(rng.random(5)), Tensor(rng.random(5))).item() >= 0

    def test_adversarial_examples(self):
        assert loss_adversarial(Tensor([1.0])).item() == pytest.approx(0.0, abs=1e-6)
        assert loss_adversarial(Tensor([0.5, 0.5])).item() == pytest.approx(math.log(2), rel=1e-6)

    def test_adversarial_monotone(self):
        assert loss_adversarial(Tensor([0.3, 0.6])).item() > loss_adversarial(Tensor([0.4, 0.6])).item()

    def test_zero_probability_stays_finite(self):
        assert np.isfinite(loss_adversarial(Tensor([0.0])).item())
        assert np.isfinite(loss_discriminator(Tensor([0.0]), Tensor([1.0])).item())

    def test_empty_batches(self):
        with pytest.raises(ValueError):
            loss_adversarial(Tensor(np.zeros(0)))
        with pytest.raises(ValueError):
            loss_discriminator(Tensor([0.5]), Tensor([0.5, 0.5]))

    def test_student_loss(self):
        assert loss_student(Tensor(0.4), Tensor(0.7), 0.1).item() == pytest.approx(0.47, abs=1e-7)
        assert loss_student(Tensor(0.4), Tensor(0.7), 0.0).item() == pytest.approx(0.4)
        assert loss_student(Tensor(0.0), Tensor(0.0), 0.3).item() == 0.0
        assert loss_student(Tensor(0.4), None, 0.1).item() == pytest.approx(0.4)
        with pytest.raises(ValueError):
            loss_student(Tensor(0.4), Tensor(0.7), -0.1)

    def test_student_loss_linear_in_lambda(self, rng):
        for _ in range(50):
            lg, la = rng.random(), rng.random() * 5
            l1, l2 = rng.random(), rng.random()
            s1 = loss_student(Tensor(lg), Tensor(la), l1).item()
            s2 = loss_student(Tensor(lg), Tensor(la), l2).item()
            assert s1 + s2 - 2 * lg == pytest.approx((l1 + l2) * la, abs=1e-5)
