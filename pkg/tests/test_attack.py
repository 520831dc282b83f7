import pytest
import torch
from hypothesis import given, settings, strategies as st

from advcap.attack import (AdversarialBatch, AttackConfig, difference_image, fgsm, input_gradient,
                           patch_sign_agreement, save_triplet, sign_step)
from advcap.errors import ConfigError, PairingError
from advcap.model import ImageBatch, forward_loss
from conftest import generic_weights, random_batch, tiny_model
from oracles import central_difference


def test_default_epsilon():
    assert AttackConfig().epsilon == 0.1


@pytest.mark.parametrize("kw", [dict(epsilon=-0.1), dict(clamp_min=1.0, clamp_max=0.0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        AttackConfig(**kw)


class TestInputGradient:
    @pytest.mark.parametrize("seed", [11, 12])
    def test_matches_finite_differences(self, seed):
        model = generic_weights(tiny_model(seed=seed, dtype=torch.float64), seed=seed)
        images, captions = random_batch(model.config, batch=2, seed=seed, dtype=torch.float64)
        g = input_gradient(model, images, captions)
        x = images.pixels.clone()
        with torch.no_grad():
            fd = central_difference(lambda z: forward_loss(z, captions, model), x, step=1e-4)
        big = g.abs() > 1e-8
        rel = (g - fd).abs() / g.abs().clamp_min(1e-12)
        assert big.sum() > 0
        assert rel[big].max().item() < 1e-4

    def test_shape_and_determinism(self):
        model = tiny_model(seed=12)
        images, captions = random_batch(model.config, batch=3, seed=12)
        g1 = input_gradient(model, images, captions)
        g2 = input_gradient(model, images, captions)
        assert g1.shape == images.pixels.shape
        assert torch.equal(g1, g2)

    def test_parameters_untouched(self):
        model = tiny_model(seed=13)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        images, captions = random_batch(model.config)
        input_gradient(model, images, captions)
        assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
        assert all(p.grad is None for p in model.parameters())


class TestFGSM:
    def test_zero_epsilon_is_identity(self):
        model = tiny_model()
        images, captions = random_batch(model.config)
        adv = fgsm(model, images, captions, AttackConfig(epsilon=0.0))
        assert torch.equal(adv.perturbed.pixels, images.pixels)
        assert not adv.perturbation.any()

    def test_unclamped_pixels_move_exactly_epsilon(self):
        model = tiny_model(seed=2, dtype=torch.float64)
        images, captions = random_batch(model.config, seed=2, dtype=torch.float64)
        images = ImageBatch(0.25 + 0.5 * images.pixels, images.ids)  # stays inside [0.1, 0.9]
        g = input_gradient(model, images, captions)
        adv = fgsm(model, images, captions, AttackConfig(0.1))
        moved = g.abs() > 0
        assert torch.allclose(adv.perturbation.abs()[moved], torch.full_like(g[moved], 0.1), atol=1e-15)
        assert not adv.perturbation[~moved].any()

    def test_scalar_linear_loss(self):
        theta = torch.tensor(2.0)
        x = torch.tensor([0.5], requires_grad=True)
        (g,) = torch.autograd.grad((theta * x).sum(), x)
        assert g.item() == 2.0
        assert sign_step(x, g, AttackConfig(0.1)).item() == pytest.approx(0.6)

    def test_clamping(self):
        x = torch.tensor([0.95, 0.02, 0.5])
        g = torch.tensor([1.0, -3.0, 0.0])
        assert sign_step(x, g, AttackConfig(0.1)).tolist() == pytest.approx([1.0, 0.0, 0.5])

    def test_original_not_mutated(self):
        model = tiny_model()
        images, captions = random_batch(model.config)
        copy = images.pixels.clone()
        fgsm(model, images, captions)
        assert torch.equal(images.pixels, copy)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), eps=st.floats(0.0, 0.5), batch=st.integers(1, 3))
    def test_invariants(self, seed, eps, batch):
        model = tiny_model(seed=seed % 17)
        images, captions = random_batch(model.config, batch=batch, seed=seed)
        cfg = AttackConfig(eps)
        adv = fgsm(model, images, captions, cfg)
        g = input_gradient(model, images, captions)
        eta = adv.perturbed.pixels - images.pixels
        assert eta.abs().max().item() <= eps + 1e-6
        assert adv.perturbed.pixels.min() >= 0 and adv.perturbed.pixels.max() <= 1
        assert (g * eta).sum().item() >= 0
        assert adv.source_ids == images.ids

    def test_loss_increases_on_trained_model(self, trained_toy, toy_splits):
        data = toy_splits["train"]
        wins = 0
        trials = 20
        for seed in range(trials):
            idx = torch.randperm(len(data), generator=torch.Generator().manual_seed(seed))[:4]
            images, captions = data.images(idx), data.captions(idx)
            adv = fgsm(trained_toy, images, captions, AttackConfig(0.1))
            with torch.no_grad():
                clean = forward_loss(images, captions, trained_toy).item()
                attacked = forward_loss(adv.perturbed, captions, trained_toy).item()
            wins += attacked >= clean
        assert wins / trials >= 0.95


class TestDifferenceImage:
    def _pair(self, delta):
        x = torch.full((1, 3, 4, 4), 0.5)
        adv = AdversarialBatch(ImageBatch(x + delta, ["a"]), ["a"], delta)
        return ImageBatch(x, ["a"]), adv

    def test_no_change_is_black(self):
        orig, adv = self._pair(torch.zeros(1, 3, 4, 4))
        assert not difference_image(orig, adv).any()

    def test_single_pixel(self):
        delta = torch.zeros(1, 3, 4, 4)
        delta[0, 1, 2, 3] = 0.1
        out = difference_image(*self._pair(delta))
        assert int((out > 0).sum()) == 1
        assert out[0, 1, 2, 3].item() == 1.0

    def test_range(self):
        out = difference_image(*self._pair(torch.rand(1, 3, 4, 4) * 0.2 - 0.1))
        assert out.min() >= 0 and out.max() == 1.0

    def test_pairing_error(self):
        orig, adv = self._pair(torch.zeros(1, 3, 4, 4))
        with pytest.raises(PairingError):
            difference_image(ImageBatch(orig.pixels, ["b"]), adv)

    def test_patch_aligned_structure(self, trained_toy, toy_splits):
        data = toy_splits["train"]
        adv = fgsm(trained_toy, data.images(), data.captions(), AttackConfig(0.1))
        inside, across = patch_sign_agreement(adv.perturbation, trained_toy.config.patch_size)
        assert inside > across

    def test_triplet_png(self, tmp_path):
        from PIL import Image

        orig, adv = self._pair(torch.rand(1, 3, 4, 4) * 0.1)
        diff = difference_image(orig, adv)
        path = save_triplet(orig.pixels[0], adv.perturbed.pixels[0], diff[0], tmp_path / "t.png", scale=1)
        with Image.open(path) as img:
            assert img.format == "PNG" and img.size == (3 * 4 + 4, 4)
