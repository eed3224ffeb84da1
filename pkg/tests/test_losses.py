import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from facesynth import losses, netarch
from facesynth.losses import (
    LossConfig,
    LossValue,
    binary_disc_terms,
    equilibrium_update,
    finite_difference_gradcheck,
    loss_classifier,
    loss_discriminator_feature,
    loss_discriminator_image,
    loss_feature_adversarial,
    loss_realism,
    loss_refiner,
    loss_regularization,
)
from facesynth.netarch import NetSpec, discriminate_feature, discriminate_image, init_params


def small_spec(**kw):
    base = dict(resolution=32, noise_dim=8, identity_count=5, pose_count=9, channel_base=2)
    base.update(kw)
    return NetSpec(**base)


@pytest.fixture(scope="module")
def bundle():
    return init_params(small_spec(), seed=0)


def rand_images(n, rng, res=32):
    return rng.uniform(0, 1, (n, res, res))


def rand_noise(n, rng, dim=8):
    return rng.uniform(-1, 1, (n, dim))


class _EchoDecoder(nn.Module):
    """Test stub: ignores its input vector and returns a fixed image batch."""

    def __init__(self, images: torch.Tensor, spec):
        super().__init__()
        self.images = images
        self.spec = spec
        self.register_buffer("_dummy", torch.zeros(1))

    def forward(self, v):
        return self.images[: v.shape[0]]


class TestAnalyticValues:
    def test_uncertain_discriminator_gives_2ln2(self):
        half = torch.tensor([0.5], dtype=torch.float64)
        ps_r, ps_g = binary_disc_terms(half, half)
        total = LossValue.from_tensor(ps_r + ps_g)
        assert total.value == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_perfect_discrimination_vanishes(self):
        for eps in (1e-3, 1e-5):
            ps_r, ps_g = binary_disc_terms(
                torch.tensor([1.0 - eps], dtype=torch.float64),
                torch.tensor([eps], dtype=torch.float64),
            )
            assert float(ps_r + ps_g) == pytest.approx(0.0, abs=3 * eps)

    def test_disc_image_half_outputs(self, bundle):
        b = init_params(small_spec(), seed=1)
        with torch.no_grad():
            b.image_disc.fc.weight.zero_()
            b.image_disc.fc.bias.zero_()
        rng = np.random.default_rng(0)
        lv = loss_discriminator_image(b.image_disc, rand_images(1, rng), rand_images(1, rng))
        assert lv.value == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_realism_half_output(self):
        b = init_params(small_spec(), seed=2)
        with torch.no_grad():
            b.image_disc.fc.weight.zero_()
            b.image_disc.fc.bias.zero_()
        rng = np.random.default_rng(1)
        lv = loss_realism(b, rand_images(3, rng), rand_noise(3, rng))
        assert lv.value == pytest.approx(math.log(2), abs=1e-6)

    def test_classifier_uniform_heads(self):
        b = init_params(small_spec(), seed=3)
        with torch.no_grad():
            for layer in (b.classifier.head_identity, b.classifier.head_pose):
                layer.weight.zero_()
                layer.bias.zero_()
        rng = np.random.default_rng(2)
        lv = loss_classifier(b.classifier, b.feature_net, rand_images(4, rng), [0, 1, 2, 3], [0, 1, 2, 3])
        assert lv.value == pytest.approx(math.log(5) + math.log(9), abs=1e-6)

    def test_feature_disc_half_output(self):
        b = init_params(small_spec(), seed=4)
        with torch.no_grad():
            b.feature_disc.fc3.weight.zero_()
            b.feature_disc.fc3.bias.zero_()
        rng = np.random.default_rng(3)
        lv = loss_discriminator_feature(
            b.feature_disc, b.feature_net, rand_images(2, rng), rand_images(2, rng)
        )
        assert lv.value == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_feature_adversarial_half_output(self):
        b = init_params(small_spec(), seed=5)
        with torch.no_grad():
            b.feature_disc.fc3.weight.zero_()
            b.feature_disc.fc3.bias.zero_()
        rng = np.random.default_rng(4)
        lv = loss_feature_adversarial(b.feature_net, b.feature_disc, rand_images(3, rng))
        assert lv.value == pytest.approx(math.log(2), abs=1e-6)

    def test_regularization_identity_refiner_is_zero(self, bundle):
        rng = np.random.default_rng(5)
        imgs = torch.as_tensor(rand_images(3, rng), dtype=torch.float32)[:, None]
        b = init_params(small_spec(), seed=6)
        b.refiner_decoder = _EchoDecoder(imgs, b.spec)
        lv = loss_regularization(b, imgs.squeeze(1).numpy(), rand_noise(3, rng))
        assert lv.value == pytest.approx(0.0, abs=1e-6)

    def test_regularization_matches_manual_feature_distance(self):
        b = init_params(small_spec(), seed=7)
        rng = np.random.default_rng(6)
        src = rand_images(2, rng)
        dst = torch.as_tensor(rand_images(2, rng), dtype=torch.float32)[:, None]
        b.refiner_decoder = _EchoDecoder(dst, b.spec)
        lv = loss_regularization(b, src, rand_noise(2, rng))
        f_src = netarch.extract_features(b.feature_net, src)
        f_dst = netarch.extract_features(b.feature_net, dst.squeeze(1).numpy())
        manual = np.linalg.norm(f_dst - f_src, axis=1).mean()
        assert lv.value == pytest.approx(manual, rel=1e-5)


class TestRefinerComposition:
    def test_lambda_zero_equals_realism(self, bundle):
        rng = np.random.default_rng(7)
        y, z = rand_images(4, rng), rand_noise(4, rng)
        cfg = LossConfig(lambda_reg=0.0)
        assert loss_refiner(bundle, y, z, cfg).value == pytest.approx(
            loss_realism(bundle, y, z, cfg).value, abs=1e-9
        )

    def test_additivity(self, bundle):
        rng = np.random.default_rng(8)
        y, z = rand_images(4, rng), rand_noise(4, rng)
        cfg1 = LossConfig(lambda_reg=1.0)
        total = loss_refiner(bundle, y, z, cfg1).value
        parts = loss_realism(bundle, y, z, cfg1).value + loss_regularization(bundle, y, z, cfg1).value
        assert total == pytest.approx(parts, abs=1e-6)

    def test_weighted_composition(self, bundle):
        rng = np.random.default_rng(9)
        y, z = rand_images(3, rng), rand_noise(3, rng)
        cfg = LossConfig(lambda_reg=0.5)
        expected = (
            loss_realism(bundle, y, z, cfg).value
            + 0.5 * loss_regularization(bundle, y, z, cfg).value
        )
        assert loss_refiner(bundle, y, z, cfg).value == pytest.approx(expected, abs=1e-6)

    def test_affine_in_lambda(self, bundle):
        rng = np.random.default_rng(10)
        y, z = rand_images(3, rng), rand_noise(3, rng)
        vals = [loss_refiner(bundle, y, z, LossConfig(lambda_reg=lam)).value for lam in (0.0, 0.5, 1.0)]
        assert vals[1] == pytest.approx((vals[0] + vals[2]) / 2, abs=1e-6)


class TestScalarLoopOracles:
    def test_disc_image_loss(self, bundle):
        rng = np.random.default_rng(11)
        refined, generic = rand_images(4, rng), rand_images(4, rng)
        lv = loss_discriminator_image(bundle.image_disc, refined, generic)
        acc = 0.0
        for i in range(4):
            p_r = discriminate_image(bundle.image_disc, refined[i])
            p_g = discriminate_image(bundle.image_disc, generic[i])
            acc += -math.log(min(max(p_r, 1e-7), 1 - 1e-7))
            acc += -math.log(min(max(1 - p_g, 1e-7), 1 - 1e-7))
        assert lv.value == pytest.approx(acc / 4, rel=1e-5)

    def test_classifier_loss(self, bundle):
        rng = np.random.default_rng(12)
        imgs = rand_images(4, rng)
        ids = [0, 2, 4, 1]
        poses = [8, 0, 3, 5]
        lv = loss_classifier(bundle.classifier, bundle.feature_net, imgs, ids, poses)
        acc = 0.0
        for i in range(4):
            feat = netarch.extract_features(bundle.feature_net, imgs[i])
            pi, pp = netarch.classify(bundle.classifier, feat)
            acc += -math.log(pi[ids[i]]) - math.log(pp[poses[i]])
        assert lv.value == pytest.approx(acc / 4, rel=1e-4)

    def test_feature_disc_loss(self, bundle):
        rng = np.random.default_rng(13)
        refined, generic = rand_images(3, rng), rand_images(3, rng)
        lv = loss_discriminator_feature(bundle.feature_disc, bundle.feature_net, refined, generic)
        acc = 0.0
        for i in range(3):
            f_r = netarch.extract_features(bundle.feature_net, refined[i])
            f_g = netarch.extract_features(bundle.feature_net, generic[i])
            acc += -math.log(min(max(discriminate_feature(bundle.feature_disc, f_r), 1e-7), 1 - 1e-7))
            acc += -math.log(min(max(1 - discriminate_feature(bundle.feature_disc, f_g), 1e-7), 1 - 1e-7))
        assert lv.value == pytest.approx(acc / 3, rel=1e-5)


class TestErrors:
    def test_empty_batches_rejected(self, bundle):
        rng = np.random.default_rng(14)
        with pytest.raises(ValueError, match="empty"):
            loss_discriminator_image(bundle.image_disc, np.zeros((0, 32, 32)), rand_images(1, rng))
        with pytest.raises(ValueError, match="empty"):
            loss_feature_adversarial(bundle.feature_net, bundle.feature_disc, np.zeros((0, 32, 32)))

    def test_unequal_halves_rejected(self, bundle):
        rng = np.random.default_rng(15)
        with pytest.raises(ValueError, match="same length"):
            loss_discriminator_image(bundle.image_disc, rand_images(2, rng), rand_images(3, rng))

    def test_label_out_of_range(self, bundle):
        rng = np.random.default_rng(16)
        with pytest.raises(ValueError, match="identity label"):
            loss_classifier(bundle.classifier, bundle.feature_net, rand_images(1, rng), [5], [0])
        with pytest.raises(ValueError, match="pose label"):
            loss_classifier(bundle.classifier, bundle.feature_net, rand_images(1, rng), [0], [9])

    def test_loss_value_consistency_enforced(self):
        with pytest.raises(ValueError, match="mean"):
            LossValue(value=1.0, per_sample=np.array([0.0, 0.0]))


class TestNonnegativity:
    def test_all_losses_nonnegative(self):
        cfg = LossConfig()
        for seed in range(3):
            b = init_params(small_spec(), seed=seed)
            rng = np.random.default_rng(seed)
            y, g, z = rand_images(3, rng), rand_images(3, rng), rand_noise(3, rng)
            vals = [
                loss_discriminator_image(b.image_disc, y, g, cfg).value,
                loss_realism(b, y, z, cfg).value,
                loss_regularization(b, y, z, cfg).value,
                loss_refiner(b, y, z, cfg).value,
                loss_classifier(b.classifier, b.feature_net, y, [0, 1, 2], [0, 1, 2]).value,
                loss_discriminator_feature(b.feature_disc, b.feature_net, y, g, cfg).value,
                loss_feature_adversarial(b.feature_net, b.feature_disc, y, cfg).value,
            ]
            assert all(v >= 0 for v in vals), vals

    def test_strict_mode_flips_adversarial_sign(self, bundle):
        rng = np.random.default_rng(17)
        y, z = rand_images(2, rng), rand_noise(2, rng)
        default = loss_realism(bundle, y, z, LossConfig()).value
        strict = loss_realism(bundle, y, z, LossConfig(strict_paper_signs=True)).value
        assert strict == pytest.approx(-default, abs=1e-9)


class TestEquilibrium:
    def test_balanced_losses_leave_k_unchanged(self):
        cfg = LossConfig(equilibrium_balance=1.0, equilibrium_gain=0.01)
        k_next, weighted = equilibrium_update(0.4, 0.7, 0.7, cfg)
        assert k_next == pytest.approx(0.4, abs=1e-15)
        assert weighted == pytest.approx(0.7 + 0.4 * 0.7, abs=1e-12)

    def test_zero_gain_freezes_k(self):
        cfg = LossConfig(equilibrium_gain=0.0)
        k_next, _ = equilibrium_update(0.3, 2.0, 0.1, cfg)
        assert k_next == 0.3

    def test_constant_imbalance_saturates(self):
        cfg = LossConfig(equilibrium_gain=0.05, equilibrium_balance=0.7)
        # positive control error: gamma_b * real - fake = 0.7*1.0 - 0.2 = 0.5
        k = 0.0
        for _ in range(100):
            k, _ = equilibrium_update(k, 1.0, 0.2, cfg)
        assert k == 1.0
        # closed form: saturation after ceil(1 / (gain * error)) = 40 steps
        k = 0.0
        for i in range(40):
            k, _ = equilibrium_update(k, 1.0, 0.2, cfg)
            assert k == pytest.approx(min(1.0, 0.05 * 0.5 * (i + 1)), abs=1e-12)

    def test_invalid_k_rejected(self):
        with pytest.raises(ValueError):
            equilibrium_update(1.5, 1.0, 1.0, LossConfig())


class TestFreezeSemantics:
    def _grads(self, module):
        return [p.grad for p in module.parameters()]

    def test_refiner_terms_freeze_disc_and_feature_net(self, bundle):
        b = init_params(small_spec(), seed=8)
        rng = np.random.default_rng(18)
        y = torch.as_tensor(rand_images(2, rng), dtype=torch.float32)[:, None]
        z = torch.as_tensor(rand_noise(2, rng), dtype=torch.float32)
        terms = losses.refiner_terms(b, y, z, LossConfig())
        (terms["realism"] + 0.5 * terms["regularization"]).mean().backward()
        assert all(g is None for g in self._grads(b.image_disc))
        assert all(g is None for g in self._grads(b.feature_net))
        enc_grads = [g for g in self._grads(b.refiner_encoder) if g is not None]
        assert enc_grads and any(g.abs().max() > 0 for g in enc_grads)

    def test_feature_adversarial_freezes_gamma(self):
        b = init_params(small_spec(), seed=9)
        rng = np.random.default_rng(19)
        r = torch.as_tensor(rand_images(2, rng), dtype=torch.float32)[:, None]
        ps = losses.feature_adversarial_terms(b.feature_net, b.feature_disc, r, LossConfig())
        ps.mean().backward()
        assert all(g is None for g in self._grads(b.feature_disc))
        fn_grads = [g for g in self._grads(b.feature_net) if g is not None]
        assert fn_grads and any(g.abs().max() > 0 for g in fn_grads)

    def test_feature_disc_terms_freeze_theta_f(self):
        b = init_params(small_spec(), seed=10)
        rng = np.random.default_rng(20)
        r = torch.as_tensor(rand_images(2, rng), dtype=torch.float32)[:, None]
        g = torch.as_tensor(rand_images(2, rng), dtype=torch.float32)[:, None]
        ps_r, ps_g = losses.disc_feature_terms(b.feature_disc, b.feature_net, r, g)
        (ps_r + ps_g).mean().backward()
        assert all(gr is None for gr in self._grads(b.feature_net))
        fd_grads = [gr for gr in self._grads(b.feature_disc) if gr is not None]
        assert fd_grads and any(gr.abs().max() > 0 for gr in fd_grads)

    def test_classifier_terms_train_both(self):
        b = init_params(small_spec(), seed=11)
        rng = np.random.default_rng(21)
        x = torch.as_tensor(rand_images(2, rng), dtype=torch.float32)[:, None]
        ps = losses.classifier_terms(
            b.classifier, b.feature_net, x, torch.tensor([0, 1]), torch.tensor([0, 1])
        )
        ps.mean().backward()
        assert any(p.grad is not None and p.grad.abs().max() > 0 for p in b.classifier.parameters())
        assert any(p.grad is not None and p.grad.abs().max() > 0 for p in b.feature_net.parameters())


def _dt(mods):
    return next(iter(mods.values())).parameters().__next__().dtype


class TestGradientChecks:
    """Autograd against float64 central differences on reduced specs."""

    def _data(self, seed, n=2):
        rng = np.random.default_rng(seed)
        y = torch.as_tensor(rand_images(n, rng), dtype=torch.float32)[:, None]
        g = torch.as_tensor(rand_images(n, rng), dtype=torch.float32)[:, None]
        z = torch.as_tensor(rand_noise(n, rng), dtype=torch.float32)
        return y, g, z

    def _assert_pass_rate(self, errors, tol=1e-3, rate=0.95):
        assert (errors < tol).mean() >= rate, f"errors: {np.sort(errors)[-5:]}"

    def test_disc_image_gradients(self):
        b = init_params(small_spec(), seed=20)
        y, g, z = self._data(30)
        with torch.no_grad():
            refined = b.refiner_decoder(torch.cat([b.refiner_encoder(y), z], 1))

        def builder(mods):
            dt = _dt(mods)
            ps_r, ps_g = losses.disc_image_terms(mods["disc"], refined.to(dt), g.to(dt))
            return (ps_r + ps_g).mean()

        errors = finite_difference_gradcheck(builder, {"disc": b.image_disc}, n_coords=30, seed=0)
        self._assert_pass_rate(errors)

    def test_refiner_gradients(self):
        b = init_params(small_spec(), seed=21)
        y, _, z = self._data(31)
        cfg = LossConfig(lambda_reg=0.5)

        def builder(mods):
            dt = _dt(mods)
            terms = losses.refiner_terms(mods, y.to(dt), z.to(dt), cfg)
            return (terms["realism"] + cfg.lambda_reg * terms["regularization"]).mean()

        errors = finite_difference_gradcheck(
            builder,
            {
                "refiner_encoder": b.refiner_encoder,
                "refiner_decoder": b.refiner_decoder,
                "image_disc": b.image_disc,
                "feature_net": b.feature_net,
            },
            check=["refiner_encoder", "refiner_decoder"],
            n_coords=30,
            seed=1,
        )
        self._assert_pass_rate(errors)

    def test_refiner_gradients_double_precision(self):
        b = init_params(small_spec(), seed=22).to_double()
        y, _, z = self._data(32)
        cfg = LossConfig(lambda_reg=0.5)

        def builder(mods):
            dt = _dt(mods)
            terms = losses.refiner_terms(mods, y.to(dt), z.to(dt), cfg)
            return (terms["realism"] + cfg.lambda_reg * terms["regularization"]).mean()

        errors = finite_difference_gradcheck(
            builder,
            {
                "refiner_encoder": b.refiner_encoder,
                "refiner_decoder": b.refiner_decoder,
                "image_disc": b.image_disc,
                "feature_net": b.feature_net,
            },
            check=["refiner_encoder", "refiner_decoder"],
            n_coords=20,
            rel_step=1e-4,
            seed=2,
            rel_floor=1e-6,
        )
        assert (errors < 1e-6).mean() >= 0.95, f"errors: {np.sort(errors)[-5:]}"

    def test_classifier_gradients(self):
        b = init_params(small_spec(), seed=23)
        y, _, _ = self._data(33)

        def builder(mods):
            dt = _dt(mods)
            ps = losses.classifier_terms(
                mods["clf"], mods["fnet"], y.to(dt), torch.tensor([0, 1]), torch.tensor([2, 3])
            )
            return ps.mean()

        errors = finite_difference_gradcheck(
            builder, {"clf": b.classifier, "fnet": b.feature_net}, n_coords=30, seed=3
        )
        self._assert_pass_rate(errors)

    def test_feature_adversarial_gradients(self):
        b = init_params(small_spec(), seed=24)
        y, _, _ = self._data(34)

        def builder(mods):
            dt = _dt(mods)
            return losses.feature_adversarial_terms(
                mods["fnet"], mods["fdisc"], y.to(dt), LossConfig()
            ).mean()

        errors = finite_difference_gradcheck(
            builder,
            {"fnet": b.feature_net, "fdisc": b.feature_disc},
            check=["fnet"],
            n_coords=30,
            seed=4,
        )
        self._assert_pass_rate(errors)

    def test_feature_disc_gradients(self):
        b = init_params(small_spec(), seed=25)
        y, g, _ = self._data(35)

        def builder(mods):
            dt = _dt(mods)
            ps_r, ps_g = losses.disc_feature_terms(mods["fdisc"], mods["fnet"], y.to(dt), g.to(dt))
            return (ps_r + ps_g).mean()

        errors = finite_difference_gradcheck(
            builder,
            {"fnet": b.feature_net, "fdisc": b.feature_disc},
            check=["fdisc"],
            n_coords=30,
            seed=5,
        )
        self._assert_pass_rate(errors)
