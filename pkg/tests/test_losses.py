import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dipnet import autodiff as ad
from dipnet.autodiff import ShapeError, Tensor
from dipnet.losses import (
    DEFAULT_LAMBDA1,
    DEFAULT_LAMBDA2,
    adversarial_objectives,
    combined_feat_loss,
    combined_pix_loss,
    discriminator_loss,
    generator_loss,
    h_divergence_estimate,
    l1_loss,
    multiclass_ce_loss,
    patch_bce_loss,
    per_domain_error_rates,
)
from dipnet.model import ModelConfig, build_feature_discriminator, build_transform_net, forward_denoise
from dipnet.verify import end2end_cases

from oracles import l1_loop


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


class TestL1:
    def test_identical_is_zero(self):
        x = t64(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
        assert l1_loss(x, x).item() == 0.0

    def test_constant_difference(self):
        a = np.zeros((2, 3, 4, 4))
        assert l1_loss(t64(a + 0.5), t64(a)).item() == 0.5

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_scalar_loop(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(2, 3, 7, 5)), rng.normal(size=(2, 3, 7, 5))
        assert abs(l1_loss(t64(a), t64(b)).item() - l1_loop(a, b)) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            l1_loss(t64(np.zeros((1, 3, 4, 4))), t64(np.zeros((1, 3, 4, 5))))


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert abs(multiclass_ce_loss(t64(np.zeros((4, 5))), [0, 1, 2, 3]).item() - math.log(5)) < 1e-6
        assert math.log(5) == pytest.approx(1.60944, abs=1e-5)

    def test_saturated_correct_class(self):
        logits = np.zeros((3, 5))
        logits[np.arange(3), [1, 4, 0]] = 50
        assert multiclass_ce_loss(t64(logits), [1, 4, 0]).item() < 1e-9

    def test_hand_example(self):
        value = multiclass_ce_loss(t64([[2.0, 1.0, 0.0]]), [0]).item()
        ref = -math.log(math.e ** 2 / (math.e ** 2 + math.e + 1))
        assert value == pytest.approx(ref, abs=1e-12)
        assert value == pytest.approx(0.40761, abs=1e-5)

    def test_large_logits_stay_finite(self):
        assert math.isfinite(multiclass_ce_loss(t64([[1000.0, -1000.0]]), [1]).item())

    @pytest.mark.parametrize("labels", [[5, 0], [-1, 0]])
    def test_out_of_range_label(self, labels):
        with pytest.raises(ValueError):
            multiclass_ce_loss(t64(np.zeros((2, 5))), labels)

    @settings(max_examples=60, deadline=None)
    @given(
        logits=arrays(np.float64, (3, 4), elements=st.floats(-30, 30)),
        shift=st.floats(-100, 100),
        labels=st.lists(st.integers(0, 3), min_size=3, max_size=3),
    )
    def test_shift_invariance(self, logits, shift, labels):
        a = multiclass_ce_loss(t64(logits), labels).item()
        b = multiclass_ce_loss(t64(logits + shift), labels).item()
        assert abs(a - b) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(logits=arrays(np.float64, (2, 3), elements=st.floats(-20, 20)))
    def test_non_negative(self, logits):
        assert multiclass_ce_loss(t64(logits), [0, 2]).item() >= 0


class TestPatchBCE:
    @pytest.mark.parametrize("label", [0, 1])
    def test_zero_logits(self, label):
        assert abs(patch_bce_loss(t64(np.zeros((2, 1, 3, 3))), label).item() - math.log(2)) < 1e-6

    def test_saturated_label_one(self):
        assert patch_bce_loss(t64(np.full((2, 1, 4, 4), 20.0)), 1).item() < 1e-8

    def test_mixed_map(self):
        logits = np.array([1.0, -1.0, 1.0, -1.0]).reshape(1, 1, 2, 2)
        ref = 0.5 * (math.log1p(math.exp(-1)) + math.log1p(math.exp(1)))
        value = patch_bce_loss(t64(logits), 1).item()
        assert value == pytest.approx(ref, abs=1e-12)
        assert value == pytest.approx(0.81326, abs=1e-5)

    def test_matches_probability_form(self):
        x = np.random.default_rng(0).normal(size=(2, 1, 3, 3))
        p = 1 / (1 + np.exp(-x))
        for label in (0, 1):
            ref = -np.mean(label * np.log(p) + (1 - label) * np.log(1 - p))
            assert patch_bce_loss(t64(x), label).item() == pytest.approx(ref, rel=1e-12)

    def test_extreme_logits_stay_finite(self):
        assert math.isfinite(patch_bce_loss(t64(np.full((1, 1, 1, 1), -800.0)), 1).item())

    def test_needs_single_channel(self):
        with pytest.raises(ShapeError):
            patch_bce_loss(t64(np.zeros((1, 2, 3, 3))), 1)


class TestCombined:
    def test_feat_zero_weight(self):
        l1, prior = t64([0.2]), t64([1.6])
        assert combined_feat_loss(l1, prior, 0.0).item() == l1.item()

    def test_feat_arithmetic(self):
        assert combined_feat_loss(t64([0.2]), t64([1.6]), 0.001).item() == pytest.approx(0.2016, abs=1e-12)

    def test_pix_zero_weight(self):
        assert combined_pix_loss(t64([0.1]), t64([0.7]), 0.0).item() == 0.1

    def test_pix_arithmetic(self):
        assert combined_pix_loss(t64([0.1]), t64([0.7]), 0.001).item() == pytest.approx(0.1007, abs=1e-12)

    def test_default_weights(self):
        assert DEFAULT_LAMBDA1 == 0.001
        assert DEFAULT_LAMBDA2 == 0.001

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            combined_feat_loss(t64([0.1]), t64([0.1]), -1.0)


class TestAdversarial:
    def test_fooled_discriminator(self):
        zeros = t64(np.zeros((2, 1, 4, 4)))
        d, g = adversarial_objectives(zeros, zeros)
        assert d.item() == pytest.approx(2 * math.log(2), abs=1e-12)
        assert g.item() == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_discriminator(self):
        den, clear = t64(np.full((2, 1, 4, 4), 20.0)), t64(np.full((2, 1, 4, 4), -20.0))
        d, g = adversarial_objectives(den, clear)
        assert d.item() < 1e-7
        assert g.item() == pytest.approx(20 + math.log1p(math.exp(-20)), abs=1e-9)

    def test_gradient_isolation(self):
        """Discriminator loss on detached output touches only the
        discriminator; the generator loss under a frozen discriminator touches
        only the generator."""
        from dipnet.model import build_extractor, build_pixel_discriminator

        cfg = ModelConfig.desk()
        net = build_transform_net(cfg, 0)
        pd = build_pixel_discriminator(cfg, build_extractor("seeded", cfg.extractor_channels, 3), 1)
        rng = np.random.default_rng(0)
        noisy, clean = Tensor(rng.uniform(size=(2, 3, 16, 16))), Tensor(rng.uniform(size=(2, 3, 16, 16)))
        out = forward_denoise(net, noisy, "train")
        gen_ids = {id(p) for p in net.parameters()}
        disc_ids = {id(p) for p in pd.parameters()}

        grads = discriminator_loss(pd(out.denoised.detach()), pd(clean)).backward()
        assert grads and all(id(t) in disc_ids for t in grads)

        with pd.frozen():
            grads = generator_loss(pd(out.denoised)).backward()
        assert grads and all(id(t) in gen_ids for t in grads)


class TestHDivergence:
    def test_perfect_classifier(self):
        assert h_divergence_estimate([0.0, 0.0]).value == 2.0

    def test_chance_classifier(self):
        assert h_divergence_estimate([0.5, 0.5]).value == 0.0

    def test_clamped_with_raw(self):
        est = h_divergence_estimate([0.8, 0.8, 0.8])
        assert est.value == -2.0
        assert est.raw == pytest.approx(-2.8)

    def test_empty(self):
        with pytest.raises(ValueError):
            h_divergence_estimate([])

    def test_error_rates_need_every_domain(self):
        with pytest.raises(ValueError, match="domain 1"):
            per_domain_error_rates([0, 0], [0, 0], 2)

    def test_error_rates(self):
        assert per_domain_error_rates([0, 1, 1, 1], [0, 0, 1, 1], 2) == [0.5, 0.0]

    @given(
        losses=st.lists(st.floats(0, 1), min_size=2, max_size=5),
        i=st.integers(0, 4),
        bump=st.floats(1e-3, 0.5),
    )
    def test_monotone_decreasing(self, losses, i, bump):
        i %= len(losses)
        raised = list(losses)
        raised[i] += bump
        assert h_divergence_estimate(raised).raw < h_divergence_estimate(losses).raw
        assert h_divergence_estimate(raised).value <= h_divergence_estimate(losses).value


class TestReversalDirections:
    def test_prior_term_directional_derivatives(self):
        """A descent step on the prior part of L_feat lowers the classifier's
        loss through its own parameters and raises it through the network's."""
        cfg = ModelConfig.desk()
        with ad.default_dtype(np.float64):
            net = build_transform_net(cfg, 0)
            fd = build_feature_discriminator(cfg, 1)
        rng = np.random.default_rng(0)
        noisy = Tensor(rng.uniform(size=(4, 3, 12, 12)))
        labels = np.array([0, 1, 2, 3])
        params = {"disc": fd.parameters(), "net": net.parameters()}

        def grads(reverse):
            for p in params["disc"] + params["net"]:
                p.zero_grad()
            with net.stats_frozen():
                out = forward_denoise(net, noisy, "train")
                loss = multiclass_ce_loss(fd(out.fused_features, reverse=reverse), labels)
                if reverse:
                    loss = ad.scale(loss, DEFAULT_LAMBDA1)
                loss.backward()
            return {k: np.concatenate([p.grad.ravel() for p in v]) for k, v in params.items()}

        step_grads = grads(reverse=True)
        true_grads = grads(reverse=False)
        # directional derivative of the classifier loss along the descent step
        assert np.dot(-step_grads["disc"], true_grads["disc"]) < 0
        assert np.dot(-step_grads["net"], true_grads["net"]) > 0


@pytest.mark.parametrize("seed", range(5))
def test_end2end_gradients(seed):
    for case in end2end_cases(seed):
        res = case.run(seed)
        assert res.passed(1e-4), (case.name, res)
