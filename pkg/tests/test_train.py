import math
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dipnet.autodiff import ShapeError, Tensor
from dipnet.checkpoint import (
    Checkpoint,
    CorruptCheckpointError,
    FingerprintMismatchError,
    VersionMismatchError,
    fingerprint,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from dipnet.data import ImageBuffer, add_awgn, synth_corpus
from dipnet.model import ModelConfig, build_transform_net
from dipnet.train import (
    Adam,
    AdamState,
    adam_step,
    cosine_lr,
    denoise_image,
    evaluate,
    evenly_spaced,
    noise_sensitivity_sweep,
    psnr,
    sample_divergence,
    ssim,
)
from dipnet.train.metrics import gaussian_window

from oracles import ssim_loop


def scalar_adam(g_seq, lr, b1=0.9, b2=0.999, eps=1e-8, p=0.0):
    """Textbook Adam on one scalar."""
    m = v = 0.0
    out = []
    for t, g in enumerate(g_seq, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p)
    return out


def param(values):
    t = Tensor(np.asarray(values, dtype=np.float64))
    t.requires_grad = True
    return t


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = param(np.arange(6.0).reshape(2, 3))
        before = p.data.copy()
        adam_step({"w": p}, {"w": np.zeros((2, 3))}, AdamState(), lr=1e-3)
        assert np.array_equal(p.data, before)

    @pytest.mark.parametrize("g", [1.0, -0.5, 3e-3, 250.0])
    def test_first_step_magnitude(self, g):
        p = param([0.0])
        adam_step({"w": p}, {"w": np.array([g])}, AdamState(), lr=1e-3)
        expected = 1e-3 * abs(g) / (abs(g) + 1e-8)
        assert abs(p.data[0]) == pytest.approx(expected, rel=1e-12)
        assert abs(p.data[0]) == pytest.approx(scalar_adam([g], 1e-3)[0] * -np.sign(g), rel=1e-12)

    def test_two_steps_match_scalar_oracle(self):
        p = param([0.3, -1.2])
        state = AdamState()
        traj = []
        for _ in range(2):
            adam_step({"w": p}, {"w": np.ones(2)}, state, lr=0.1)
            traj.append(p.data.copy())
        for start, col in ((0.3, 0), (-1.2, 1)):
            ref = scalar_adam([1.0, 1.0], 0.1, p=start)
            assert np.max(np.abs(np.array([t[col] for t in traj]) - ref)) < 1e-9
        assert state.step == 2

    def test_long_trajectory_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=30)
        p = param([0.0])
        state = AdamState()
        for g in grads:
            adam_step({"w": p}, {"w": np.array([g])}, state, lr=0.01)
        assert p.data[0] == pytest.approx(scalar_adam(grads, 0.01)[-1], abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step({"w": param(np.zeros(3))}, {"w": np.zeros(4)}, AdamState(), lr=1e-3)

    def test_names_must_match(self):
        with pytest.raises(KeyError):
            adam_step({"w": param(np.zeros(3))}, {"u": np.zeros(3)}, AdamState(), lr=1e-3)

    def test_moment_buffers_match_parameters(self):
        params = OrderedDict(a=param(np.zeros((2, 3))), b=param(np.zeros(4)))
        opt = Adam(params)
        for name, p in params.items():
            p.grad = np.ones_like(p.data)
        opt.step(1e-3)
        for name, p in params.items():
            assert opt.state.m[name].shape == p.shape and opt.state.v[name].shape == p.shape

    def test_state_blob_round_trip(self):
        params = OrderedDict(a=param(np.zeros(3)))
        opt = Adam(params)
        params["a"].grad = np.array([1.0, 2.0, 3.0])
        opt.step(1e-2)
        other = Adam(OrderedDict(a=param(np.zeros(3))))
        other.load_state_blobs(opt.state_blobs("x."), "x.", opt.state.step)
        assert np.array_equal(other.state.m["a"], opt.state.m["a"])
        assert other.state.step == 1


class TestCosine:
    def test_start(self):
        assert cosine_lr(0, 100, 1e-3) == 1e-3

    def test_end(self):
        assert cosine_lr(100, 100, 1e-3) == 0.0

    def test_half(self):
        assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4, abs=1e-18)

    @pytest.mark.parametrize("step", [-1, 101])
    def test_out_of_range(self, step):
        with pytest.raises(ValueError):
            cosine_lr(step, 100, 1e-3)

    @given(total=st.integers(1, 5000))
    def test_monotone_non_increasing(self, total):
        lrs = [cosine_lr(s, total, 1e-3) for s in range(0, total + 1, max(1, total // 50))]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


class TestPSNR:
    def test_identical_is_infinite(self):
        a = np.random.default_rng(0).uniform(size=(3, 8, 8))
        assert psnr(a, a) == math.inf

    def test_uniform_difference(self):
        a = np.zeros((3, 8, 8))
        value = psnr(a, a + 25 / 255)
        assert value == pytest.approx(10 * math.log10(255 ** 2 / 25 ** 2), abs=1e-9)
        assert value == pytest.approx(20.172, abs=1e-3)

    def test_awgn_sample(self):
        clean = ImageBuffer(np.random.default_rng(1).uniform(size=(3, 512, 512)))
        noisy = add_awgn(clean, 25, np.random.default_rng(2))
        assert psnr(noisy, clean) == pytest.approx(20.172, abs=0.1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))

    @settings(max_examples=30, deadline=None)
    @given(a=arrays(np.float64, (2, 5, 5), elements=st.floats(0, 1)),
           b=arrays(np.float64, (2, 5, 5), elements=st.floats(0, 1)))
    def test_symmetric(self, a, b):
        assert psnr(a, b) == psnr(b, a)


class TestSSIM:
    def test_identical_is_exactly_one(self):
        a = np.random.default_rng(0).uniform(size=(3, 32, 24))
        assert ssim(a, a) == 1.0

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_scalar_reference(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(size=(3, 17, 15))
        b = np.clip(a + rng.normal(scale=0.2, size=a.shape), 0, 1)
        assert abs(ssim(a, b) - ssim_loop(a, b)) < 1e-6

    def test_structural_inversion(self):
        rng = np.random.default_rng(3)
        a = np.where(rng.uniform(size=(3, 32, 32)) < 0.5, rng.uniform(0, 0.3, (3, 32, 32)),
                     rng.uniform(0.7, 1, (3, 32, 32)))
        value = ssim(a, 1 - a)
        assert value < 0.2
        assert abs(value - ssim_loop(a, 1 - a)) < 1e-6

    def test_window_is_normalized(self):
        g = gaussian_window()
        assert g.size == 11 and abs(g.sum() - 1) < 1e-15

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((3, 10, 20)), np.zeros((3, 10, 20)))

    @settings(max_examples=25, deadline=None)
    @given(a=arrays(np.float64, (1, 12, 12), elements=st.floats(0, 1)),
           b=arrays(np.float64, (1, 12, 12), elements=st.floats(0, 1)))
    def test_symmetric_and_bounded(self, a, b):
        s = ssim(a, b)
        assert abs(s - ssim(b, a)) < 1e-9
        assert -1 - 1e-12 <= s <= 1 + 1e-12


@pytest.fixture(scope="module")
def tiny_net():
    cfg = ModelConfig(base_channels=4, low_level_blocks=1, local_blocks=1, global_fc_width=4)
    net = build_transform_net(cfg, 0)
    # one train-mode pass so eval mode has running statistics
    net(Tensor(np.random.default_rng(0).uniform(size=(2, 3, 16, 16)).astype(np.float32)))
    return net.eval()


@pytest.fixture(scope="module")
def test_images():
    return synth_corpus(9, 3, 24)


class TestSweep:
    def test_single_sigma_equals_evaluate(self, tiny_net, test_images):
        (row,) = noise_sensitivity_sweep(tiny_net, test_images, [25.0], seed=4)
        assert row == evaluate(tiny_net, test_images, 25.0, seed=4)

    def test_sorted_ascending(self, tiny_net, test_images):
        rows = noise_sensitivity_sweep(tiny_net, test_images, [50, 15, 35], seed=0)
        assert [r.sigma for r in rows] == [15.0, 35.0, 50.0]

    def test_empty_set(self, tiny_net):
        with pytest.raises(ValueError):
            noise_sensitivity_sweep(tiny_net, [], [25])

    def test_non_positive_sigma(self, tiny_net, test_images):
        with pytest.raises(ValueError):
            noise_sensitivity_sweep(tiny_net, test_images, [0, 25])

    def test_evaluation_is_deterministic(self, tiny_net, test_images):
        assert evaluate(tiny_net, test_images, 35, 1) == evaluate(tiny_net, test_images, 35, 1)

    def test_noisy_baseline(self, tiny_net, test_images):
        row = evaluate(tiny_net, test_images, 25, 0)
        assert row.noisy_psnr_db == pytest.approx(20.17, abs=0.5)

    def test_denoised_output_is_clamped(self, tiny_net, test_images):
        out = denoise_image(tiny_net, test_images[0].values + 0.5)
        assert out.min() >= 0 and out.max() <= 1

    def test_evenly_spaced(self):
        assert len(evenly_spaced(5, 100, 20)) == 20
        assert evenly_spaced(5, 100, 1) == [5.0]
        assert evenly_spaced(5, 100, 3) == [5.0, 52.5, 100.0]

    @pytest.mark.parametrize("lo,hi", [(0, 10), (10, 5), (10, 10)])
    def test_invalid_range(self, lo, hi):
        with pytest.raises(ValueError):
            evenly_spaced(lo, hi, 3)


def sample_ckpt():
    rng = np.random.default_rng(0)
    blobs = OrderedDict([("gen.w", rng.normal(size=(4, 3, 3, 3)).astype(np.float32)),
                         ("gen.b", rng.normal(size=(4,)).astype(np.float32)),
                         ("opt.step", np.array([3.0], dtype=np.float32))])
    return Checkpoint({"fingerprint": fingerprint({"a": 1}), "step": 7, "lr": 0.1 + 0.2}, blobs)


class TestCheckpoint:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        save_checkpoint(sample_ckpt(), tmp_path / "a.ckpt")
        save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_values_round_trip(self):
        ck = sample_ckpt()
        back = from_bytes(to_bytes(ck))
        assert back.header == ck.header
        for k in ck.blobs:
            assert np.array_equal(back.blobs[k], ck.blobs[k])

    @pytest.mark.parametrize("offset", [12, 40, -10])
    def test_flipped_byte_is_corruption(self, offset):
        buf = bytearray(to_bytes(sample_ckpt()))
        buf[offset] ^= 0x01
        with pytest.raises(CorruptCheckpointError):
            from_bytes(bytes(buf))

    def test_truncated(self):
        with pytest.raises(CorruptCheckpointError):
            from_bytes(to_bytes(sample_ckpt())[:-9])

    def test_bad_magic(self):
        with pytest.raises(CorruptCheckpointError):
            from_bytes(b"NOTACKPT" + bytes(20))

    def test_version_mismatch(self):
        with pytest.raises(VersionMismatchError):
            from_bytes(to_bytes(sample_ckpt(), version=99))

    def test_fingerprint_mismatch(self):
        with pytest.raises(FingerprintMismatchError):
            from_bytes(to_bytes(sample_ckpt()), expected_fingerprint=fingerprint({"a": 2}))
        assert from_bytes(to_bytes(sample_ckpt()), expected_fingerprint=fingerprint({"a": 1})).header["step"] == 7

    def test_fingerprint_is_order_independent(self):
        assert fingerprint({"a": 1, "b": [1, 2]}) == fingerprint({"b": [1, 2], "a": 1})


class TestSampleDivergence:
    def test_separated_clouds(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(1000, 2)), rng.normal(size=(1000, 2)) + [10.0, 0.0]
        assert sample_divergence([a, b], seed=0).hdiv.value >= 1.9

    @pytest.mark.parametrize("seed", range(3))
    def test_identical_distributions(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(1000, 2)), rng.normal(size=(1000, 2))
        assert abs(sample_divergence([a, b], seed=seed).hdiv.value) <= 0.15
