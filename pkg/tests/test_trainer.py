import numpy as np
import pytest

from dipnet.autodiff import Tensor
from dipnet.checkpoint import FingerprintMismatchError, load_checkpoint
from dipnet.data import DatasetSpec
from dipnet.model import ModelConfig
from dipnet.train import DivergenceError, TrainConfig, Trainer, load_generator
from dipnet.train.evaluate import denoise_image
from dipnet.train.trainer import METRIC_COLUMNS

TINY = ModelConfig(base_channels=4, low_level_blocks=1, local_blocks=1, global_fc_width=4,
                   num_noise_classes=2, pixel_disc_channels=(4, 4, 4), feat_disc_channels=4,
                   feat_disc_fc_width=4, extractor_channels=(3, 3, 3))
SPEC = DatasetSpec(synth_count=4, synth_size=24, patch_size=16, eval_count=2)


def config(mode, **kw):
    base = dict(mode=mode, batch_size=4, max_steps=6, eval_every=3, sigma_set=(15, 75), diag_per_class=4,
                probe_steps=3, record_wall_clock=False)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(module):
    return {n: p.data.copy() for n, p in module.named_parameters()}


def changed(before, module):
    return {n for n, p in module.named_parameters() if not np.array_equal(before[n], p.data)}


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(mode="X"), dict(lambda1=-1.0), dict(lr0=0.0), dict(noise="wide"),
                                     dict(mode="BF", noise="range"), dict(max_steps=0),
                                     dict(hdiv_probe="discriminator"), dict(mode="B", sigma_set=())])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_defaults(self):
        tc = TrainConfig()
        assert (tc.lr0, tc.lambda1, tc.lambda2) == (1e-3, 1e-3, 1e-3)
        assert (tc.beta1, tc.beta2, tc.adam_eps) == (0.9, 0.999, 1e-8)
        assert tc.batch_size == 64

    def test_class_count_must_match(self):
        with pytest.raises(ValueError, match="num_noise_classes"):
            Trainer(config("BF", sigma_set=(15, 25, 75)), TINY, SPEC)

    def test_eval_sigmas(self):
        assert config("S", sigma=15).resolved_eval_sigmas() == (15.0,)
        assert config("B").resolved_eval_sigmas() == (15.0, 75.0)


class TestSteps:
    def test_s_step_changes_generator_only(self):
        tr = Trainer(config("S"), TINY, SPEC)
        assert list(tr.modules()) == ["gen"]
        before = snapshot(tr.net)
        tr.train_step()
        assert changed(before, tr.net)

    def test_bf_step_changes_both(self):
        tr = Trainer(config("BF"), TINY, SPEC)
        gen, disc = snapshot(tr.net), snapshot(tr.fdisc)
        tr.train_step()
        assert changed(gen, tr.net)
        assert changed(disc, tr.fdisc) == set(disc)

    def test_bf_without_reversal_still_trains_classifier(self):
        tr = Trainer(config("BF", lambda_grl=0.0), TINY, SPEC)
        disc = snapshot(tr.fdisc)
        tr.train_step()
        assert changed(disc, tr.fdisc) == set(disc)

    def test_bp_alternation_is_isolated(self):
        tr = Trainer(config("BP"), TINY, SPEC)
        state = {"gen": snapshot(tr.net), "disc": snapshot(tr.pdisc)}
        log = []

        def observer(phase):
            if phase == "disc":
                log.append(("disc", changed(state["gen"], tr.net), changed(state["disc"], tr.pdisc)))
            else:
                log.append(("gen", changed(state["gen"], tr.net), changed(state["disc"], tr.pdisc)))
            state["gen"], state["disc"] = snapshot(tr.net), snapshot(tr.pdisc)

        for _ in range(3):
            tr.train_step(observer)
        for phase, gen_changed, disc_changed in log:
            if phase == "disc":
                assert not gen_changed and disc_changed
            else:
                assert gen_changed and not disc_changed

    def test_bp_extractor_untouched(self):
        tr = Trainer(config("BP"), TINY, SPEC)
        before = {n: p.data.copy() for n, p in tr.pdisc.extractor.named_parameters()}
        tr.train_step()
        assert all(np.array_equal(before[n], p.data) for n, p in tr.pdisc.extractor.named_parameters())

    def test_divergence_guard(self):
        tr = Trainer(config("S"), TINY, SPEC)
        good = tr.stream.batch

        def poisoned(step):
            b = good(step)
            b.noisy[0, 0, 0, 0] = np.inf
            return b

        tr.stream.batch = poisoned
        with pytest.raises(DivergenceError, match="step 1"):
            tr.train_step()

    def test_lr_follows_cosine(self):
        tr = Trainer(config("S", max_steps=4), TINY, SPEC)
        lrs = []
        for _ in range(4):
            tr.train_step()
            lrs.append(tr.last_lr)
        assert lrs[0] == 1e-3 and lrs[2] == pytest.approx(5e-4)


class TestRuns:
    @pytest.mark.parametrize("mode", ["S", "B", "BF", "BP"])
    def test_same_seed_same_metrics(self, mode, tmp_path):
        a = Trainer(config(mode), TINY, SPEC, tmp_path / "a")
        a.run()
        b = Trainer(config(mode), TINY, SPEC, tmp_path / "b")
        b.run()
        text = (tmp_path / "a" / "metrics.csv").read_bytes()
        assert text == (tmp_path / "b" / "metrics.csv").read_bytes()
        assert text.decode().splitlines()[0] == ",".join(METRIC_COLUMNS)
        assert (tmp_path / "a" / "checkpoint.ckpt").read_bytes() == (tmp_path / "b" / "checkpoint.ckpt").read_bytes()

    def test_different_seed_differs(self):
        a = Trainer(config("S"), TINY, SPEC)
        a.run(save=False)
        b = Trainer(config("S", seed=1), TINY, SPEC)
        b.run(save=False)
        assert a.metrics_csv() != b.metrics_csv()

    def test_record_cadence(self):
        tr = Trainer(config("B", max_steps=7), TINY, SPEC)
        tr.run(save=False)
        assert sorted({r["step"] for r in tr.records}) == [3, 6, 7]
        assert [d["step"] for d in tr.diagnostics] == [0, 3, 6, 7]

    def test_metric_ranges(self):
        tr = Trainer(config("BF"), TINY, SPEC)
        tr.run(save=False)
        for r in tr.records:
            assert r["psnr_db"] > 0 and -1 <= r["ssim"] <= 1
            assert -2 <= r["hdiv"] <= 2

    @pytest.mark.parametrize("mode", ["S", "BF", "BP"])
    def test_resume_matches_uninterrupted(self, mode, tmp_path):
        full = Trainer(config(mode, max_steps=7), TINY, SPEC, tmp_path / "full")
        full.run()
        part = Trainer(config(mode, max_steps=7), TINY, SPEC, tmp_path / "part")
        part.run(until=4)
        resumed = Trainer.from_checkpoint(tmp_path / "part" / "checkpoint.ckpt", tmp_path / "part")
        assert resumed.step == 4
        resumed.run()
        for name in ("metrics.csv", "checkpoint.ckpt"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()

    def test_wall_clock_column_is_the_only_difference(self):
        a = Trainer(config("S", record_wall_clock=True), TINY, SPEC)
        a.run(save=False)
        b = Trainer(config("S", record_wall_clock=True), TINY, SPEC)
        b.run(save=False)
        strip = lambda text: [line.rsplit(",", 1)[0] for line in text.splitlines()]
        assert strip(a.metrics_csv()) == strip(b.metrics_csv())
        assert all(r["wall_s"] > 0 for r in a.records)


class TestPersistence:
    def test_eval_denoising_survives_round_trip(self, tmp_path):
        tr = Trainer(config("S"), TINY, SPEC, tmp_path)
        tr.run()
        net, header = load_generator(tmp_path / "checkpoint.ckpt")
        img = tr.eval_images[0].values
        assert np.array_equal(denoise_image(tr.net, img), denoise_image(net, img))
        assert header["step"] == 6

    def test_fingerprint_checked(self, tmp_path):
        tr = Trainer(config("S", max_steps=1), TINY, SPEC, tmp_path)
        tr.run()
        other = Trainer(config("S", max_steps=1), TINY.with_(base_channels=8), SPEC)
        with pytest.raises(FingerprintMismatchError):
            load_checkpoint(tmp_path / "checkpoint.ckpt", expected_fingerprint=other.fingerprint())

    def test_architecture_mismatch_rejected(self, tmp_path):
        tr = Trainer(config("S", max_steps=1), TINY, SPEC, tmp_path)
        tr.run()
        ckpt = load_checkpoint(tmp_path / "checkpoint.ckpt")
        other = Trainer(config("S", max_steps=1), TINY.with_(base_channels=8), SPEC)
        with pytest.raises(ValueError):
            other.load_state(ckpt)
