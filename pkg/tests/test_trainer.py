import os

import numpy as np
import pytest

from dne import corpus, dsp, trainer


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    cfg = corpus.CorpusConfig(
        out_dir=str(tmp_path_factory.mktemp("traincorpus")),
        n_train=8,
        n_test=2,
        test_snrs=(0,),
        test_noises=("bursts",),
    )
    return corpus.generate_synthetic_corpus(cfg, seed=3)


@pytest.fixture(scope="module")
def utts(tiny_manifest):
    train_e, _ = corpus.split_entries(tiny_manifest)
    return trainer.prepare_entries(tiny_manifest, train_e[:2])


def fresh(backbone="unet", dne="dne", **kw):
    config = trainer.TrainConfig(backbone=backbone, dne=dne, seed=9, **kw)
    model = trainer.JointModel(config)
    return model, trainer.JointOptimizers(model, config)


class TestTrainConfig:
    def test_validation(self):
        trainer.TrainConfig().validate()
        with pytest.raises(ValueError):
            trainer.TrainConfig(backbone="cnn").validate()
        with pytest.raises(ValueError):
            trainer.TrainConfig(dne="maybe").validate()
        with pytest.raises(ValueError):
            trainer.TrainConfig(eta=0.0).validate()
        with pytest.raises(ValueError):
            trainer.TrainConfig(lam=-0.5).validate()
        with pytest.raises(ValueError):
            trainer.TrainConfig(lr_se=0.0).validate()
        with pytest.raises(ValueError):
            trainer.TrainConfig(val_fraction=1.0).validate()


class TestLrSchedule:
    def test_improving_history_keeps_rates(self):
        config = trainer.TrainConfig()
        assert trainer.lr_schedule(config, [3.0, 2.0, 1.0, 0.5]) == (1e-3, 1e-2)

    def test_three_epoch_plateau_decays_once(self):
        config = trainer.TrainConfig()
        lrs = trainer.lr_schedule(config, [1.0, 1.0, 1.0, 1.0])
        assert lrs == (pytest.approx(1e-4), pytest.approx(1e-3))

    def test_two_epoch_plateau_does_not(self):
        config = trainer.TrainConfig()
        assert trainer.lr_schedule(config, [1.0, 1.0, 1.0]) == (1e-3, 1e-2)

    def test_improvement_resets_the_counter(self):
        config = trainer.TrainConfig()
        history = [1.0, 1.1, 1.2, 0.9, 1.0, 1.1]  # never 3 bad in a row
        assert trainer.lr_schedule(config, history) == (1e-3, 1e-2)

    def test_repeated_decay_floors(self):
        config = trainer.TrainConfig()
        lrs = trainer.lr_schedule(config, [1.0] + [2.0] * 60)
        assert lrs == (1e-8, 1e-8)


class TestValSplit:
    def entries(self, n):
        return [corpus.ManifestEntry(f"train/u{i}.wav", "", "", "white", 0.0) for i in range(n)]

    def test_partition(self):
        entries = self.entries(20)
        fit, val = trainer.val_split(entries, 0.1, seed=4)
        assert len(val) == 2 and len(fit) == 18
        assert {e.noisy_path for e in fit} | {e.noisy_path for e in val} == {e.noisy_path for e in entries}

    def test_seed_stable(self):
        entries = self.entries(30)
        _, v1 = trainer.val_split(entries, 0.1, seed=4)
        _, v2 = trainer.val_split(entries, 0.1, seed=4)
        assert [e.noisy_path for e in v1] == [e.noisy_path for e in v2]

    def test_membership_survives_extra_entries(self):
        # hash-based assignment: an utterance's bucket ignores list order
        entries = self.entries(30)
        _, v1 = trainer.val_split(entries, 0.1, seed=4)
        _, v2 = trainer.val_split(list(reversed(entries)), 0.1, seed=4)
        assert {e.noisy_path for e in v1} == {e.noisy_path for e in v2}

    def test_zero_fraction(self):
        fit, val = trainer.val_split(self.entries(5), 0.0, seed=0)
        assert len(fit) == 5 and val == []


class TestJointStep:
    def test_lambda_zero_equals_ce_only_step(self, utts):
        batch = trainer.make_batch(utts, trainer.epoch_items(utts, "unet")[:2], "unet")

        model_a, opt_a = fresh(lam=0.0)
        trainer.joint_train_step(model_a, batch, opt_a, np.random.default_rng(0))

        model_b, opt_b = fresh(lam=0.0)
        _, _, l_ce = trainer.forward_losses(model_b, batch, np.random.default_rng(0))
        l_ce.backward()
        opt_b.vad.step()

        for (name, pa), (_, pb) in zip(model_a.vad_named_parameters(), model_b.vad_named_parameters()):
            assert np.array_equal(pa.data, pb.data), name

    def test_off_mode_has_no_extractor_but_vad_trains(self, utts):
        model, opt = fresh(dne="off")
        assert model.extractor is None
        before = [p.data.copy() for _, p in model.vad_named_parameters()]
        batch = trainer.make_batch(utts, trainer.epoch_items(utts, "unet")[:1], "unet")
        trainer.joint_train_step(model, batch, opt)
        after = [p.data for _, p in model.vad_named_parameters()]
        assert any(not np.array_equal(a, b) for a, b in zip(before, after))

    def test_non_finite_loss_aborts(self, utts):
        model, opt = fresh()
        batch = trainer.make_batch(utts, trainer.epoch_items(utts, "unet")[:1], "unet")
        batch.mag[0, 3, 5] = np.nan
        with pytest.raises(RuntimeError, match="non-finite"):
            trainer.joint_train_step(model, batch, opt)

    def test_losses_fall_when_overfitting(self, utts):
        model, opt = fresh(backbone="ddae")
        batch = trainer.make_batch(utts, [0], "ddae")
        first, _ = trainer.joint_train_step(model, batch, opt, np.random.default_rng(1))
        last = first
        for _ in range(30):
            last, _ = trainer.joint_train_step(model, batch, opt, np.random.default_rng(1))
        assert last < first

    def test_warm_start_leaves_enhancer_untouched(self, utts):
        model, opt = fresh()
        before = [p.data.copy() for _, p in model.se_named_parameters()]
        batch = trainer.make_batch(utts, trainer.epoch_items(utts, "unet")[:1], "unet")
        trainer.joint_train_step(model, batch, opt, warm_start=True)
        for (name, p), old in zip(model.se_named_parameters(), before):
            assert np.array_equal(p.data, old), name


class TestGradientRouting:
    def vad_mse_grads(self, model, batch, post_rng):
        _, l_mse, _ = trainer.forward_losses(model, batch, post_rng)
        l_mse.backward()
        out = {}
        for name, p in model.vad_named_parameters():
            out[name] = None if p.grad is None else p.grad.copy()
            p.grad = None
        return out

    def test_mse_reaches_vad_only_through_the_posterior(self, utts):
        batch = trainer.make_batch(utts, trainer.epoch_items(utts, "unet")[:1], "unet")
        model, _ = fresh(dne="dne")
        grads = self.vad_mse_grads(model, batch, np.random.default_rng(0))
        assert any(g is not None and np.abs(g).max() > 0 for g in grads.values())

        for mode in ("off", "sn", "cn"):
            model, _ = fresh(dne=mode)
            grads = self.vad_mse_grads(model, batch, np.random.default_rng(0))
            assert all(g is None or np.abs(g).max() == 0 for g in grads.values()), mode

    def test_frozen_posterior_blocks_the_path(self, utts):
        # eta = 1.0 swaps the live posterior for seeded constants, so the
        # enhancement loss must not touch the detector at all
        batch = trainer.make_batch(utts, trainer.epoch_items(utts, "unet")[:1], "unet")
        model, _ = fresh(dne="dne", eta=1.0)
        grads = self.vad_mse_grads(model, batch, np.random.default_rng(0))
        assert all(g is None or np.abs(g).max() == 0 for g in grads.values())


class TestTrainLoop:
    def config(self, out_dir, **kw):
        base = dict(backbone="unet", dne="dne", epochs=2, seed=5, batch_size=4, out_dir=str(out_dir))
        base.update(kw)
        return trainer.TrainConfig(**base)

    def test_determinism_bytes(self, tiny_manifest, tmp_path):
        r1 = trainer.train(tiny_manifest, self.config(tmp_path / "a"))
        r2 = trainer.train(tiny_manifest, self.config(tmp_path / "b"))
        with open(r1.log_path, "rb") as f1, open(r2.log_path, "rb") as f2:
            assert f1.read() == f2.read()
        with open(r1.best_path, "rb") as f1, open(r2.best_path, "rb") as f2:
            assert f1.read() == f2.read()

    def test_resume_reproduces_next_epoch(self, tiny_manifest, tmp_path):
        full = self.config(tmp_path / "full", epochs=2)
        trainer.train(tiny_manifest, full)
        head = self.config(tmp_path / "head", epochs=1)
        trainer.train(tiny_manifest, head)
        tail = self.config(tmp_path / "tail", epochs=2)
        trainer.train(tiny_manifest, tail, resume=str(tmp_path / "head" / "epoch_0000.ckpt"))
        with open(tmp_path / "full" / "epoch_0001.ckpt", "rb") as f1:
            with open(tmp_path / "tail" / "epoch_0001.ckpt", "rb") as f2:
                assert f1.read() == f2.read()

    def test_artifacts_and_log_shape(self, tiny_manifest, tmp_path):
        result = trainer.train(tiny_manifest, self.config(tmp_path / "r"))
        lines = open(result.log_path).read().splitlines()
        assert lines[0] == trainer.LOG_HEADER
        assert len(lines) == 3
        assert os.path.exists(tmp_path / "r" / "config.txt")
        assert os.path.exists(tmp_path / "r" / "epoch_0000.ckpt")
        assert os.path.exists(result.best_path)
        assert result.history[-1][1] < result.history[0][1]  # train mse falls

    def test_checkpoint_round_trip_inference(self, tiny_manifest, tmp_path):
        result = trainer.train(tiny_manifest, self.config(tmp_path / "rt", epochs=1))
        model = trainer.load_model(result.best_path)
        _, test_e = corpus.split_entries(tiny_manifest)
        noisy, _, _ = corpus.load_entry(tiny_manifest, test_e[0])
        enh = trainer.enhance_waveform(model, noisy)
        assert enh.shape == noisy.shape and np.isfinite(enh).all()
        again = trainer.enhance_waveform(model, noisy)
        np.testing.assert_array_equal(enh, again)


class TestEnhanceWaveform:
    def test_identity_mask_is_reconstruction(self, tiny_manifest):
        model = trainer.JointModel(trainer.TrainConfig(backbone="ddae", dne="off", seed=2))
        _, test_e = corpus.split_entries(tiny_manifest)
        noisy, _, _ = corpus.load_entry(tiny_manifest, test_e[0])
        out = trainer.enhance_waveform(model, noisy, identity_mask=True)
        np.testing.assert_allclose(out, noisy, rtol=0, atol=1e-6)

    @pytest.mark.parametrize("mode", ["off", "sn", "cn", "dne"])
    def test_modes_run_untrained(self, tiny_manifest, mode):
        model = trainer.JointModel(trainer.TrainConfig(backbone="ddae", dne=mode, seed=2))
        _, test_e = corpus.split_entries(tiny_manifest)
        noisy, _, _ = corpus.load_entry(tiny_manifest, test_e[0])
        out = trainer.enhance_waveform(model, noisy)
        assert out.shape == noisy.shape and np.isfinite(out).all()

    def test_randomized_posterior_mode_is_seeded(self, tiny_manifest):
        model = trainer.JointModel(trainer.TrainConfig(backbone="ddae", dne="dne", eta=1.0, seed=2))
        _, test_e = corpus.split_entries(tiny_manifest)
        noisy, _, _ = corpus.load_entry(tiny_manifest, test_e[0])
        np.testing.assert_array_equal(
            trainer.enhance_waveform(model, noisy), trainer.enhance_waveform(model, noisy)
        )

    def test_vad_posteriors(self, tiny_manifest):
        model = trainer.JointModel(trainer.TrainConfig(backbone="ddae", dne="off", seed=2))
        _, test_e = corpus.split_entries(tiny_manifest)
        noisy, _, _ = corpus.load_entry(tiny_manifest, test_e[0])
        post = trainer.vad_posteriors(model, noisy)
        assert post.shape == (dsp.frame_count(len(noisy)),)
        assert np.all((post > 0) & (post < 1))
