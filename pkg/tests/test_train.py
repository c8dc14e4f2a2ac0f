import logging

import numpy as np
import pytest
from scipy import stats

from gelp import tape
from gelp.config import FeatureConfig
from gelp.losses import LossWeights
from gelp.nets import set_mel_stats
from gelp.synth import VocoderModel
from gelp.tape import MissingGradient, Tensor, backward
from gelp.train import (
    AdamState,
    TrainConfig,
    adam_step,
    compute_mel_stats,
    critic_step,
    crop_for_discriminator,
    generator_step,
    init_state,
    load_checkpoint,
    make_segments,
    prepare_iteration,
    save_checkpoint,
    train,
    train_iteration,
)


def sine_corpus(n_utts=4, length=24000, sr=16000):
    out = []
    for i in range(n_utts):
        rng = np.random.default_rng(100 + i)
        n = np.arange(length)
        f0 = 110.0 + 17.0 * i
        x = 0.35 * np.sin(2 * np.pi * f0 * n / sr) + 0.15 * np.sin(
            2 * np.pi * 2 * f0 * n / sr
        )
        out.append(x + 0.01 * rng.standard_normal(length))
    return out


CORPUS = sine_corpus()


def toy_model(dtype=np.float32, seed=0):
    return VocoderModel.fresh(size="toy", seed=seed, dtype=dtype)


def ready_state(dtype=np.float32, **cfg_kw):
    cfg = TrainConfig(**{"crops_per_iter": 4, "seed": 5, **cfg_kw})
    model = toy_model(dtype)
    mean, std = compute_mel_stats(CORPUS, model.features)
    set_mel_stats(model.conditioner, mean, std)
    return init_state(model, cfg), cfg


def param_snapshot(mw):
    return {n: t.data.copy() for n, t in mw.parameters()}


def changed(before, mw):
    return any(not np.array_equal(before[n], t.data) for n, t in mw.parameters())


class TestSegments:
    def test_segment_length(self):
        rng = np.random.default_rng(0)
        seg = next(make_segments(CORPUS, 1.0, 16000, rng))
        assert seg.shape == (16000,)

    def test_same_seed_same_stream(self):
        a = make_segments(CORPUS, 0.5, 16000, np.random.default_rng(9))
        b = make_segments(CORPUS, 0.5, 16000, np.random.default_rng(9))
        for _ in range(5):
            assert np.array_equal(next(a), next(b))

    def test_short_utterances_padded(self):
        rng = np.random.default_rng(1)
        seg = next(make_segments([np.ones(100)], 1.0, 16000, rng))
        assert seg.shape == (16000,)

    def test_offsets_cover_uniformly(self):
        # chi-square over 10k draws against the uniform offset distribution
        utt = np.arange(64000, dtype=np.float64)
        rng = np.random.default_rng(2)
        gen = make_segments([utt], 1.0, 16000, rng)
        offsets = np.array([next(gen)[0] for _ in range(10000)])
        hist, _ = np.histogram(offsets, bins=16, range=(0, 64000 - 16000 + 1))
        chi2 = ((hist - hist.mean()) ** 2 / hist.mean()).sum()
        assert chi2 < stats.chi2.ppf(0.999, df=15)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            next(make_segments([], 1.0, 16000, np.random.default_rng(0)))


class TestCrops:
    def test_counts_and_lengths(self):
        rng = np.random.default_rng(3)
        real = rng.standard_normal(16000)
        fake = rng.standard_normal(16000)
        cond = rng.standard_normal((16000, 8))
        r, f, c, pos = crop_for_discriminator(real, fake, cond, 32, 1525, rng)
        assert r.shape == (32, 1525, 1) and f.shape == (32, 1525, 1)
        assert c.shape == (32, 1525, 8)
        k = 7
        assert np.array_equal(r[k, :, 0], real[pos[k] : pos[k] + 1525])
        assert np.array_equal(f[k, :, 0], fake[pos[k] : pos[k] + 1525])

    def test_full_segment_crop(self):
        rng = np.random.default_rng(4)
        real = rng.standard_normal(2000)
        r, f, c, pos = crop_for_discriminator(
            real, real, np.zeros((2000, 1)), 1, 2000, rng
        )
        assert pos[0] == 0
        assert np.array_equal(r[0, :, 0], real)

    def test_same_rng_same_positions(self):
        real = np.zeros(4000)
        cond = np.zeros((4000, 2))
        _, _, _, p1 = crop_for_discriminator(real, real, cond, 8, 100, np.random.default_rng(6))
        _, _, _, p2 = crop_for_discriminator(real, real, cond, 8, 100, np.random.default_rng(6))
        assert np.array_equal(p1, p2)

    def test_oversized_crop_rejected(self):
        with pytest.raises(ValueError):
            crop_for_discriminator(
                np.zeros(100), np.zeros(100), np.zeros((100, 1)), 1, 101,
                np.random.default_rng(0),
            )


class TestAdam:
    def make(self, value=1.0):
        p = Tensor(np.full(4, value))
        params = [("w", p)]
        return p, params, AdamState(params)

    def test_first_step_is_signed_lr(self):
        p, params, st = self.make()
        cfg = TrainConfig()
        g = np.array([0.3, -0.2, 0.5, -1.0])
        adam_step(params, {"w": g}, st, cfg)
        expect = 1.0 - cfg.learning_rate * g / (np.abs(g) + cfg.adam_eps)
        assert np.allclose(p.data, expect, atol=1e-9)

    def test_zero_gradient_no_change(self):
        p, params, st = self.make()
        adam_step(params, {"w": np.zeros(4)}, st, TrainConfig())
        assert np.array_equal(p.data, np.full(4, 1.0))

    def test_deterministic_trajectory(self):
        runs = []
        for _ in range(2):
            p, params, st = self.make()
            rng = np.random.default_rng(8)
            for _ in range(10):
                adam_step(params, {"w": rng.standard_normal(4)}, st, TrainConfig())
            runs.append(p.data.copy())
        assert np.array_equal(runs[0], runs[1])


class TestIteration:
    def test_phase_flip_at_pretrain_boundary(self):
        state, cfg = ready_state(pretrain_iters=2, total_iters=4)
        segs = make_segments(CORPUS, 1.0, 16000, state.rng)
        phases = []
        for _ in range(4):
            phases.append(state.phase(cfg))
            train_iteration(state, next(segs), cfg)
        assert phases == ["excitation", "excitation", "speech", "speech"]

    def test_step_parameter_separation(self):
        state, cfg = ready_state(pretrain_iters=0, total_iters=10)
        seg = next(make_segments(CORPUS, 1.0, 16000, state.rng))
        prep = prepare_iteration(state, seg, cfg)
        g0 = param_snapshot(state.model.generator)
        c0 = param_snapshot(state.model.conditioner)
        d0 = param_snapshot(state.model.discriminator)
        critic_step(state, prep, cfg)
        assert changed(d0, state.model.discriminator)
        assert not changed(g0, state.model.generator)
        assert not changed(c0, state.model.conditioner)
        d1 = param_snapshot(state.model.discriminator)
        generator_step(state, prep, cfg)
        assert changed(g0, state.model.generator)
        assert changed(c0, state.model.conditioner)
        assert not changed(d1, state.model.discriminator)

    def test_optimizer_state_separation(self):
        state, cfg = ready_state(pretrain_iters=0, total_iters=10)
        seg = next(make_segments(CORPUS, 1.0, 16000, state.rng))
        prep = prepare_iteration(state, seg, cfg)
        critic_step(state, prep, cfg)
        assert state.adam_d.t == 1
        assert state.adam_g.t == 0
        assert all(np.all(m == 0) for m in state.adam_g.m.values())
        generator_step(state, prep, cfg)
        assert state.adam_g.t == 1
        assert state.adam_d.t == 1

    def test_zero_critic_and_no_stft_weight_freezes_generator(self):
        # lambda1 = 0 with a zero-initialized critic: no learning signal
        state, cfg = ready_state(
            pretrain_iters=0, total_iters=10,
            loss_weights=LossWeights(0.0, 10.0, 1.0),
        )
        for _, t in state.model.discriminator.parameters():
            t.data[...] = 0.0
        g0 = param_snapshot(state.model.generator)
        seg = next(make_segments(CORPUS, 1.0, 16000, state.rng))
        prep = prepare_iteration(state, seg, cfg)
        generator_step(state, prep, cfg)
        assert not changed(g0, state.model.generator)

    def test_conditioner_gradient_flows_only_through_generator(self):
        # severing the generator's output path leaves the conditioner
        # without any gradient (the critic conditioning input is detached)
        from gelp.nets import conditioner_forward, generator_forward
        from gelp.losses import stft_loss

        state, cfg = ready_state(dtype=np.float64, pretrain_iters=0)
        model = state.model
        model.generator.set_trainable(True)
        model.conditioner.set_trainable(True)
        mel = Tensor(np.random.default_rng(0).standard_normal((1, 11, 80)))
        cond = conditioner_forward(mel, model.conditioner)
        cup = tape.narrow(
            tape.upsample_op(80, 11, 880)(cond), 1, 0, 800
        )
        z = Tensor(np.random.default_rng(1).standard_normal((1, 800, 1)))
        e_hat = generator_forward(z, cup, model.generator)
        severed = tape.reshape(e_hat, (1, 800)).detach()
        severed.requires_grad = True
        loss = stft_loss(Tensor(np.zeros((1, 800))), severed)
        grads = backward(loss)
        for _, t in model.conditioner.parameters():
            assert grads.get(t) is None

    def test_excitation_target_is_inverse_filter(self):
        from gelp.dsp import preemphasis
        from gelp.lpc import inverse_filter

        state, cfg = ready_state(pretrain_iters=5, total_iters=5)
        seg = next(make_segments(CORPUS, 1.0, 16000, state.rng))
        prep = prepare_iteration(state, seg, cfg)
        x = preemphasis(seg, state.model.features.preemphasis).astype(np.float32)
        expect = inverse_filter(
            x.astype(np.float64), prep.track, state.model.features.filter_stft
        )
        assert np.array_equal(prep.target, expect.astype(np.float32))

    def test_nonfinite_gradients_skip_update(self, caplog):
        state, cfg = ready_state(pretrain_iters=0, total_iters=10)
        state.model.discriminator["in.w"].data[0, 0] = np.nan
        seg = next(make_segments(CORPUS, 1.0, 16000, state.rng))
        prep = prepare_iteration(state, seg, cfg)
        before = param_snapshot(state.model.discriminator)
        with caplog.at_level(logging.WARNING):
            critic_step(state, prep, cfg)
        assert "skipped" in caplog.text
        del before["in.w"]
        clean = {n: t for n, t in state.model.discriminator.parameters() if n != "in.w"}
        assert all(np.array_equal(before[n], clean[n].data) for n in before)


class TestCheckpoint:
    def test_save_resume_save_identical(self, tmp_path):
        state, cfg = ready_state(dtype=np.float64, pretrain_iters=1, total_iters=3)
        segs = make_segments(CORPUS, 1.0, 16000, state.rng)
        train_iteration(state, next(segs), cfg)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(str(p1), state, cfg)
        resumed, cfg2 = load_checkpoint(str(p1), dtype=np.float64)
        save_checkpoint(str(p2), resumed, cfg2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_continues_bit_exact(self, tmp_path):
        state, cfg = ready_state(dtype=np.float64, pretrain_iters=1, total_iters=4)
        segs = make_segments(CORPUS, 1.0, 16000, state.rng)
        train_iteration(state, next(segs), cfg)
        path = tmp_path / "mid.ckpt"
        save_checkpoint(str(path), state, cfg)
        # uninterrupted continuation
        train_iteration(state, next(segs), cfg)
        # resumed continuation
        resumed, _ = load_checkpoint(str(path), dtype=np.float64)
        segs2 = make_segments(CORPUS, 1.0, 16000, resumed.rng)
        train_iteration(resumed, next(segs2), cfg)
        for (n1, t1), (n2, t2) in zip(
            state.model.generator.parameters(), resumed.model.generator.parameters()
        ):
            assert np.array_equal(t1.data, t2.data), n1
        for (n1, t1), (n2, t2) in zip(
            state.model.discriminator.parameters(), resumed.model.discriminator.parameters()
        ):
            assert np.array_equal(t1.data, t2.data), n1

    def test_missing_file_clean_error(self):
        with pytest.raises(FileNotFoundError):
            load_checkpoint("/nonexistent/path.ckpt")


class TestTrainLoop:
    def test_short_run_writes_log(self, tmp_path):
        cfg = TrainConfig(pretrain_iters=1, total_iters=3, crops_per_iter=4, seed=1)
        log_path = tmp_path / "log.csv"
        state, reports = train(CORPUS, cfg, model=toy_model(), log_path=str(log_path))
        assert state.iteration == 3
        lines = log_path.read_text().strip().splitlines()
        assert len(lines) == 4  # header + one row per iteration
        assert lines[0].startswith("iteration,")

    def test_losses_finite(self):
        cfg = TrainConfig(pretrain_iters=2, total_iters=4, crops_per_iter=4, seed=2)
        _, reports = train(CORPUS, cfg, model=toy_model())
        for r in reports:
            assert np.isfinite([r.l_stft, r.total_d, r.total_g]).all()
