import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from noisemark.core import ConfigError, HyperParams, NumericError
from noisemark.data import (SamplerSchedule, SyntheticSpec, generate_synthetic,
                            progressive_sampling_weights, sample_batch)
from noisemark.losses import ce_loss, landmark_mse
from noisemark.models import (DTYPE, DualBackboneConfig, DualViewModel,
                              as_model_input, generator_from_seed)
from noisemark.noise import NoiseSpec
from noisemark.trainer import (AblationFlags, Trainer, TrainRunConfig, fit, lr_at)


def small_data(seed=0, per_class=12, noise_std=0.5):
    spec = SyntheticSpec(num_classes=3, samples_per_class=per_class, input_dim=8,
                         landmark_count=2, view_noise_std=noise_std, seed=seed)
    return generate_synthetic(spec)


def small_config(tmp_path, flags, seed=0, epochs=2, **overrides):
    kwargs = {"k_neighbors": 5, "batch_size": 16, **overrides}
    hp = HyperParams(epochs=epochs, seed=seed, **kwargs)
    return TrainRunConfig(hp=hp, flags=flags, out_dir=tmp_path,
                          hidden_dims=(16,), feature_dim_u=8, feature_dim_v=8,
                          proj_dim=4, bank_capacity=64)


class TestLrSchedule:
    def test_endpoints_and_midpoint(self):
        assert lr_at(0, 100, 1e-3) == 1e-3
        assert lr_at(100, 100, 1e-3) == 0.0
        assert lr_at(50, 100, 1e-3) == pytest.approx(5e-4)


class TestAblationFlags:
    def test_implications(self):
        with pytest.raises(ConfigError, match="use_lm_in_lde"):
            AblationFlags(use_lm_in_lde=True)
        with pytest.raises(ConfigError, match="use_pseudo_labels"):
            AblationFlags(use_pseudo_labels=True)

    def test_presets(self):
        assert AblationFlags.baseline() == AblationFlags()
        full = AblationFlags.full()
        assert all((full.use_ld, full.use_lm_in_lde, full.use_el, full.use_pseudo_labels))

    def test_token_parsing(self):
        assert AblationFlags.from_tokens("baseline") == AblationFlags.baseline()
        assert AblationFlags.from_tokens("full") == AblationFlags.full()
        got = AblationFlags.from_tokens("ld,lm")
        assert got == AblationFlags(use_ld=True, use_lm_in_lde=True)
        assert AblationFlags.from_tokens("el, pl").use_pseudo_labels
        with pytest.raises(ConfigError, match="unknown ablation token"):
            AblationFlags.from_tokens("ld,bogus")

    def test_token_round_trip(self):
        for text in ("baseline", "ld", "ld,lm", "el", "ld,lm,el,pl"):
            flags = AblationFlags.from_tokens(text)
            assert AblationFlags.from_tokens(flags.tokens()) == flags


class TestRunConfig:
    def test_validation(self, tmp_path):
        hp = HyperParams(batch_size=16)
        with pytest.raises(ConfigError, match="checkpoint_every"):
            TrainRunConfig(hp=hp, flags=AblationFlags(), out_dir=tmp_path,
                           checkpoint_every=-1)
        with pytest.raises(ConfigError, match="bank_capacity"):
            TrainRunConfig(hp=hp, flags=AblationFlags(), out_dir=tmp_path,
                           bank_capacity=0)

    def test_snapshot_mentions_ablation(self, tmp_path):
        cfg = small_config(tmp_path, AblationFlags.full())
        text = cfg.snapshot_text()
        assert "ablation = ld,lm,el,pl" in text
        assert "k_neighbors = 5" in text


class TestSmoke:
    def test_single_epoch_run_layout(self, tmp_path):
        train, test = small_data()
        cfg = small_config(tmp_path / "run", AblationFlags.full(), epochs=1)
        result = fit(cfg, train, test)

        assert (result.run_dir / "config.snapshot").exists()
        log_lines = (result.run_dir / "log.csv").read_text().strip().split("\n")
        assert log_lines[0] == "step,ce,kl,lm,el,total"
        assert len(log_lines) >= 2
        assert (result.run_dir / "ckpt-1").exists()
        assert (result.run_dir / "report" / "summary.txt").exists()
        assert 0.0 <= result.accuracy <= 1.0

        state = torch.load(result.run_dir / "ckpt-1", weights_only=False)
        assert state["epoch"] == 1
        assert "bank_u" in state and "scorer_u" in state

    def test_baseline_logs_zero_for_disabled_terms(self, tmp_path):
        train, test = small_data()
        cfg = small_config(tmp_path / "run", AblationFlags.baseline(), epochs=1)
        fit(cfg, train, test)
        rows = (tmp_path / "run" / "log.csv").read_text().strip().split("\n")[1:]
        for row in rows:
            _, ce, kl, lm, el, total = row.split(",")
            assert float(kl) == 0.0 and float(el) == 0.0
            assert float(total) == float(ce) + float(lm)

    def test_checkpoint_every_zero_keeps_final_only(self, tmp_path):
        train, test = small_data()
        cfg = small_config(tmp_path / "run", AblationFlags.baseline(), epochs=2)
        cfg = TrainRunConfig(**{**cfg.__dict__, "checkpoint_every": 0})
        fit(cfg, train, test)
        assert not (tmp_path / "run" / "ckpt-1").exists()
        assert (tmp_path / "run" / "ckpt-2").exists()


class TestDeterminism:
    def test_identical_seeds_identical_runs(self, tmp_path):
        train, test = small_data()
        cfg_a = small_config(tmp_path / "a", AblationFlags.full(), seed=3)
        cfg_b = small_config(tmp_path / "b", AblationFlags.full(), seed=3)
        res_a = fit(cfg_a, train, test)
        res_b = fit(cfg_b, train, test)

        assert res_a.accuracy == res_b.accuracy
        assert (tmp_path / "a" / "log.csv").read_text() == \
               (tmp_path / "b" / "log.csv").read_text()
        for key, val in res_a.model.state_dict().items():
            assert torch.equal(val, res_b.model.state_dict()[key]), key
        a_dist = res_a.store.as_dict()
        b_dist = res_b.store.as_dict()
        assert all(np.array_equal(a_dist[i], b_dist[i]) for i in a_dist)

    def test_different_seeds_differ(self, tmp_path):
        train, test = small_data()
        res_a = fit(small_config(tmp_path / "a", AblationFlags.baseline(), seed=0),
                    train, test)
        res_b = fit(small_config(tmp_path / "b", AblationFlags.baseline(), seed=1),
                    train, test)
        same = all(torch.equal(v, res_b.model.state_dict()[k])
                   for k, v in res_a.model.state_dict().items())
        assert not same


class TestBaselineBitCompatibility:
    def test_matches_hand_written_ce_mse_loop(self, tmp_path):
        train, test = small_data(seed=5)
        cfg = small_config(tmp_path / "run", AblationFlags.baseline(), seed=9,
                           epochs=2)
        result = fit(cfg, train, test)

        # independent re-implementation of plain CE+MSE training
        hp = cfg.hp
        children = np.random.SeedSequence(hp.seed).spawn(2)
        rng = np.random.default_rng(children[0])
        gen = generator_from_seed(int(children[1].generate_state(1, dtype=np.uint64)[0]))
        model_cfg = DualBackboneConfig(num_classes=3, landmark_dim=4, input_dim=8,
                                       hidden_dims=(16,), feature_dim_u=8,
                                       feature_dim_v=8, proj_dim=4)
        model = DualViewModel(model_cfg, gen)
        opt = torch.optim.Adam(model.online_parameters(), lr=hp.lr)
        schedule = SamplerSchedule.from_dataset(train, hp.epochs)
        steps_per_epoch = math.ceil(len(train) / hp.batch_size)
        total_steps = hp.epochs * steps_per_epoch
        step = 0
        for epoch in range(hp.epochs):
            weights = progressive_sampling_weights(epoch, schedule)
            for _ in range(steps_per_epoch):
                idx = sample_batch(train, weights, hp.batch_size, rng)
                x = as_model_input(train.inputs[idx], model_cfg)
                u, logits = model.expression_logits(x)
                probs = F.softmax(logits, dim=1)
                _, lm_pred = model.forward_landmark(x)
                loss = ce_loss(probs, torch.as_tensor(train.labels[idx])) + \
                    landmark_mse(lm_pred, torch.as_tensor(train.landmarks[idx], dtype=DTYPE))
                for group in opt.param_groups:
                    group["lr"] = lr_at(step, total_steps, hp.lr)
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1

        trained = result.model.state_dict()
        for key, val in model.state_dict().items():
            assert torch.equal(val, trained[key]), key

    def test_loss_weights_are_inert_when_flags_off(self, tmp_path):
        train, test = small_data()
        res_a = fit(small_config(tmp_path / "a", AblationFlags.baseline(),
                                 epochs=1, alpha=7.0, beta=3.0), train, test)
        res_b = fit(small_config(tmp_path / "b", AblationFlags.baseline(),
                                 epochs=1, alpha=1.0, beta=0.1), train, test)
        for key, val in res_a.model.state_dict().items():
            assert torch.equal(val, res_b.model.state_dict()[key]), key


class TestResume:
    def test_resume_equals_uninterrupted(self, tmp_path):
        train, test = small_data(seed=2)
        flags = AblationFlags.full()

        ref = fit(small_config(tmp_path / "ref", flags, seed=4, epochs=4),
                  train, test)

        part_cfg = small_config(tmp_path / "part", flags, seed=4, epochs=4)
        part = Trainer(part_cfg, train)
        for epoch in range(2):
            part.train_epoch(epoch)
        ckpt = part.save_checkpoint(tmp_path / "part" / "ckpt-2")

        resumed = fit(small_config(tmp_path / "resume", flags, seed=4, epochs=4),
                      train, test, resume_from=ckpt)

        assert resumed.accuracy == ref.accuracy
        ref_state = ref.model.state_dict()
        for key, val in resumed.model.state_dict().items():
            assert torch.equal(val, ref_state[key]), key
        ref_dist = ref.store.as_dict()
        res_dist = resumed.store.as_dict()
        assert all(np.array_equal(ref_dist[i], res_dist[i]) for i in ref_dist)

    def test_config_mismatch_rejected(self, tmp_path):
        train, test = small_data()
        flags = AblationFlags.baseline()
        cfg = small_config(tmp_path / "a", flags, seed=1, epochs=2)
        trainer = Trainer(cfg, train)
        trainer.train_epoch(0)
        ckpt = trainer.save_checkpoint(tmp_path / "a" / "ckpt-1")

        other = small_config(tmp_path / "b", flags, seed=2, epochs=2)
        with pytest.raises(ConfigError, match="does not match"):
            fit(other, train, test, resume_from=ckpt)


class TestTargetQuality:
    def test_store_tracks_clean_labels_without_noise(self, tmp_path):
        spec = SyntheticSpec(num_classes=3, samples_per_class=30, input_dim=8,
                             landmark_count=2, view_noise_std=0.5, seed=13)
        train, test = generate_synthetic(spec)
        cfg = small_config(tmp_path / "run", AblationFlags.from_tokens("ld,lm"),
                           seed=0, epochs=10, batch_size=24)
        result = fit(cfg, train, test)
        assert result.store.epoch == 10
        agreement = float((result.store.argmax_labels() == train.labels).mean())
        assert agreement >= 0.95


class TestNumericFailure:
    def test_dump_written_and_error_raised(self, tmp_path):
        train, _ = small_data()
        cfg = small_config(tmp_path / "run", AblationFlags.baseline(), epochs=1)
        trainer = Trainer(cfg, train)
        with torch.no_grad():
            trainer.model.classifier.weight.fill_(math.nan)
        weights = progressive_sampling_weights(0, trainer.schedule)
        idx = sample_batch(train, weights, cfg.hp.batch_size, trainer.sampler_rng)
        with pytest.raises(NumericError, match="diagnostics dumped"):
            trainer._train_step(idx, {})
        dump = np.load(tmp_path / "run" / "numeric-failure.npz")
        assert "batch_ids" in dump
        assert dump["batch_ids"].shape == (cfg.hp.batch_size,)
