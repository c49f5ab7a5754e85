import json

import numpy as np
import pytest

from ddanet.checkpoint import load_checkpoint
from ddanet.data import synthetic_blobs
from ddanet.model import ModelConfig, build, named_parameters
from ddanet.tensor import Tensor
from ddanet.training import AdamState, TrainConfig, adam_step, evaluate, train

TINY = ModelConfig(channel_widths=(4, 8, 16, 32), se_ratio=4)
FAST = TrainConfig(epochs=2, batch_size=4, input_size=32, seed=0)


class TestAdamStep:
    def _single_param(self, value):
        t = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
        named = [("p", t)]
        return t, named, AdamState(named)

    def test_zero_gradient_is_identity(self):
        t, named, state = self._single_param(1.5)
        adam_step(named, {"p": np.zeros(1)}, state, TrainConfig())
        assert t.data[0] == 1.5
        assert np.all(state.m["p"] == 0) and np.all(state.v["p"] == 0)

    def test_first_step_magnitude_is_lr(self):
        cfg = TrainConfig(learning_rate=1e-4)
        t, named, state = self._single_param(1.0)
        adam_step(named, {"p": np.ones(1)}, state, cfg)
        # bias correction makes m_hat = v_hat = 1, so the update is lr/(1+eps)
        expected = 1.0 - cfg.learning_rate / (1.0 + cfg.adam_eps)
        assert abs(t.data[0] - expected) < 1e-15

    def test_matches_scalar_oracle_on_quadratic(self):
        cfg = TrainConfig(learning_rate=0.05)
        t, named, state = self._single_param(1.0)

        # straight-line scalar Adam, f(p) = p^2
        p = 1.0
        m = v = 0.0
        for step in range(1, 11):
            g = 2.0 * p
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1 ** step)
            v_hat = v / (1 - cfg.beta2 ** step)
            p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

            adam_step(named, {"p": 2.0 * t.data}, state, cfg)
        assert abs(t.data[0] - p) < 1e-12

    def test_shape_mismatch_rejected(self):
        t, named, state = self._single_param(1.0)
        with pytest.raises(ValueError):
            adam_step(named, {"p": np.zeros(3)}, state, TrainConfig())

    def test_missing_gradient_rejected(self):
        t, named, state = self._single_param(1.0)
        with pytest.raises(ValueError):
            adam_step(named, {}, state, TrainConfig())


class TestTrainLoop:
    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train(TINY, FAST, synthetic_blobs(1, 32, 0).__class__(items=[]))

    def test_log_schema_and_length(self, tmp_path):
        ds = synthetic_blobs(6, 32, seed=1)
        log_path = tmp_path / "log.ndjson"
        ckpt, log = train(TINY, FAST, ds, log_path=log_path)
        assert len(log) == FAST.epochs
        keys = ["epoch", "loss_total", "loss_bce_mask", "loss_dice", "loss_bce_gray", "val_dsc"]
        for rec in log:
            assert list(rec.keys()) == keys
        lines = log_path.read_text().strip().split("\n")
        assert len(lines) == FAST.epochs
        assert json.loads(lines[0])["epoch"] == 1

    def test_identical_seeds_identical_logs_and_checkpoints(self, tmp_path):
        ds = synthetic_blobs(6, 32, seed=1)
        out_a, out_b = tmp_path / "a.ddan", tmp_path / "b.ddan"
        _, log_a = train(TINY, FAST, ds, out_path=out_a, log_path=tmp_path / "a.log")
        _, log_b = train(TINY, FAST, ds, out_path=out_b, log_path=tmp_path / "b.log")
        assert log_a == log_b
        assert out_a.read_bytes() == out_b.read_bytes()
        assert (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()

    def test_resume_is_bitwise_equal_to_straight_run(self, tmp_path):
        ds = synthetic_blobs(6, 32, seed=2)
        cfg4 = TrainConfig(epochs=4, batch_size=4, input_size=32, seed=3)
        straight = tmp_path / "straight.ddan"
        train(TINY, cfg4, ds, out_path=straight)

        cfg2 = TrainConfig(epochs=2, batch_size=4, input_size=32, seed=3)
        half = tmp_path / "half.ddan"
        train(TINY, cfg2, ds, out_path=half)
        resumed = tmp_path / "resumed.ddan"
        train(TINY, cfg4, ds, out_path=resumed, resume=load_checkpoint(half))

        a = load_checkpoint(straight)
        b = load_checkpoint(resumed)
        assert a.epoch == b.epoch == 4
        assert a.rng_state == b.rng_state
        for name in a.tensors:
            assert np.array_equal(a.tensors[name], b.tensors[name]), name

    def test_resume_beyond_epochs_rejected(self, tmp_path):
        ds = synthetic_blobs(4, 32, seed=2)
        out = tmp_path / "m.ddan"
        ckpt, _ = train(TINY, FAST, ds, out_path=out)
        with pytest.raises(ValueError):
            train(TINY, FAST, ds, resume=load_checkpoint(out))

    def test_validation_split_used_for_val_dsc(self):
        train_ds = synthetic_blobs(6, 32, seed=4)
        val_ds = synthetic_blobs(2, 32, seed=5)
        _, log = train(TINY, FAST, train_ds, val_dataset=val_ds)
        assert all(0.0 <= rec["val_dsc"] <= 1.0 for rec in log)

    def test_best_checkpoint_written(self, tmp_path):
        ds = synthetic_blobs(4, 32, seed=6)
        out = tmp_path / "m.ddan"
        train(TINY, FAST, ds, out_path=out)
        assert out.exists()
        assert (tmp_path / "m.ddan.best").exists()
        best = load_checkpoint(str(out) + ".best")
        assert 1 <= best.epoch <= FAST.epochs


class TestEvaluate:
    def test_report_schema_and_selfconsistency(self, tmp_path):
        ds = synthetic_blobs(5, 32, seed=7)
        ckpt, _ = train(TINY, FAST, ds)
        report = evaluate(ckpt, ds)
        parsed = json.loads(report.to_json())
        assert list(parsed.keys()) == ["dsc", "miou", "recall", "precision", "fps", "n_images"]
        assert parsed["n_images"] == 5
        assert parsed["fps"] > 0
        assert parsed["miou"] <= parsed["dsc"] + 1e-12

    def test_untrained_model_near_chance(self):
        from ddanet.checkpoint import Checkpoint, collect_tensors

        ds = synthetic_blobs(6, 32, seed=8)
        params = build(TINY, seed=0)
        ckpt = Checkpoint(TINY, TrainConfig(input_size=32), 0, collect_tensors(params))
        report = evaluate(ckpt, ds)
        assert report.dsc < 0.5

    def test_empty_dataset_rejected(self):
        ds = synthetic_blobs(2, 32, seed=0)
        ckpt, _ = train(TINY, FAST, ds)
        with pytest.raises(ValueError):
            evaluate(ckpt, ds.__class__(items=[]))
