"""Objective, optimizer, epoch loop, checkpoint container."""

import numpy as np
import pytest

from pedcross.errors import (DimMismatch, DivergedLoss, EmptyDataset,
                             IoError)
from pedcross.model import ModelConfig, build_model, forward, reference_alpha_config, reference_beta_config
from pedcross.tensor import Tensor
from pedcross.training import (Checkpoint, OptimState, TrainConfig,
                               batch_loss, bce_loss, desk_train, l2_penalty,
                               load_checkpoint, reference_alpha_train,
                               reference_beta_train, rmsprop_step,
                               save_checkpoint, score_samples, train,
                               train_batch)
from testutil import random_sample

BASE = ("bbox", "pose", "speed", "local_content", "semantic", "LM", "CD")


def tiny_config(**over):
    base = dict(variant="alpha", cameras=1, m=3, stride=1, hidden=4,
                crop_side=8, ctx_size=8, content_channels=(2, 2, 2),
                context_channels=(2, 2, 2), motion_channels=2,
                features=BASE, dropout=0.5)
    base.update(over)
    return ModelConfig(**base)


def speed_dataset(cfg, n_train=120, n_val=40, seed=0):
    """Label 1 samples drive fast, label 0 slow; everything else is noise."""
    rng = np.random.default_rng(seed)

    def make(n):
        out = []
        for i in range(n):
            label = i % 2
            s = random_sample(cfg, rng, label=label)
            s.v_s = np.full((cfg.m, 1), 45.0 if label else 5.0,
                            dtype=np.float32)
            out.append(s)
        return out

    return {"train": make(n_train), "val": make(n_val)}


class TestBceLoss:
    def test_half(self):
        assert bce_loss(0.5, 1) == pytest.approx(np.log(2.0), rel=1e-12)

    def test_near_perfect(self):
        assert bce_loss(1 - 1e-7, 1) == pytest.approx(1e-7, rel=1e-2)

    def test_clamped_at_zero(self):
        assert bce_loss(0.0, 1) == pytest.approx(-np.log(1e-7), rel=1e-9)

    def test_batch_mean(self):
        lone = (bce_loss(0.9, 1) + bce_loss(0.2, 0)) / 2
        assert bce_loss([0.9, 0.2], [1, 0]) == pytest.approx(lone, rel=1e-12)


class TestL2Penalty:
    def test_zero_weights(self):
        assert l2_penalty(np.zeros((3, 3))) == 0.0

    def test_single_weight(self):
        assert l2_penalty(np.array([2.0]), 1e-4) == pytest.approx(4e-4)

    def test_gradient_is_2_lambda_w(self):
        w = np.array([1.5, -0.3, 0.0])
        lam, eps = 1e-4, 1e-6
        for i in range(3):
            wp, wm = w.copy(), w.copy()
            wp[i] += eps
            wm[i] -= eps
            fd = (l2_penalty(wp, lam) - l2_penalty(wm, lam)) / (2 * eps)
            assert fd == pytest.approx(2 * lam * w[i], abs=1e-9)

    def test_accepts_tensor(self):
        assert l2_penalty(Tensor([2.0]), 1e-4) == pytest.approx(4e-4)


class TestRmsprop:
    def make(self, value, lr=1e-3):
        p = {"w": Tensor(np.array([value], dtype=np.float64),
                         requires_grad=True, dtype=np.float64)}
        return p, OptimState.for_params(p, lr)

    def test_hand_value(self):
        p, st = self.make(1.0)
        rmsprop_step(p, {"w": np.array([1.0])}, st)
        assert st.v["w"][0] == pytest.approx(0.1, rel=1e-12)
        assert p["w"].data[0] == pytest.approx(1.0 - 1e-3 / (np.sqrt(0.1) + 1e-8),
                                               rel=1e-9)

    def test_missing_grad_decays_v(self):
        p, st = self.make(2.0)
        st.v["w"][0] = 0.5
        rmsprop_step(p, {}, st)
        assert p["w"].data[0] == 2.0
        assert st.v["w"][0] == pytest.approx(0.45)

    def test_shape_guard(self):
        p, st = self.make(1.0)
        with pytest.raises(DimMismatch):
            rmsprop_step(p, {"w": np.zeros((2, 2))}, st)

    def test_l2_only_gradient_decays_weights(self):
        rng = np.random.default_rng(0)
        p = {"w": Tensor(rng.standard_normal(20), requires_grad=True,
                         dtype=np.float64)}
        st = OptimState.for_params(p, lr=1e-4)
        lam = 1e-4
        norms = [float(np.linalg.norm(p["w"].data))]
        for _ in range(30):
            rmsprop_step(p, {"w": 2 * lam * p["w"].data}, st)
            norms.append(float(np.linalg.norm(p["w"].data)))
        assert all(b < a for a, b in zip(norms, norms[1:]))


class TestTrainLoop:
    def test_zero_lr_is_identity(self):
        cfg = tiny_config()
        ds = speed_dataset(cfg, n_train=6, n_val=4)
        before = {k: t.data.copy()
                  for k, t in build_model(cfg, 3).items()}
        ck = train(ds, cfg, TrainConfig(lr=0.0, batch_size=3, epochs=2,
                                        seed=3))
        for k, t in ck.params.items():
            assert np.array_equal(t.data, before[k]), k

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            train({"train": [], "val": []}, tiny_config(), TrainConfig())

    def test_loss_decreases_first_five_steps(self):
        cfg = tiny_config(dropout=0.0)
        rng = np.random.default_rng(11)
        batch = [random_sample(cfg, rng, label=i % 2) for i in range(8)]
        tc = TrainConfig(lr=1e-4, batch_size=8, l2_lambda=1e-4)
        good = 0
        for seed in range(10):
            params = build_model(cfg, seed)
            st = OptimState.for_params(params, tc.lr, tc.rho, tc.eps)
            losses = [batch_loss(batch, params, cfg, tc.l2_lambda)]
            for _ in range(5):
                train_batch(batch, params, cfg, tc, st,
                            np.random.default_rng(0))
                losses.append(batch_loss(batch, params, cfg, tc.l2_lambda))
            if all(b < a for a, b in zip(losses, losses[1:])):
                good += 1
        assert good >= 9, f"loss decreased on only {good}/10 seeds"

    def test_separable_task_learned(self):
        cfg = tiny_config(features=("bbox", "speed"), dropout=0.0)
        ds = speed_dataset(cfg, n_train=120, n_val=40)
        tc = desk_train(lr=2e-2, batch_size=10, epochs=50, seed=1)
        ck = train(ds, cfg, tc)
        assert max(r["train_acc"] for r in ck.history) >= 0.95
        assert ck.epoch <= 50

    def test_history_and_best_snapshot(self):
        cfg = tiny_config()
        ds = speed_dataset(cfg, n_train=10, n_val=6)
        ck = train(ds, cfg, TrainConfig(lr=1e-3, batch_size=5, epochs=3,
                                        seed=0))
        assert len(ck.history) == 3
        for row in ck.history:
            for key in ("epoch", "train_loss", "train_acc", "val_loss",
                        "val_acc", "val_auc"):
                assert key in row
        best_row = min(ck.history, key=lambda r: r["val_loss"])
        assert ck.best_epoch == best_row["epoch"]
        assert ck.best_metrics["val_loss"] == best_row["val_loss"]
        assert set(ck.best_params) == set(ck.params)

    def test_diverged_loss_detected(self):
        cfg = tiny_config()
        ds = speed_dataset(cfg, n_train=4, n_val=4)
        params = build_model(cfg, 0)
        params["out/fc/W"].data[...] = np.nan
        ck = Checkpoint(model_config=cfg, train_config=TrainConfig(epochs=1),
                        epoch=0, history=[],
                        rng_state=np.random.default_rng(0).bit_generator.state,
                        best_epoch=-1, best_metrics={}, params=params,
                        best_params={}, opt_v={k: np.zeros(t.dims, t.dtype)
                                               for k, t in params.items()})
        with pytest.raises(DivergedLoss):
            train(ds, cfg, TrainConfig(lr=1e-3, batch_size=4, epochs=1),
                  resume_from=ck)

    def test_determinism_same_seed(self):
        cfg = tiny_config()
        ds = speed_dataset(cfg, n_train=8, n_val=4)
        a = train(ds, cfg, TrainConfig(lr=1e-3, batch_size=4, epochs=2, seed=5))
        b = train(ds, cfg, TrainConfig(lr=1e-3, batch_size=4, epochs=2, seed=5))
        for k in a.params:
            assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


class TestCheckpointIo:
    def small_checkpoint(self, epochs=2):
        cfg = tiny_config()
        ds = speed_dataset(cfg, n_train=8, n_val=4)
        return train(ds, cfg, TrainConfig(lr=1e-3, batch_size=4,
                                          epochs=epochs, seed=7)), ds

    def test_round_trip(self, tmp_path):
        ck, _ = self.small_checkpoint()
        path = tmp_path / "model.pipc"
        save_checkpoint(ck, path)
        back = load_checkpoint(path)
        assert back.model_config == ck.model_config
        assert back.train_config == ck.train_config
        assert back.epoch == ck.epoch
        assert back.history == ck.history
        assert back.rng_state == ck.rng_state
        assert back.best_epoch == ck.best_epoch
        for k in ck.params:
            assert back.params[k].data.tobytes() == ck.params[k].data.tobytes()
            assert back.opt_v[k].tobytes() == ck.opt_v[k].tobytes()
            assert back.best_params[k].tobytes() == ck.best_params[k].tobytes()

    def test_best_tensors(self):
        ck, _ = self.small_checkpoint()
        best = ck.best_tensors()
        assert set(best) == set(ck.params)
        assert all(t.requires_grad for t in best.values())

    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg = tiny_config()
        ds = speed_dataset(cfg, n_train=8, n_val=4)
        straight = train(ds, cfg, TrainConfig(lr=1e-3, batch_size=4,
                                              epochs=4, seed=9))
        half = train(ds, cfg, TrainConfig(lr=1e-3, batch_size=4, epochs=2,
                                          seed=9))
        path = tmp_path / "half.pipc"
        save_checkpoint(half, path)
        resumed = train(ds, cfg, TrainConfig(lr=1e-3, batch_size=4,
                                             epochs=4, seed=9),
                        resume_from=load_checkpoint(path))
        for k in straight.params:
            assert (straight.params[k].data.tobytes()
                    == resumed.params[k].data.tobytes()), k
            assert (straight.opt_v[k].tobytes()
                    == resumed.opt_v[k].tobytes()), k
        assert straight.history == resumed.history

    def test_io_errors(self, tmp_path):
        bad = tmp_path / "bad.pipc"
        bad.write_bytes(b"nope")
        with pytest.raises(IoError):
            load_checkpoint(bad)
        with pytest.raises(IoError):
            load_checkpoint(tmp_path / "missing.pipc")

    def test_hyperparameter_echo(self, tmp_path):
        # fidelity hyperparameters ride through the container untouched;
        # structural extents are shrunk so the file stays small
        cases = [(reference_alpha_config(hidden=8, crop_side=8, ctx_size=8,
                                     content_channels=(2, 2, 2),
                                     context_channels=(2, 2, 2),
                                     motion_channels=2),
                  reference_alpha_train(), 5e-5, 10, 300),
                 (reference_beta_config(hidden=8, crop_side=8, ctx_size=8,
                                    content_channels=(2, 2, 2),
                                    context_channels=(2, 2, 2),
                                    motion_channels=2),
                  reference_beta_train(), 4e-5, 6, 400)]
        for mc, tc, lr, batch, epochs in cases:
            params = build_model(mc, 0)
            ck = Checkpoint(
                model_config=mc, train_config=tc, epoch=0, history=[],
                rng_state=np.random.default_rng(0).bit_generator.state,
                best_epoch=-1, best_metrics={}, params=params,
                best_params={}, opt_v={k: np.zeros(t.dims, t.dtype)
                                       for k, t in params.items()})
            path = tmp_path / f"{mc.variant}.pipc"
            save_checkpoint(ck, path)
            back = load_checkpoint(path)
            assert back.train_config.lr == lr
            assert back.train_config.batch_size == batch
            assert back.train_config.epochs == epochs
            assert back.train_config.l2_lambda == 1e-4
            assert back.model_config.dropout == 0.5
