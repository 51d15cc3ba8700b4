"""Whole-system acceptance checks.

Ten verdicts, one per test, collected into VERDICTS and echoed as a
scoreboard by the conftest terminal-summary hook (fd-level capture
would swallow direct prints).  The expensive shared resources (the
two-thousand-sample dataset and the multi-seed training protocol) are
module fixtures.
"""

import hashlib
import json
import time

import numpy as np
import pytest

from pedcross import evaluate, features, model, multicam, synth, training
from pedcross.layers import GruParams, attention, gru_cell, init_attention
from pedcross.tensor import Tape, Tensor

from test_cli import run_cli
from test_layers import attention_oracle, gru_step_oracle
from test_tensor import conv3d_oracle, maxpool3d_oracle, pointwise_oracle

ACC_TARGET = 0.90
AUC_TARGET = 0.92

VERDICTS = []


def verdict(num, ok, detail):
    VERDICTS.append((num, ok, detail))
    assert ok, f"criterion {num}: {detail}"


@pytest.fixture(scope="module")
def desk_dataset():
    # 50/40/10 split, so 2000 generated samples put 1000 in train
    return synth.build_dataset(synth.default_gen(), 2000, 101)


@pytest.fixture(scope="module")
def trained_desk(desk_dataset):
    """Train the desk model on up to five seeds, stopping once the 4-of-5
    outcome is decided either way.  A seed passes when some epoch clears
    both validation bars inside the wall-clock budget; 13 epochs is the
    most that fits the budget at this configuration's epoch cost."""
    cfg = model.desk_config()
    runs = []
    best = None
    for seed in range(5):
        tc = training.desk_train(seed=seed, epochs=13,
                                 target_val_acc=ACC_TARGET,
                                 target_val_auc=AUC_TARGET)
        t0 = time.monotonic()
        ck = training.train(desk_dataset, cfg, tc)
        elapsed = time.monotonic() - t0
        hit = any(r["val_acc"] >= ACC_TARGET and r["val_auc"] is not None
                  and r["val_auc"] >= AUC_TARGET for r in ck.history)
        ok = hit and elapsed < 900.0
        runs.append({"seed": seed, "ok": ok, "epochs": ck.epoch,
                     "time_s": elapsed})
        if ok and (best is None or ck.best_metrics["val_auc"]
                   > best.best_metrics["val_auc"]):
            best = ck
        passed = sum(r["ok"] for r in runs)
        if passed >= 4 or (len(runs) - passed) >= 2:
            break
    return {"config": cfg, "runs": runs, "best": best}


# ---------------------------------------------------------------- 1


def test_criterion_01_gradients():
    t0 = time.monotonic()
    results = evaluate.run_gradcheck(include_models=True)
    elapsed = time.monotonic() - t0
    worst = max(results.values())
    verdict(1, worst < 1e-4 and elapsed < 120.0,
            f"{len(results)} finite-difference audits, worst rel err "
            f"{worst:.2e}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 2


def _check_conv3d(dt, salt):
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([21, salt, i])
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        d, h, w = (int(rng.integers(3, 7)) for _ in range(3))
        kd, kh, kw = (int(rng.integers(1, 4)) for _ in range(3))
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        x = rng.standard_normal((cin, d, h, w)).astype(dt)
        k = rng.standard_normal((cout, cin, kd, kh, kw)).astype(dt)
        got = Tape().conv3d(Tensor(x), Tensor(k), stride=s, pad=p).data
        ref = conv3d_oracle(x, k, (s, s, s), (p, p, p))
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return worst


def _check_maxpool3d(dt, salt):
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([22, salt, i])
        dims = tuple(int(rng.integers(3, 8)) for _ in range(3))
        lead = (int(rng.integers(1, 4)),) if rng.random() < 0.5 else ()
        win = int(rng.integers(2, 4))
        st = (None, 1, 2)[int(rng.integers(0, 3))]
        x = rng.standard_normal(lead + dims).astype(dt)
        got = Tape().maxpool3d(Tensor(x), win, st).data
        eff = win if st is None else st
        ref = maxpool3d_oracle(x, (win,) * 3, (eff,) * 3)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return worst


def _check_pointwise(dt, salt):
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([23, salt, i])
        c, cout = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        rank = int(rng.integers(1, 4))
        spatial = tuple(int(rng.integers(2, 6)) for _ in range(rank))
        x = rng.standard_normal((c,) + spatial).astype(dt)
        w = rng.standard_normal((cout, c)).astype(dt)
        got = Tape().pointwise_conv(Tensor(x), Tensor(w)).data
        ref = pointwise_oracle(x, w)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return worst


def _gru_params(indim, hidden, rng, dt):
    def t(shape):
        return Tensor((rng.standard_normal(shape) * 0.5).astype(dt))

    return GruParams(W_xz=t((indim, hidden)), W_hz=t((hidden, hidden)),
                     b_z=t((1, hidden)), W_xr=t((indim, hidden)),
                     W_hr=t((hidden, hidden)), b_r=t((1, hidden)),
                     W_x=t((indim, hidden)), W_h=t((hidden, hidden)),
                     b=t((1, hidden)))


def _check_gru(dt, salt):
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([24, salt, i])
        indim, hidden = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        p = _gru_params(indim, hidden, rng, dt)
        x = rng.standard_normal((1, indim)).astype(dt)
        hp = rng.standard_normal((1, hidden)).astype(dt)
        got = gru_cell(Tape(), Tensor(x), Tensor(hp), p).data
        ref = gru_step_oracle(x, hp, p)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return worst


def _check_attention(dt, salt):
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng([25, salt, i])
        hidden, out = int(rng.integers(2, 6)), int(rng.integers(1, 5))
        T = int(rng.integers(2, 7))
        ap = init_attention(hidden, out, rng, dt)
        H = rng.standard_normal((T, hidden)).astype(dt)
        got, alpha = attention(Tape(), Tensor(H), ap, return_weights=True)
        ref, ref_alpha = attention_oracle(H, ap.W_p.data, ap.W_c.data)
        worst = max(worst,
                    float(np.max(np.abs(got.data.ravel() - ref.ravel()))),
                    float(np.max(np.abs(alpha.data.ravel()
                                        - ref_alpha.ravel()))))
    return worst


def test_criterion_02_op_oracles():
    checks = (("conv3d", _check_conv3d), ("maxpool3d", _check_maxpool3d),
              ("pointwise_conv", _check_pointwise), ("gru_cell", _check_gru),
              ("attention", _check_attention))
    bad = []
    summary = []
    for salt, (dt, tol) in enumerate(((np.float64, 1e-12),
                                      (np.float32, 1e-5))):
        top = 0.0
        for name, fn in checks:
            diff = fn(dt, salt)
            top = max(top, diff)
            if diff > tol:
                bad.append(f"{name}[{np.dtype(dt).name}]={diff:.2e}")
        summary.append(f"{np.dtype(dt).name} worst {top:.2e}")
    verdict(2, not bad,
            "5 ops x 100 instances x 2 dtypes vs brute-force oracles: "
            + ", ".join(summary)
            + (f"; over tolerance: {bad}" if bad else ""))


# ---------------------------------------------------------------- 3


def test_criterion_03_categorical_depth():
    rng = np.random.default_rng(303)
    names = list(features.CLASSES)
    problems = []
    instances_seen = 0
    for scene in range(1000):
        H = int(rng.integers(10, 26))
        W = int(rng.integers(10, 26))
        k = int(rng.integers(1, 7))
        ids = rng.integers(0, k + 1, size=(H, W))
        depth = rng.uniform(0.05, 0.99, size=(H, W))
        insts = [features.Instance(names[int(rng.integers(0, len(names)))],
                                   i, ids == i)
                 for i in range(1, k + 1) if (ids == i).any()]
        out = features.build_categorical_depth(depth, insts)
        ped = [x for x in insts if x.cls in features.PED_CLASSES]
        veh = [x for x in insts if x.cls in features.VEHICLE_CLASSES]
        for ch, group in ((0, ped), (1, veh)):
            union = np.zeros((H, W), dtype=bool)
            for inst in group:
                union |= inst.mask
                vals = out[ch][inst.mask]
                want = np.float32(float(depth[inst.mask].mean()))
                instances_seen += 1
                # exact equality: variance of identical f32 values is not
                # reliably 0.0 (the mean itself rounds), so compare directly
                if not np.all(vals == want):
                    problems.append(f"scene {scene} id {inst.instance_id}")
            if np.any(out[ch][~union] != 0.0):
                problems.append(f"scene {scene} ch{ch} leaks outside masks")
            if len(group) >= 2:
                true = np.array([depth[x.mask].mean() for x in group])
                got = np.array([out[ch][x.mask][0] for x in group])
                if np.any(np.diff(got[np.argsort(true, kind="stable")]) < 0):
                    problems.append(f"scene {scene} ch{ch} order broken")
    verdict(3, not problems,
            f"1000 random scenes, {instances_seen} dynamic instances: "
            "per-instance constancy, zero background, channel purity and "
            "depth ordering all exact"
            + (f"; first issues: {problems[:3]}" if problems else ""))


# ---------------------------------------------------------------- 4


def test_criterion_04_stitching():
    lay = multicam.make_layout(3, 100, 64, 0.10)
    layout_ok = (lay.stitched_width == 280
                 and tuple(lay.offset) == (0, 90, 190))

    rng = np.random.default_rng(404)
    rt_worst = 0.0
    for cam, count in ((0, 3334), (1, 3333), (2, 3333)):
        xs = lay.crop_left[cam] + rng.random(count) * lay.kept_width[cam]
        pts = np.stack([xs, rng.random(count) * 64.0], axis=1)
        back = multicam.shift_coords(
            multicam.shift_coords(pts, cam, lay), cam, lay,
            "global_to_local")
        rt_worst = max(rt_worst, float(np.max(np.abs(back - pts))))

    # A handoff bug displaces everything observed after the seam by the
    # overlap or crop width, so the discontinuity of the box-center track
    # (second difference, with each frame mapped through its own camera's
    # chart and back) is the observable; raw frame deltas also contain
    # real motion, which near the camera legitimately exceeds 2 px.
    blay = synth.beta_gen().layout()
    jumps = []
    for i in range(400):
        sc = synth.generate_scenario(np.random.default_rng([44, 0, i]),
                                     synth.beta_gen())
        tr = synth.scenario_track(sc)
        cx = (tr.bbox[:, 0] + tr.bbox[:, 2]) / 2.0
        cy = (tr.bbox[:, 1] + tr.bbox[:, 3]) / 2.0
        for t in np.flatnonzero(np.diff(tr.camera_index) != 0):
            t = int(t)
            if t < 1 or not (tr.visible[t - 1] and tr.visible[t]
                             and tr.visible[t + 1]):
                continue
            reb = []
            for f in (t - 1, t, t + 1):
                pt = np.array([[cx[f], cy[f]]])
                cam = int(tr.camera_index[f])
                loc = multicam.shift_coords(pt, cam, blay,
                                            "global_to_local")
                reb.append(multicam.shift_coords(loc, cam, blay)[0])
            jumps.append(float(np.max(np.abs(reb[2] - 2 * reb[1]
                                             + reb[0]))))
        if len(jumps) >= 60:
            break
    seam_ok = len(jumps) >= 20 and max(jumps) < 2.0

    verdict(4, layout_ok and rt_worst <= 1e-12 and seam_ok,
            f"layout 280 px at offsets {tuple(lay.offset)}; 10^4-point "
            f"round-trip err {rt_worst:.1e}; {len(jumps)} seam handoffs, "
            f"worst discontinuity {max(jumps):.2f} px")


# ---------------------------------------------------------------- 5


def test_criterion_05_desk_training(trained_desk):
    runs = trained_desk["runs"]
    passed = sum(r["ok"] for r in runs)
    per_seed = ", ".join(f"seed {r['seed']}: {r['epochs']} ep "
                         f"{r['time_s']:.0f}s" for r in runs)
    verdict(5, passed >= 4,
            f"{passed} of {len(runs)} seeds tried reached val Acc >= 0.90 "
            f"and AUC >= 0.92 ({per_seed})")


# ---------------------------------------------------------------- 6


def test_criterion_06_motion_depth_ablation():
    gen = synth.ablation_gen()
    data = synth.build_dataset(gen, 400, 77)
    cfg = model.desk_config(crop_side=gen.crop_side, ctx_size=gen.ctx_size)
    tc = training.desk_train(seed=0, epochs=6)
    rows = evaluate.ablation_run(("a0", "a"), data, cfg, tc, it_passes=1)
    by = {r["variant"]: r for r in rows}
    delta = by["a"]["auc"] - by["a0"]["auc"]
    verdict(6, delta >= 0.0,
            f"local motion + categorical depth AUC {by['a']['auc']:.4f} vs "
            f"baseline {by['a0']['auc']:.4f} (delta {delta:+.4f})")


# ---------------------------------------------------------------- 7


def test_criterion_07_lead_time_decay(trained_desk):
    ck = trained_desk["best"]
    if ck is None:
        verdict(7, False, "no desk model passed the training protocol")
    params = ck.best_tensors()
    cfg = trained_desk["config"]
    sets, skipped = synth.etc_dataset(synth.default_gen(), 200, 303)
    hs = sorted(sets)
    accs = {h: evaluate.evaluate(sets[h], params, cfg).acc for h in hs}
    ordered = all(accs[a] >= accs[b] for a, b in zip(hs, hs[1:]))
    counts_ok = all(len(sets[h]) >= 200 for h in hs)
    verdict(7, ordered and counts_ok,
            "Acc by lead time " + ", ".join(f"{h:.0f}s {accs[h]:.3f}"
                                            for h in hs)
            + f" (n=200 per horizon, {skipped} scenarios skipped)")


# ---------------------------------------------------------------- 8


def test_criterion_08_reference_config_echo(tmp_path):
    cases = (("alpha", model.reference_alpha_config(crop_side=16, ctx_size=16),
              training.reference_alpha_train(), 5e-5, 10, 300),
             ("beta", model.reference_beta_config(crop_side=16, ctx_size=16),
              training.reference_beta_train(), 4e-5, 6, 400))
    failures = []
    for tag, mcfg, tcfg, lr, bs, epochs in cases:
        params = model.build_model(mcfg, seed=1)
        ck = training.Checkpoint(
            model_config=mcfg, train_config=tcfg, epoch=0, history=[],
            rng_state=np.random.default_rng(1).bit_generator.state,
            best_epoch=-1, best_metrics={}, params=params, best_params={},
            opt_v={})
        path = tmp_path / f"{tag}.pipc"
        training.save_checkpoint(ck, path)
        lk = training.load_checkpoint(path)
        checks = {
            "hidden 256": lk.model_config.hidden == 256,
            "dropout 0.5": lk.model_config.dropout == 0.5,
            "L2 1e-4": lk.train_config.l2_lambda == 1e-4,
            f"lr {lr}": lk.train_config.lr == lr,
            f"batch {bs}": lk.train_config.batch_size == bs,
            f"epochs {epochs}": lk.train_config.epochs == epochs,
            "model config equal": lk.model_config == mcfg,
            "train config equal": lk.train_config == tcfg,
            "weights equal": (set(lk.params) == set(params)
                              and all(np.array_equal(lk.params[n].data,
                                                     params[n].data)
                                      for n in params)),
        }
        failures.extend(f"{tag}: {name}" for name, ok in checks.items()
                        if not ok)
    verdict(8, not failures,
            "alpha (lr 5e-5, batch 10, 300 epochs) and beta (lr 4e-5, "
            "batch 6, 400 epochs) configs with hidden 256, dropout 0.5, "
            "L2 1e-4 survive the checkpoint round trip"
            + (f"; failed: {failures}" if failures else ""))


# ---------------------------------------------------------------- 9


def _scrub(report):
    rep = json.loads(json.dumps(report))
    rep.pop("timing", None)
    rep.get("metrics", {}).pop("it_ms", None)
    for row in rep.get("rows", []):
        if isinstance(row, dict):
            row.pop("it_ms", None)
    return rep


def test_criterion_09_command_reproducibility(tmp_path):
    gen_cfg = tmp_path / "gen.json"
    gen_cfg.write_text(json.dumps(
        {"gen": {"crop_side": 8, "ctx_size": 8, "m": 4}}))
    model_over = {"hidden": 4, "crop_side": 8, "ctx_size": 8, "m": 4,
                  "content_channels": [2, 2, 2],
                  "context_channels": [2, 2, 2],
                  "motion_channels": 2, "dropout": 0.0}
    train_over = {"epochs": 2, "lr": 1e-3, "batch_size": 6}
    mt_cfg = tmp_path / "mt.json"
    mt_cfg.write_text(json.dumps({"model": model_over,
                                  "train": train_over}))
    all_cfg = tmp_path / "all.json"
    all_cfg.write_text(json.dumps(
        {"gen": {"crop_side": 8, "ctx_size": 8, "m": 4},
         "model": model_over, "train": train_over}))

    mismatches = []

    def once(*argv):
        code, out, err = run_cli(*argv)
        assert code == 0, f"{argv[0]} exited {code}: {err.strip()}"
        return _scrub(json.loads(out))

    def twice(name, *argv):
        if once(*argv) != once(*argv):
            mismatches.append(name)

    d1, d2 = tmp_path / "d1", tmp_path / "d2"
    g1 = once("gen", "--n", "12", "--seed", "6", "--out", str(d1),
              "--config", str(gen_cfg))
    g2 = once("gen", "--n", "12", "--seed", "6", "--out", str(d2),
              "--config", str(gen_cfg))
    if g1 != g2 or g1["metrics"]["digest"] != g2["metrics"]["digest"]:
        mismatches.append("gen")

    ck_a, ck_b = tmp_path / "a.pipc", tmp_path / "b.pipc"
    t1 = once("train", "--data", str(d1), "--out", str(ck_a), "--seed",
              "3", "--config", str(mt_cfg))
    t2 = once("train", "--data", str(d1), "--out", str(ck_b), "--seed",
              "3", "--config", str(mt_cfg))
    if t1 != t2 or (hashlib.sha256(ck_a.read_bytes()).hexdigest()
                    != hashlib.sha256(ck_b.read_bytes()).hexdigest()):
        mismatches.append("train")

    twice("eval", "eval", "--ckpt", str(ck_a), "--data", str(d1),
          "--split", "val")
    twice("etc", "etc", "--ckpt", str(ck_a), "--n", "6", "--seed", "2",
          "--config", str(gen_cfg))
    twice("perm", "perm", "--ckpt", str(ck_a), "--data", str(d1),
          "--feature", "speed,local_content", "--seed", "4")
    twice("ablate", "ablate", "--data", str(d1), "--variants", "a0",
          "--it-passes", "1", "--config", str(mt_cfg))
    twice("sweep", "sweep", "--n", "8", "--strides", "2", "--ms", "4",
          "--it-passes", "1", "--seed", "2", "--config", str(all_cfg))

    verdict(9, not mismatches,
            "dataset digest, checkpoint bytes, and eval/etc/perm/ablate/"
            "sweep reports identical across repeated seeded runs"
            + (f"; diverged: {mismatches}" if mismatches else ""))


# ---------------------------------------------------------------- 10


def test_criterion_10_feature_reliance(desk_dataset, trained_desk):
    ck = trained_desk["best"]
    if ck is None:
        verdict(10, False, "no desk model passed the training protocol")
    params = ck.best_tensors()
    cfg = trained_desk["config"]
    d_speed = evaluate.permutation_importance(
        desk_dataset["test"], params, cfg, "speed",
        np.random.default_rng([5, 0]))
    d_content = evaluate.permutation_importance(
        desk_dataset["test"], params, cfg, "local_content",
        np.random.default_rng([5, 1]))
    verdict(10, d_speed["delta_acc"] > d_content["delta_acc"],
            f"shuffling ego speed costs {d_speed['delta_acc']:+.4f} Acc "
            f"vs {d_content['delta_acc']:+.4f} for the content crop "
            f"(n={d_speed['n']})")
