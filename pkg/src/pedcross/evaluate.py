"""Evaluation harness: metric reports, horizon curves, ablation and
stride/length sweeps, permutation importance, and the gradient audit."""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from . import layers, model, synth, training
from .errors import BadConfig, BadVariant, UnknownFeature
from .features import CLASSES, Sample
from .metrics import MetricReport, metrics
from .tensor import Tape, Tensor, backward, finite_diff_check

# Sample field backing each model feature toggle
FEATURE_FIELDS = {"bbox": "p_bb", "pose": "p_bp", "speed": "v_s",
                  "local_content": "p_lc", "LM": "p_lm", "semantic": "e_sc",
                  "CD": "e_cd", "GM": "e_gm", "MD": "e_md"}

# Variant rows with their feature toggles, matching the published ablation
# table: the baseline strips all four optional context branches and the
# final variant re-adds local motion plus categorical depth.
ABLATION_VARIANTS = {
    "a0": (),
    "a1": ("GM",),
    "a2": ("LM",),
    "a3": ("MD",),
    "a4": ("CD",),
    "a5": ("GM", "MD"),
    "a": ("LM", "CD"),
}
_BASELINE_FEATURES = ("bbox", "pose", "speed", "local_content", "semantic")


def evaluate(samples, params, config, threshold=0.5) -> MetricReport:
    scores = training.score_samples(samples, params, config)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return metrics(scores, labels, threshold=threshold,
                   config=config.to_dict())


def inference_time_ms(samples, params, config, n=100) -> float:
    """Median single-sample forward latency over n passes."""
    times = []
    for i in range(n):
        s = samples[i % len(samples)]
        t0 = time.perf_counter()
        model.forward(s, params, config)
        times.append((time.perf_counter() - t0) * 1000.0)
    return float(np.median(times))


def etc_evaluate(params, config, horizon_sets, skipped=0, threshold=0.5):
    """One metric row per horizon, most imminent first.

    horizon_sets maps horizon seconds to sample lists whose windows end at
    the decisive moment for that horizon; skipped carries the count of
    scenarios dropped for missing history.
    """
    rows = []
    for h in sorted(horizon_sets):
        rep = evaluate(horizon_sets[h], params, config, threshold)
        rows.append({"horizon_s": float(h), "n": rep.n,
                     "acc": rep.acc, "auc": rep.auc, "f1": rep.f1,
                     "skipped": int(skipped)})
    return rows


def variant_config(base_config, variant: str):
    if variant not in ABLATION_VARIANTS:
        raise BadVariant(f"unknown ablation variant {variant!r}")
    feats = _BASELINE_FEATURES + ABLATION_VARIANTS[variant]
    return dataclasses.replace(base_config, features=feats)


def ablation_run(variants, dataset, base_config, train_config,
                 it_passes=100, log=None):
    """Train and evaluate each variant on identical data and seed."""
    rows = []
    val = (dataset.get("test") or dataset.get("val")
           or dataset["train"])
    for name in variants:
        cfg = variant_config(base_config, name)
        ck = training.train(dataset, cfg, train_config)
        params = ck.best_tensors()
        rep = evaluate(val, params, cfg)
        row = {"variant": name,
               "toggles": {t: t in ABLATION_VARIANTS[name]
                           for t in ("GM", "LM", "MD", "CD")},
               "acc": rep.acc, "auc": rep.auc, "f1": rep.f1, "n": rep.n,
               "it_ms": inference_time_ms(val, params, cfg, n=it_passes)}
        rows.append(row)
        if log:
            log(row)
    return rows


SWEEP_NOTE = ("OT = m*stride/fps; (s=2, m=10) at 30 fps gives 0.67 s, "
              "conventionally quoted as 0.5 s.")


def temporal_sweep(gen, n, seed, base_config, train_config,
                   strides=(1, 2, 3, 4, 5), ms=(10, 15, 20),
                   it_passes=20, log=None):
    """Train one model per (stride, m) cell; returns a row per cell.

    Every cell regenerates its dataset from the same seed because the
    observation window geometry changes with the cell.
    """
    if not strides or not ms:
        raise BadConfig("sweep needs at least one stride and one m")
    if any(s < 1 for s in strides) or any(m < 1 for m in ms):
        raise BadConfig("strides and m values must be >= 1")
    rows = []
    for s in strides:
        for m in ms:
            g = dataclasses.replace(gen, m=int(m), stride=int(s))
            data = synth.build_dataset(g, n, seed)
            cfg = dataclasses.replace(base_config, m=int(m), stride=int(s))
            ck = training.train(data, cfg, train_config)
            params = ck.best_tensors()
            val = data["val"] if data["val"] else data["train"]
            rep = evaluate(val, params, cfg)
            row = {"stride": int(s), "m": int(m),
                   "ot_s": round(m * s / gen.fps, 4),
                   "acc": rep.acc, "auc": rep.auc, "f1": rep.f1,
                   "it_ms": inference_time_ms(val, params, cfg,
                                              n=it_passes)}
            rows.append(row)
            if log:
                log(row)
    return rows


def permutation_importance(samples, params, config, feature, rng,
                           threshold=0.5) -> dict:
    """Metric drop when one feature is shuffled across samples."""
    if feature not in FEATURE_FIELDS:
        raise UnknownFeature(f"unknown feature {feature!r}")
    field = FEATURE_FIELDS[feature]
    if any(getattr(s, field) is None for s in samples):
        raise UnknownFeature(f"feature {feature!r} absent from samples")
    base = evaluate(samples, params, config, threshold)
    perm = rng.permutation(len(samples))
    shuffled = [dataclasses.replace(s, **{field: getattr(samples[j], field)})
                for s, j in zip(samples, perm)]
    after = evaluate(shuffled, params, config, threshold)
    return {"feature": feature, "n": base.n,
            "base_acc": base.acc, "perm_acc": after.acc,
            "delta_acc": base.acc - after.acc,
            "base_auc": base.auc, "perm_auc": after.auc,
            "delta_auc": (None if base.auc is None or after.auc is None
                          else base.auc - after.auc)}


def _op_checks(rng):
    """(name, fn, params) triples exercising each differentiable op."""
    def t(shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale,
                      requires_grad=True, dtype=np.float64)

    checks = []

    def op(name, build):
        checks.append((name, build))

    op("add", lambda: ((lambda p: _scalar(lambda tp: tp.add(p["a"], p["b"]))),
                       {"a": t((3, 4)), "b": t((3, 4))}))
    op("mul", lambda: ((lambda p: _scalar(lambda tp: tp.mul(p["a"], p["b"]))),
                       {"a": t((3, 4)), "b": t((3, 4))}))
    op("affine", lambda: ((lambda p: _scalar(
        lambda tp: tp.affine(p["a"], 1.7, -0.3))), {"a": t((2, 5))}))
    op("channel_bias", lambda: ((lambda p: _scalar(
        lambda tp: tp.channel_bias(p["a"], p["b"]))),
        {"a": t((3, 4, 5)), "b": t((3,))}))
    op("sigmoid", lambda: ((lambda p: _scalar(
        lambda tp: tp.sigmoid(p["a"]))), {"a": t((4, 4))}))
    op("tanh", lambda: ((lambda p: _scalar(
        lambda tp: tp.tanh(p["a"]))), {"a": t((4, 4))}))
    op("relu", lambda: ((lambda p: _scalar(
        lambda tp: tp.relu(p["a"]))), {"a": t((4, 4), 2.0)}))
    op("softmax_last", lambda: ((lambda p: _scalar(
        lambda tp: tp.softmax_last(p["a"]))), {"a": t((3, 5))}))
    op("reshape", lambda: ((lambda p: _scalar(
        lambda tp: tp.reshape(p["a"], (6, 2)))), {"a": t((3, 4))}))
    op("transpose", lambda: ((lambda p: _scalar(
        lambda tp: tp.transpose(p["a"], (1, 0, 2)))), {"a": t((2, 3, 4))}))
    op("slice0", lambda: ((lambda p: _scalar(
        lambda tp: tp.slice0(p["a"], 1, 3))), {"a": t((4, 3))}))
    op("concat", lambda: ((lambda p: _scalar(
        lambda tp: tp.concat([p["a"], p["b"]], axis=1))),
        {"a": t((3, 2)), "b": t((3, 4))}))
    op("matmul", lambda: ((lambda p: _scalar(
        lambda tp: tp.matmul(p["a"], p["b"]))),
        {"a": t((3, 4)), "b": t((4, 2))}))
    op("matmul_tb", lambda: ((lambda p: _scalar(
        lambda tp: tp.matmul(p["a"], p["b"], transpose_b=True))),
        {"a": t((3, 4)), "b": t((2, 4))}))
    op("conv3d", lambda: ((lambda p: _scalar(
        lambda tp: tp.conv3d(p["x"], p["k"], stride=1, pad=1))),
        {"x": t((2, 3, 5, 5)), "k": t((2, 2, 3, 3, 3))}))
    op("maxpool3d", lambda: ((lambda p: _scalar(
        lambda tp: tp.maxpool3d(p["x"], (1, 2, 2)))),
        {"x": t((2, 3, 4, 4))}))
    op("pointwise_conv", lambda: ((lambda p: _scalar(
        lambda tp: tp.pointwise_conv(p["x"], p["w"]))),
        {"x": t((3, 4, 5)), "w": t((2, 3))}))
    op("bce", lambda: ((lambda p: (lambda tp=Tape(): (
        tp.bce(tp.sigmoid(p["a"]), 1.0), tp))()), {"a": t((1, 1))}))

    def gru(tag, seq):
        p = layers.init_gru(3, 4, np.random.default_rng(7), np.float64)
        gru_names = list(p.tensors())
        named = {f"g/{k}": v for k, v in p.tensors().items()}
        x = t((5, 3)) if seq else t((1, 3))

        def fn(pd):
            tp = Tape()
            gp = layers.GruParams(**{k: pd[f"g/{k}"] for k in gru_names})
            h0 = Tensor(np.zeros((1, 4)), dtype=np.float64)
            if seq:
                out = layers.gru_sequence(tp, pd["x"], h0, gp)
                out = tp.slice0(out, 4, 5)
            else:
                out = layers.gru_cell(tp, pd["x"], h0, gp)
            loss = tp.bce(tp.sigmoid(tp.matmul(
                out, pd["w"], transpose_b=True)), 1.0)
            return loss, tp
        named["x"] = x
        named["w"] = t((1, 4))
        checks.append((tag, lambda: (fn, named)))

    gru("gru_cell", seq=False)
    gru("gru_sequence", seq=True)

    def attention_check():
        ap = layers.init_attention(4, 3, np.random.default_rng(3),
                                   np.float64)
        named = {"H": t((5, 4)), "W_p": ap.W_p, "W_c": ap.W_c,
                 "w": t((1, 3))}

        def fn(pd):
            tp = Tape()
            out = layers.attention(tp, pd["H"],
                                   layers.AttentionParams(pd["W_p"],
                                                          pd["W_c"]))
            loss = tp.bce(tp.sigmoid(tp.matmul(
                out, pd["w"], transpose_b=True)), 1.0)
            return loss, tp
        return fn, named
    checks.append(("attention", attention_check))

    def fc_check():
        named = {"x": t((1, 6)), "W": t((3, 6)), "b": t((3,))}

        def fn(pd):
            tp = Tape()
            out = layers.fully_connected(tp, pd["x"], pd["W"], pd["b"])
            loss = tp.bce(tp.sigmoid(tp.slice0(
                tp.transpose(out, (1, 0)), 0, 1)), 0.0)
            return loss, tp
        return fn, named
    checks.append(("fully_connected", fc_check))
    return checks


def _scalar(build):
    """Reduce an op output to a scalar loss suitable for the checker.

    The quadratic pool is scaled by the element count so the sigmoid stays
    away from its clamped saturation region, where both gradient paths
    would vanish and the comparison would be vacuous.
    """
    tp = Tape()
    out = build(tp)
    flat = tp.reshape(out, (1, -1))
    pooled = tp.matmul(flat, tp.tanh(tp.transpose(flat, (1, 0))))
    scaled = tp.affine(pooled, 1.0 / flat.data.size, 0.0)
    return tp.bce(tp.sigmoid(scaled), 1.0), tp


def _tiny_model_check(beta: bool):
    """Every branch of one variant at minimal width, on a dense random input.

    Rendered scenes are the wrong probe here: their rasters are full of exact
    ties (one-hot planes, per-instance constant depth), and a tied max pool
    window sends reverse mode down one branch while the central difference
    averages both. Gaussian inputs make ties a measure-zero event, so any
    disagreement that survives is a real gradient bug.
    """
    cams = 3 if beta else 1
    m, s, g = 3, 8, 8
    cfg = model.ModelConfig(
        variant="beta" if beta else "alpha", cameras=cams,
        m=m, stride=2, hidden=3, crop_side=s, ctx_size=g,
        content_channels=(1, 1, 1), context_channels=(1, 1, 1),
        motion_channels=1, dropout=0.0,
        features=model.ALL_FEATURES)
    rng = np.random.default_rng([71, int(beta)])

    def raster(cin):
        shape = (m, cams, cin, g, g) if beta else (m, cin, g, g)
        return rng.normal(0.0, 1.0, shape)

    sample = Sample(
        p_bb=rng.normal(0.5, 0.2, (m, 4)),
        p_bp=rng.normal(0.5, 0.2, (m, 34)),
        v_s=rng.normal(25.0, 5.0, (m, 1)),
        p_lc=rng.normal(0.5, 0.3, (m, s, s, 3)),
        p_lm=rng.normal(0.0, 2.0, (m, s, s, 2)),
        e_sc=raster(len(CLASSES)), e_cd=raster(2),
        e_gm=raster(2), e_md=raster(1),
        sentinel=0, label=1)
    params = model.build_model(cfg, seed=5, dtype=np.float64)
    # Fresh zero biases leave rectifier inputs sitting exactly on the kink
    # (zeroed regions convolve to zero, plus bias zero), where one-sided
    # derivatives and the subgradient honestly differ. Offset every weight
    # so the loss is smooth within the whole difference stencil.
    for p in params.values():
        p.data += rng.normal(0.0, 0.05, p.data.shape)
    first = [True]

    def fn(pd):
        # Only the first call's tape feeds backward(); finite differences
        # re-evaluate the value alone, so later calls skip the bookkeeping.
        tp = Tape(record=first[0])
        first[0] = False
        out = model.forward(sample, pd, cfg, tape=tp)
        return tp.bce(out, float(sample.label)), tp
    return fn, params


def run_gradcheck(include_models=True, eps=1e-3):
    """Finite-difference audit of every op, layer, and both full models."""
    rng = np.random.default_rng(20)
    results = {}
    for name, build in _op_checks(rng):
        fn, params = build()
        results[name] = finite_diff_check(fn, params, eps=eps).max_rel_err
    if include_models:
        for tag, beta in (("model_alpha", False), ("model_beta", True)):
            fn, params = _tiny_model_check(beta)
            rep = finite_diff_check(fn, params, eps=eps)
            results[tag] = rep.max_rel_err
    return results
