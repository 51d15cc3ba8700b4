"""Command-line surface: every workflow behind one executable.

Each subcommand writes a machine-readable JSON report to stdout and a
human table to stderr; --csv additionally stores the table with a stable
column order. Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import model, synth, training
from .errors import BadConfig, EmptyDataset, IoError, PedcrossError
from .features import PED_CLASSES, VEHICLE_CLASSES, build_categorical_depth
from .multicam import stitch

_GEN_PRESETS = {"desk": synth.default_gen, "ablation": synth.ablation_gen,
                "beta": synth.beta_gen}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: usage error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)!r}")


def _flatten(row):
    flat = dict(row)
    toggles = flat.pop("toggles", None)
    if toggles:
        flat.update(toggles)
    return flat


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(rows, columns, footer=None):
    if rows:
        cells = [[_fmt(_flatten(r).get(c)) for c in columns] for r in rows]
        widths = [max(len(c), *(len(line[i]) for line in cells))
                  for i, c in enumerate(columns)]
        print("  ".join(c.ljust(w) for c, w in zip(columns, widths)),
              file=sys.stderr)
        for line in cells:
            print("  ".join(v.ljust(w) for v, w in zip(line, widths)),
                  file=sys.stderr)
    if footer:
        print(footer, file=sys.stderr)


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            flat = _flatten(r)
            w.writerow(["" if flat.get(c) is None else flat.get(c)
                        for c in columns])


def _emit(args, command, digest_src, metrics, rows, columns, t0,
          footer=None):
    report = {"command": command,
              "config_digest": synth.canonical_digest(digest_src),
              "metrics": metrics, "rows": rows,
              "timing": round(time.perf_counter() - t0, 3)}
    json.dump(report, sys.stdout, default=_json_default)
    sys.stdout.write("\n")
    _table(rows, columns, footer)
    if getattr(args, "csv", None):
        _write_csv(args.csv, rows, columns)
    return 0


def _overrides(args, *allowed):
    path = getattr(args, "config", None)
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read config {path}: {e}") from e
    try:
        ov = json.loads(text)
    except json.JSONDecodeError as e:
        raise BadConfig(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(ov, dict):
        raise BadConfig(f"config {path} must hold a JSON object")
    extra = sorted(set(ov) - set(allowed))
    if extra:
        raise BadConfig(f"config sections {extra} not used by this command; "
                        f"allowed: {sorted(allowed)}")
    return ov


def _apply(cfg, overrides, section):
    try:
        return dataclasses.replace(cfg, **overrides.get(section, {}))
    except TypeError as e:
        raise BadConfig(f"bad {section} override: {e}") from e


def _model_preset(preset, variant):
    if preset == "reference":
        return (model.reference_beta_config() if variant == "beta"
                else model.reference_alpha_config())
    if variant == "beta":
        return model.desk_config(variant="beta", cameras=3)
    return model.desk_config()


def _train_preset(preset, variant, seed):
    if preset == "reference":
        make = (training.reference_beta_train if variant == "beta"
                else training.reference_alpha_train)
        return make(seed=seed)
    return training.desk_train(seed=seed)


def _gen_for_model(gen, mc):
    """Align the generator with the window and raster geometry the
    checkpointed model expects."""
    return dataclasses.replace(
        gen, cameras=mc.cameras, m=mc.m, stride=mc.stride,
        crop_side=mc.crop_side, ctx_size=mc.ctx_size,
        with_gm=mc.has("GM"), with_md=mc.has("MD"))


def _load_ckpt(path):
    ck = training.load_checkpoint(path)
    if not ck.best_params:
        raise IoError(f"checkpoint {path} holds no trained snapshot")
    return ck


def _split_samples(data_dir, split):
    data = synth.load_dataset(data_dir)
    samples = data.get(split) or []
    if not samples:
        raise EmptyDataset(f"split {split!r} of {data_dir} is empty")
    return samples


def _csv_ints(text):
    try:
        return tuple(int(p) for p in text.split(",") if p)
    except ValueError as e:
        raise BadConfig(f"expected comma-separated integers: {e}") from e


# --- subcommand handlers -------------------------------------------------

def _cmd_gen(args):
    t0 = time.perf_counter()
    ov = _overrides(args, "gen")
    gen = _apply(_GEN_PRESETS[args.preset](), ov, "gen")
    man = synth.emit_dataset(args.n, args.seed, args.out, gen)
    rows = [{"split": s, "count": c}
            for s, c in sorted(man["split_counts"].items())]
    metrics = {"n": man["n"], "digest": man["digest"],
               "files": len(man["files"])}
    src = {"gen": gen.to_dict(), "n": args.n, "seed": args.seed}
    return _emit(args, "gen", src, metrics, rows, ("split", "count"), t0,
                 footer=f"dataset digest {man['digest']}")


def _cmd_train(args):
    t0 = time.perf_counter()
    ov = _overrides(args, "model", "train")
    mc = _apply(_model_preset(args.preset, args.variant), ov, "model")
    tc = _apply(_train_preset(args.preset, args.variant, args.seed), ov,
                "train")
    data = synth.load_dataset(args.data)

    def progress(row):
        print(f"epoch {row['epoch']:3d}  train_loss {row['train_loss']:.4f}"
              f"  val_loss {row['val_loss']:.4f}  val_acc {row['val_acc']:.3f}",
              file=sys.stderr)

    ck = training.train(data, mc, tc, log=progress)
    training.save_checkpoint(ck, args.out)
    metrics = {"best_epoch": ck.best_epoch, "epochs_run": ck.epoch}
    metrics.update(ck.best_metrics)
    src = {"model": mc.to_dict(), "train": tc.to_dict()}
    cols = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc",
            "val_auc")
    return _emit(args, "train", src, metrics, ck.history, cols, t0,
                 footer=f"checkpoint written to {args.out}")


def _cmd_eval(args):
    t0 = time.perf_counter()
    _overrides(args)
    ck = _load_ckpt(args.ckpt)
    samples = _split_samples(args.data, args.split)
    rep = ev.evaluate(samples, ck.best_tensors(), ck.model_config,
                      threshold=args.threshold)
    metrics = {k: v for k, v in rep.to_dict().items() if k != "config"}
    cols = ("acc", "auc", "f1", "precision", "recall", "tp", "fp", "tn",
            "fn", "n", "threshold")
    src = {"model": ck.model_config.to_dict(), "split": args.split,
           "threshold": args.threshold}
    return _emit(args, "eval", src, metrics, [metrics], cols, t0)


def _cmd_etc(args):
    t0 = time.perf_counter()
    ov = _overrides(args, "gen")
    ck = _load_ckpt(args.ckpt)
    mc = ck.model_config
    preset = args.preset or ("beta" if mc.variant == "beta" else "desk")
    gen = _gen_for_model(_apply(_GEN_PRESETS[preset](), ov, "gen"), mc)
    horizons = tuple(args.horizon) if args.horizon else (1.0, 2.0, 3.0, 4.0)
    sets, skipped = synth.etc_dataset(gen, args.n, args.seed, horizons)
    rows = ev.etc_evaluate(ck.best_tensors(), mc, sets, skipped=skipped)
    metrics = {"skipped": skipped, "n_per_horizon": args.n}
    src = {"gen": gen.to_dict(), "model": mc.to_dict(), "seed": args.seed,
           "horizons": list(horizons)}
    cols = ("horizon_s", "n", "acc", "auc", "f1", "skipped")
    return _emit(args, "etc", src, metrics, rows, cols, t0)


def _cmd_ablate(args):
    t0 = time.perf_counter()
    ov = _overrides(args, "model", "train")
    mc = _apply(_model_preset(args.preset, "alpha"), ov, "model")
    tc = _apply(_train_preset(args.preset, "alpha", args.seed), ov, "train")
    variants = tuple(v for v in args.variants.split(",") if v)
    data = synth.load_dataset(args.data)

    def progress(row):
        print(f"variant {row['variant']}: acc {row['acc']:.3f}",
              file=sys.stderr)

    rows = ev.ablation_run(variants, data, mc, tc, it_passes=args.it_passes,
                           log=progress)
    best = max(rows, key=lambda r: (-1 if r["auc"] is None else r["auc"]))
    metrics = {"variants": len(rows), "best_variant": best["variant"]}
    src = {"model": mc.to_dict(), "train": tc.to_dict(),
           "variants": list(variants)}
    cols = ("variant", "GM", "LM", "MD", "CD", "acc", "auc", "f1", "n",
            "it_ms")
    return _emit(args, "ablate", src, metrics, rows, cols, t0)


def _cmd_sweep(args):
    t0 = time.perf_counter()
    ov = _overrides(args, "gen", "model", "train")
    gen = _apply(_GEN_PRESETS[args.preset](), ov, "gen")
    mc = _apply(_model_preset(args.preset if args.preset != "ablation"
                              else "desk", "alpha"), ov, "model")
    tc = _apply(_train_preset("desk", "alpha", args.seed), ov, "train")

    def progress(row):
        print(f"s={row['stride']} m={row['m']}: acc {row['acc']:.3f}",
              file=sys.stderr)

    rows = ev.temporal_sweep(gen, args.n, args.seed, mc, tc,
                             strides=args.strides, ms=args.ms,
                             it_passes=args.it_passes, log=progress)
    metrics = {"cells": len(rows), "note": ev.SWEEP_NOTE}
    src = {"gen": gen.to_dict(), "model": mc.to_dict(),
           "train": tc.to_dict(), "strides": list(args.strides),
           "ms": list(args.ms)}
    cols = ("stride", "m", "ot_s", "acc", "auc", "f1", "it_ms")
    return _emit(args, "sweep", src, metrics, rows, cols, t0,
                 footer=ev.SWEEP_NOTE)


def _cmd_gradcheck(args):
    t0 = time.perf_counter()
    _overrides(args)
    res = ev.run_gradcheck(include_models=not args.ops_only, eps=args.eps)
    rows = [{"check": k, "max_rel_err": res[k]} for k in sorted(res)]
    worst = max(res.values())
    metrics = {"checks": len(res), "max_rel_err": worst}
    src = {"eps": args.eps, "include_models": not args.ops_only}
    return _emit(args, "gradcheck", src, metrics, rows,
                 ("check", "max_rel_err"), t0,
                 footer=f"max rel-err: {worst:.3e}")


def _cmd_depthmap(args):
    t0 = time.perf_counter()
    ov = _overrides(args, "gen")
    gen = _apply(_GEN_PRESETS[args.preset](), ov, "gen")
    sc = synth.generate_scenario(np.random.default_rng([args.seed, 0, 0]),
                                 gen)
    t = args.frame
    if t is None:
        t = (sc.crossing_frame - 5 if sc.crossing_frame is not None
             else sc.duration // 2)
    pf = synth.render_frame(sc, t)
    fc = synth.camera_view(pf, gen, 0)
    cd = build_categorical_depth(fc.depth, fc.instances)
    rows = []
    for inst in fc.instances:
        if inst.cls in PED_CLASSES:
            ch = 0
        elif inst.cls in VEHICLE_CLASSES:
            ch = 1
        else:
            continue
        vals = cd[ch][inst.mask]
        rows.append({"instance_id": inst.instance_id, "cls": inst.cls,
                     "pixels": int(inst.mask.sum()),
                     "depth": (float(vals[0]) if vals.size else None)})
    bg = ~np.any([i.mask for i in fc.instances], axis=0) \
        if fc.instances else np.ones(fc.depth.shape, bool)
    metrics = {"scenario": sc.archetype, "frame": int(t),
               "instances": len(rows),
               "background_zero": bool(np.all(cd[:, bg] == 0.0))}
    if args.out:
        np.savez(args.out, categorical_depth=cd, depth=fc.depth)
        metrics["out"] = str(args.out)
    src = {"gen": gen.to_dict(), "seed": args.seed, "frame": int(t)}
    cols = ("instance_id", "cls", "pixels", "depth")
    return _emit(args, "depthmap", src, metrics, rows, cols, t0)


def _cmd_stitch(args):
    t0 = time.perf_counter()
    ov = _overrides(args, "gen")
    gen = _apply(_GEN_PRESETS[args.preset](), ov, "gen")
    layout = gen.layout()
    sc = synth.generate_scenario(np.random.default_rng([args.seed, 0, 0]),
                                 gen)
    t = gen.duration // 2
    pf = synth.render_frame(sc, t)
    views = [synth.camera_view(pf, gen, c).rgb for c in range(gen.cameras)]
    restitched = stitch(views, layout)
    rows = [{"camera": c, "crop_left": layout.crop_left[c],
             "offset": layout.offset[c], "kept_width": layout.kept_width[c]}
            for c in range(gen.cameras)]
    metrics = {"cameras": gen.cameras,
               "stitched_width": layout.stitched_width,
               "exact": bool(np.array_equal(restitched, pf.rgb))}
    if args.out:
        np.savez(args.out, stitched=restitched)
        metrics["out"] = str(args.out)
    src = {"gen": gen.to_dict(), "seed": args.seed}
    cols = ("camera", "crop_left", "offset", "kept_width")
    return _emit(args, "stitch", src, metrics, rows, cols, t0)


def _cmd_perm(args):
    t0 = time.perf_counter()
    _overrides(args)
    ck = _load_ckpt(args.ckpt)
    samples = _split_samples(args.data, args.split)
    features = tuple(f for f in args.feature.split(",") if f)
    rows = [ev.permutation_importance(
                samples, ck.best_tensors(), ck.model_config, f,
                np.random.default_rng([args.seed, i]),
                threshold=args.threshold)
            for i, f in enumerate(features)]
    metrics = {"features": len(rows), "n": len(samples)}
    src = {"model": ck.model_config.to_dict(), "split": args.split,
           "seed": args.seed, "features": list(features)}
    cols = ("feature", "n", "base_acc", "perm_acc", "delta_acc",
            "base_auc", "perm_auc", "delta_auc")
    return _emit(args, "perm", src, metrics, rows, cols, t0)


# --- parser --------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="pedcross",
                description="Pedestrian crossing-intention toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_text, func):
        sp = sub.add_parser(name, help=help_text)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON override file")
        sp.add_argument("--csv", help="also write the table to this path")
        return sp

    sp = cmd("gen", "render a dataset to disk", _cmd_gen)
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--out", required=True)
    sp.add_argument("--preset", choices=sorted(_GEN_PRESETS),
                    default="desk")

    sp = cmd("train", "train a model on an emitted dataset", _cmd_train)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", choices=("alpha", "beta"), default="alpha")
    sp.add_argument("--preset", choices=("desk", "reference"), default="desk")

    sp = cmd("eval", "score a checkpoint on one split", _cmd_eval)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"),
                    default="val")
    sp.add_argument("--threshold", type=float, default=0.5)

    sp = cmd("etc", "accuracy at growing lead times", _cmd_etc)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--horizon", type=float, action="append",
                    help="lead time in seconds; repeatable")
    sp.add_argument("--preset", choices=sorted(_GEN_PRESETS))

    sp = cmd("ablate", "train and score feature-toggle variants",
             _cmd_ablate)
    sp.add_argument("--data", required=True)
    sp.add_argument("--variants", default="a0,a1,a2,a3,a4,a5,a")
    sp.add_argument("--preset", choices=("desk", "reference"), default="desk")
    sp.add_argument("--it-passes", type=int, default=100)

    sp = cmd("sweep", "stride and window-length grid", _cmd_sweep)
    sp.add_argument("--n", type=int, default=300)
    sp.add_argument("--strides", type=_csv_ints, default=(1, 2, 3, 4, 5))
    sp.add_argument("--ms", type=_csv_ints, default=(10, 15, 20))
    sp.add_argument("--preset", choices=("desk", "ablation"),
                    default="desk")
    sp.add_argument("--it-passes", type=int, default=20)

    sp = cmd("gradcheck", "finite-difference audit of the gradients",
             _cmd_gradcheck)
    sp.add_argument("--ops-only", action="store_true")
    sp.add_argument("--eps", type=float, default=1e-3)

    sp = cmd("depthmap", "categorical depth of one rendered frame",
             _cmd_depthmap)
    sp.add_argument("--out", help="write rasters to this .npz")
    sp.add_argument("--frame", type=int)
    sp.add_argument("--preset", choices=sorted(_GEN_PRESETS),
                    default="desk")

    sp = cmd("stitch", "reassemble camera views into the panorama",
             _cmd_stitch)
    sp.add_argument("--out", help="write the panorama to this .npz")
    sp.add_argument("--preset", choices=sorted(_GEN_PRESETS),
                    default="beta")

    sp = cmd("perm", "permutation importance of named features", _cmd_perm)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--feature", required=True,
                    help="comma-separated feature names")
    sp.add_argument("--split", choices=("train", "val", "test"),
                    default="val")
    sp.add_argument("--threshold", type=float, default=0.5)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except PedcrossError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
