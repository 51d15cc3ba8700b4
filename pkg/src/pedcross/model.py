"""Crossing-intention network: kinematic GRU hierarchy, context encoders,
per-branch temporal attention, and a fused sigmoid head.

The single-camera and three-camera variants share all encoder wiring; the
three-camera variant first fuses per-camera context rasters with a
sentinel-aware pointwise mix, after which the stacks are identical.

Parameters live in a flat name -> Tensor map so checkpoints and gradient
checks can treat the whole model uniformly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (BadConfig, BadVariant, DimMismatch, MissingFeature,
                     UnknownFeature)
from .features import Sample
from .layers import (AttentionParams, GruParams, attention, dropout,
                     fully_connected, gru_sequence, init_attention, init_gru,
                     init_glorot, init_zeros)
from .multicam import aggregate, padding_mask
from .tensor import Tape, Tensor

KINEMATIC_FEATURES = ("bbox", "pose", "speed")
CONTEXT_FEATURES = ("local_content", "LM", "semantic", "CD", "GM", "MD")
ALL_FEATURES = KINEMATIC_FEATURES + CONTEXT_FEATURES

_KIN_DIMS = {"bbox": 4, "pose": 34, "speed": 1}

# context raster branches: (param prefix, toggle, sample field, channels)
_RASTERS = (("sc", "semantic", "e_sc", None),
            ("cd", "CD", "e_cd", 2),
            ("gm", "GM", "e_gm", 2),
            ("md", "MD", "e_md", 1))


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "alpha"
    cameras: int = 1
    m: int = 10
    stride: int = 2
    hidden: int = 256
    crop_side: int = 224
    ctx_size: int = 512
    classes: int = 19
    content_channels: tuple = (16, 32, 64)
    context_channels: tuple = (8, 8, 8)
    motion_channels: int = 8
    gru_depth: int = 1
    features: tuple = ("bbox", "pose", "speed", "local_content",
                       "semantic", "LM", "CD")
    dropout: float = 0.5
    speed_scale: float = 0.02
    flow_scale: float = 0.125
    # width of precomputed per-frame content vectors; replaces the conv
    # encoder when set, for configs fed by an external backbone
    content_features: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(sorted(set(self.features))))
        object.__setattr__(self, "content_channels",
                           tuple(self.content_channels))
        object.__setattr__(self, "context_channels",
                           tuple(self.context_channels))

    def has(self, feature: str) -> bool:
        return feature in self.features

    @property
    def context_schedule(self) -> tuple:
        s = self.ctx_size
        return (s, s // 2, s // 4, s // 8)

    @property
    def n_context_grus(self) -> int:
        return sum(self.has(f) for f in CONTEXT_FEATURES)

    @property
    def kinematic_order(self) -> tuple:
        return tuple(f for f in KINEMATIC_FEATURES if self.has(f))

    def validate(self):
        if self.variant not in ("alpha", "beta"):
            raise BadVariant(f"variant must be alpha or beta, got {self.variant!r}")
        want_cams = 3 if self.variant == "beta" else 1
        if self.cameras != want_cams:
            raise BadConfig(f"{self.variant} needs cameras={want_cams}, "
                            f"got {self.cameras}")
        for f in self.features:
            if f not in ALL_FEATURES:
                raise UnknownFeature(f"unknown feature toggle {f!r}")
        if not self.features:
            raise BadConfig("at least one feature must be enabled")
        for name in ("m", "stride", "hidden", "classes", "motion_channels",
                     "gru_depth"):
            if getattr(self, name) < 1:
                raise BadConfig(f"{name} must be >= 1")
        for name in ("crop_side", "ctx_size"):
            v = getattr(self, name)
            # three halvings happen inside the encoders
            if v < 8 or v % 8:
                raise BadConfig(f"{name} must be a positive multiple of 8")
        if len(self.content_channels) != 3 or len(self.context_channels) != 3:
            raise BadConfig("channel schedules need exactly 3 stages")
        if any(c < 1 for c in self.content_channels + self.context_channels):
            raise BadConfig("channel counts must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise BadConfig(f"dropout {self.dropout} outside [0, 1)")
        if self.content_features is not None and self.content_features < 1:
            raise BadConfig("content_features must be >= 1 when set")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["features"] = list(self.features)
        d["content_channels"] = list(self.content_channels)
        d["context_channels"] = list(self.context_channels)
        d["context_schedule"] = list(self.context_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        for key in ("features", "content_channels", "context_channels"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def desk_config(**overrides) -> ModelConfig:
    """Small single-camera setup that trains on a CPU in minutes."""
    base = dict(variant="alpha", cameras=1, m=10, stride=2, hidden=32,
                crop_side=32, ctx_size=64, content_channels=(16, 32, 64),
                context_channels=(8, 8, 8), motion_channels=8)
    base.update(overrides)
    return ModelConfig(**base)


def reference_alpha_config(**overrides) -> ModelConfig:
    base = dict(variant="alpha", cameras=1, m=10, stride=2, hidden=256,
                crop_side=224, ctx_size=512, dropout=0.5)
    base.update(overrides)
    return ModelConfig(**base)


def reference_beta_config(**overrides) -> ModelConfig:
    base = dict(variant="beta", cameras=3, m=10, stride=2, hidden=256,
                crop_side=224, ctx_size=512, dropout=0.5)
    base.update(overrides)
    return ModelConfig(**base)


def _raster_specs(config: ModelConfig):
    for prefix, toggle, fieldname, cin in _RASTERS:
        if config.has(toggle):
            yield prefix, fieldname, (config.classes if cin is None else cin)


def _gru_at(params: dict, prefix: str) -> GruParams:
    names = ("W_xz", "W_hz", "b_z", "W_xr", "W_hr", "b_r", "W_x", "W_h", "b")
    return GruParams(**{n: params[f"{prefix}/{n}"] for n in names})


def _att_at(params: dict, prefix: str) -> AttentionParams:
    return AttentionParams(W_p=params[f"{prefix}/W_p"],
                           W_c=params[f"{prefix}/W_c"])


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> dict:
    """Glorot-initialized parameter map, deterministic in seed.

    Only branches for enabled features exist; the single-camera variant
    carries no aggregation weights.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    h = config.hidden
    params: dict = {}

    def gru_chain(prefix, in_dim):
        for d in range(config.gru_depth):
            g = init_gru(in_dim if d == 0 else h, h, rng, dtype)
            for name, t in g.tensors().items():
                params[f"{prefix}/{d}/{name}"] = t

    def att(prefix, width):
        a = init_attention(width, h, rng, dtype)
        params[f"{prefix}/W_p"] = a.W_p
        params[f"{prefix}/W_c"] = a.W_c

    prev = 0
    for f in config.kinematic_order:
        gru_chain(f"kin/{f}", prev + _KIN_DIMS[f])
        prev = h

    s8 = config.crop_side // 8
    if config.has("local_content"):
        if config.content_features:
            gru_chain("content/gru", config.content_features)
        else:
            chans = (3,) + config.content_channels
            for i in range(3):
                params[f"content/conv{i + 1}/K"] = init_glorot(
                    (chans[i + 1], chans[i], 1, 3, 3), rng, dtype)
                params[f"content/conv{i + 1}/b"] = init_zeros(
                    (chans[i + 1],), dtype)
            gru_chain("content/gru", config.content_channels[-1] * s8 * s8)
    if config.has("LM"):
        params["motion/conv/K"] = init_glorot(
            (config.motion_channels, 2, 3, 3, 3), rng, dtype)
        params["motion/conv/b"] = init_zeros((config.motion_channels,), dtype)
        s4 = config.crop_side // 4
        gru_chain("motion/gru", config.motion_channels * s4 * s4)

    g8 = config.ctx_size // 8
    for prefix, _field, cin in _raster_specs(config):
        chans = (cin,) + config.context_channels
        for i in range(3):
            params[f"{prefix}/conv{i + 1}/K"] = init_glorot(
                (chans[i + 1], chans[i], 3, 3, 3), rng, dtype)
            params[f"{prefix}/conv{i + 1}/b"] = init_zeros(
                (chans[i + 1],), dtype)
        params[f"{prefix}/fc/W"] = init_glorot(
            (h, config.context_channels[-1] * g8 * g8), rng, dtype)
        params[f"{prefix}/fc/b"] = init_zeros((1, h), dtype)
        gru_chain(f"{prefix}/gru", h)
        if config.variant == "beta":
            params[f"agg/{prefix}/W"] = init_glorot(
                (cin, config.cameras * cin + config.cameras), rng, dtype)

    if config.kinematic_order:
        att("att/kin", h)
    if config.n_context_grus:
        att("att/ctx", h * config.n_context_grus)
    att("att/final", h)
    params["out/fc/W"] = init_glorot((1, h), rng, dtype)
    params["out/fc/b"] = init_zeros((1,), dtype)
    return params


def _time_major_flat(tape: Tape, vol: Tensor, m: int) -> Tensor:
    """(C, m, a, b) volume -> (m, C*a*b) per-timestep rows."""
    c, mm, a, b = vol.dims
    if mm != m:
        raise DimMismatch(f"volume carries {mm} steps, expected {m}")
    return tape.reshape(tape.transpose(vol, (1, 0, 2, 3)), (m, c * a * b))


def _row_bias(tape: Tape, X: Tensor, b: Tensor) -> Tensor:
    """Add a (1, n) bias row to every row of X (m, n)."""
    n = X.dims[1]
    flat = tape.reshape(b, (n,))
    return tape.transpose(tape.channel_bias(tape.transpose(X, (1, 0)), flat),
                          (1, 0))


def forward(sample: Sample, params: dict, config: ModelConfig,
            training: bool = False, rng=None, tape: Optional[Tape] = None
            ) -> Tensor:
    """Crossing probability as a (1, 1) tensor.

    Pass a recording Tape to train against the output; without one, a
    non-recording tape keeps evaluation cheap.  rng only feeds dropout.
    """
    config.validate()
    if tape is None:
        tape = Tape(record=False)
    if training and config.dropout > 0 and rng is None:
        raise BadConfig("training-mode forward needs an rng for dropout")
    dtype = next(iter(params.values())).dtype
    h, m = config.hidden, config.m

    def const(arr):
        return Tensor(np.asarray(arr), dtype=dtype)

    def need(name, arr, want_shape):
        if arr is None:
            raise MissingFeature(f"{name} is enabled but the sample lacks it")
        a = np.asarray(arr)
        if a.shape != want_shape:
            raise DimMismatch(f"{name}: expected {want_shape}, got {a.shape}")
        return a

    def gru_stack(prefix, X):
        for d in range(config.gru_depth):
            X = gru_sequence(tape, X, const(np.zeros((1, h))),
                             _gru_at(params, f"{prefix}/{d}"))
        return X

    branches = []

    seq = None
    for f in config.kinematic_order:
        if f == "bbox":
            arr = need("bbox", sample.p_bb, (m, 4))
        elif f == "pose":
            arr = need("pose", sample.p_bp, (m, 34))
        else:
            arr = need("speed", sample.v_s, (m, 1)) * config.speed_scale
        x = const(arr)
        inp = x if seq is None else tape.concat([seq, x], axis=1)
        seq = gru_stack(f"kin/{f}", inp)
    if seq is not None:
        branches.append(attention(tape, seq, _att_at(params, "att/kin")))

    ctx_seqs = []
    if config.has("local_content"):
        if config.content_features:
            feats = const(need("content features", sample.p_cf,
                               (m, config.content_features)))
        else:
            s = config.crop_side
            arr = need("local content", sample.p_lc, (m, s, s, 3))
            vol = const(np.transpose(arr, (3, 0, 1, 2)))
            for i in (1, 2, 3):
                vol = tape.conv3d(vol, params[f"content/conv{i}/K"],
                                  pad=(0, 1, 1))
                vol = tape.channel_bias(vol, params[f"content/conv{i}/b"])
                vol = tape.relu(vol)
                vol = tape.maxpool3d(vol, (1, 2, 2))
            feats = _time_major_flat(tape, vol, m)
        ctx_seqs.append(gru_stack("content/gru", feats))
    if config.has("LM"):
        s = config.crop_side
        arr = need("local motion", sample.p_lm, (m, s, s, 2))
        vol = const(np.transpose(arr, (3, 0, 1, 2)) * config.flow_scale)
        vol = tape.conv3d(vol, params["motion/conv/K"], pad=1)
        vol = tape.channel_bias(vol, params["motion/conv/b"])
        vol = tape.relu(vol)
        vol = tape.maxpool3d(vol, (1, 4, 4))
        ctx_seqs.append(gru_stack("motion/gru", _time_major_flat(tape, vol, m)))

    for prefix, fieldname, cin in _raster_specs(config):
        g = config.ctx_size
        scale = config.flow_scale if prefix == "gm" else 1.0
        raw = getattr(sample, fieldname)
        if config.variant == "beta":
            c = config.cameras
            arr = need(fieldname, raw, (m, c, cin, g, g))
            mask = const(padding_mask(c, sample.sentinel, g, g))
            w = params[f"agg/{prefix}/W"]
            steps = []
            for t in range(m):
                stacked = const(arr[t].reshape(c * cin, g, g) * scale)
                fused = aggregate(tape, stacked, mask, w)
                steps.append(tape.reshape(fused, (cin, 1, g, g)))
            vol = steps[0] if m == 1 else tape.concat(steps, axis=1)
        else:
            arr = need(fieldname, raw, (m, cin, g, g))
            vol = const(np.transpose(arr, (1, 0, 2, 3)) * scale)
        for i in (1, 2, 3):
            vol = tape.maxpool3d(vol, (1, 2, 2))
            vol = tape.conv3d(vol, params[f"{prefix}/conv{i}/K"], pad=1)
            vol = tape.channel_bias(vol, params[f"{prefix}/conv{i}/b"])
            vol = tape.relu(vol)
        flat = _time_major_flat(tape, vol, m)
        fc = tape.matmul(flat, params[f"{prefix}/fc/W"], transpose_b=True)
        fc = _row_bias(tape, fc, params[f"{prefix}/fc/b"])
        ctx_seqs.append(gru_stack(f"{prefix}/gru", fc))

    if ctx_seqs:
        ctx = ctx_seqs[0] if len(ctx_seqs) == 1 else tape.concat(ctx_seqs,
                                                                 axis=1)
        branches.append(attention(tape, ctx, _att_at(params, "att/ctx")))

    head = branches[0] if len(branches) == 1 else tape.concat(branches, axis=0)
    fused = attention(tape, head, _att_at(params, "att/final"))
    fused = dropout(tape, fused, config.dropout, rng, training)
    logit = fully_connected(tape, fused, params["out/fc/W"],
                            params["out/fc/b"])
    return tape.sigmoid(logit)


def predict(probability: float, threshold: float = 0.5) -> int:
    """1 means cross; the threshold itself counts as crossing."""
    return 1 if probability >= threshold else 0
