"""Deterministic street-scene generator and micro-renderer.

A scenario is a parametric timeline: an ego speed profile, one pedestrian
described by a lateral curb-distance profile d(t), obstacle vehicles, and
roadside props.  Everything is projected through a single wide pinhole
plane whose column windows are the cameras, so multi-camera stitching is
exact by construction.  The crossing label follows a declared kinematic
rule and stays re-derivable from stored state.

Scenario archetypes:
  crosser     drifts toward the curb, then commits and enters the road;
              ego is slow or braking, satisfying the rule.
  stander     waits at the roadside.
  along       walks parallel to the road.
  hesitater   drifts curbward but decays to a stop short of the road.
  distractor  moves exactly like a committing crosser but halts at the
              curb edge while the ego stays fast; only the ego-speed
              channel separates it from a real crosser early on.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadConfig, InsufficientHistory, IoError, OffCanvas
from .features import (CLASS_ID, CLASSES, FrameContext, Instance,
                       PedestrianTrack, Sample, area_downsample,
                       assemble_kinematic_seq, build_categorical_depth,
                       crop_local_content, crop_local_motion,
                       one_hot_context)
from .multicam import StitchLayout, camera_of_global_x, make_layout
from .tensor_io import read_pipt, tensor_to_bytes

ARCHETYPES = ("crosser", "stander", "along", "hesitater", "distractor")

# meters per frame for a speed in km/h at 30 fps
_KMH_TO_MPF = 1.0 / 108.0

_VEHICLE_SIZES = {"car": (1.8, 1.5), "truck": (2.4, 2.8), "bus": (2.5, 3.1),
                  "motorcycle": (0.8, 1.4), "bicycle": (0.6, 1.6)}
_PROP_SIZES = {"traffic light": (0.4, 2.6), "stop sign": (0.5, 1.8),
               "fire hydrant": (0.4, 0.8), "bench": (1.6, 0.9),
               "parking meter": (0.3, 1.3)}

_PALETTE = {
    "sky": (0.60, 0.75, 0.95), "building": (0.45, 0.42, 0.40),
    "vegetation": (0.18, 0.45, 0.22), "road": (0.32, 0.32, 0.34),
    "sidewalk": (0.55, 0.53, 0.50), "person": (0.78, 0.30, 0.26),
    "rider": (0.70, 0.35, 0.20), "car": (0.25, 0.35, 0.60),
    "truck": (0.50, 0.45, 0.40), "bus": (0.70, 0.45, 0.20),
    "motorcycle": (0.30, 0.30, 0.30), "bicycle": (0.25, 0.50, 0.45),
    "train": (0.40, 0.40, 0.45), "traffic light": (0.20, 0.20, 0.22),
    "stop sign": (0.60, 0.15, 0.15), "fire hydrant": (0.75, 0.20, 0.15),
    "bench": (0.45, 0.30, 0.20), "parking meter": (0.35, 0.35, 0.40),
    "handbag": (0.55, 0.35, 0.45),
}

# COCO keypoint order; heights in meters above ground, lateral offsets in
# meters from the body axis (left positive), swing amplitudes for the gait
_KP_H = np.array([1.58, 1.62, 1.62, 1.60, 1.60, 1.40, 1.40, 1.12, 1.12,
                  0.85, 0.85, 0.92, 0.92, 0.48, 0.48, 0.07, 0.07])
_KP_LAT = np.array([0.0, 0.04, -0.04, 0.08, -0.08, 0.18, -0.18, 0.16,
                    -0.16, 0.14, -0.14, 0.12, -0.12, 0.10, -0.10, 0.09,
                    -0.09])
_KP_SWING = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.12, 0.12,
                      -0.25, 0.25, 0.0, 0.0, 0.15, -0.15, 0.30, -0.30])


@dataclass(frozen=True)
class GenConfig:
    cameras: int = 1
    cam_width: int = 128
    cam_height: int = 128
    overlap: float = 0.11
    fps: int = 30
    duration: int = 170
    focal: float = 110.0
    cam_height_m: float = 1.2
    ped_height_m: float = 1.7
    road_half_m: float = 3.0
    z_scale: float = 20.0
    m: int = 10
    stride: int = 2
    crop_side: int = 32
    ctx_size: int = 64
    crossing_fraction: float = 0.35
    non_cross_weights: tuple = (0.31, 0.23, 0.23, 0.23)
    horizon_lo: float = 0.67
    horizon_hi: float = 2.0
    split_mode: str = "pie"       # pie: 50/40/10 train/test/val; urban: 80/20
    track_noise_px: float = 0.0
    flow_noise_px: float = 0.0    # per-frame bias+affine error on flow
    depth_jitter: float = 0.0     # relative per-instance depth error
    decouple_speed: bool = False
    cross_near: bool = False
    with_gm: bool = False
    with_md: bool = False

    def __post_init__(self):
        object.__setattr__(self, "non_cross_weights",
                           tuple(self.non_cross_weights))

    def validate(self):
        if self.cameras not in (1, 3):
            raise BadConfig(f"cameras must be 1 or 3, got {self.cameras}")
        if not 0.0 <= self.overlap < 0.5:
            raise BadConfig(f"overlap {self.overlap} outside [0, 0.5)")
        if not 0.0 < self.crossing_fraction < 1.0:
            raise BadConfig("crossing_fraction must lie in (0, 1)")
        if self.split_mode not in ("pie", "urban"):
            raise BadConfig(f"unknown split mode {self.split_mode!r}")
        if self.duration < 60:
            raise BadConfig("duration too short for the event timelines")
        if self.m < 1 or self.stride < 1:
            raise BadConfig("m and stride must be >= 1")
        if len(self.non_cross_weights) != 4 \
                or any(w < 0 for w in self.non_cross_weights):
            raise BadConfig("non_cross_weights needs 4 non-negative entries")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["non_cross_weights"] = list(self.non_cross_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        if "non_cross_weights" in kw:
            kw["non_cross_weights"] = tuple(kw["non_cross_weights"])
        return cls(**kw)

    def layout(self) -> StitchLayout:
        return make_layout(self.cameras, self.cam_width, self.cam_height,
                           self.overlap)


def default_gen(**overrides) -> GenConfig:
    """Desk recipe: boxes, keypoints, flow and depth all carry estimator
    noise, so the clean odometry channel is the one reliable readout of
    the ego state.  Distractors get the largest non-crosser share because
    they sit on the only class boundary that needs that channel."""
    base = dict(track_noise_px=1.2, flow_noise_px=1.5, depth_jitter=0.06,
                non_cross_weights=(0.25, 0.20, 0.20, 0.35))
    base.update(overrides)
    return GenConfig(**base)


def ablation_gen(**overrides) -> GenConfig:
    """Variant-comparison data: box and keypoint tracks are heavily
    jittered and ego speed carries no label signal, while flow and depth
    stay clean and the depth bands only partly separate the classes, so
    the motion and depth branches hold signal the baseline cannot
    recover from its noisy carriers."""
    base = dict(crossing_fraction=0.5, non_cross_weights=(0.15, 0.1, 0.15, 0.6),
                track_noise_px=4.0, decouple_speed=True, cross_near=True,
                horizon_hi=1.2, crop_side=16, ctx_size=32)
    base.update(overrides)
    return GenConfig(**base)


def beta_gen(**overrides) -> GenConfig:
    base = dict(cameras=3)
    base.update(overrides)
    return GenConfig(**base)


@dataclass
class InstanceSpec:
    cls: str
    instance_id: int
    x_m: float          # lateral center, meters, right of ego path
    z0_m: float         # longitudinal world position at frame 0
    v_z: float          # world meters per frame
    width_m: float
    height_m: float
    tint: float


@dataclass
class Scenario:
    seed: int
    gen: GenConfig
    archetype: str
    fps: int
    duration: int
    speed: np.ndarray          # (T,) ego km/h
    ego: np.ndarray            # (T,) ego position, meters
    d: np.ndarray              # (T,) pedestrian lateral curb distance
    v_lat: np.ndarray          # (T,) d[t] - d[t+1], last entry 0
    z: np.ndarray              # (T,) pedestrian distance ahead of ego
    phase: np.ndarray          # (T,) gait phase, radians
    vehicles: list
    props: list
    crossing_frame: Optional[int]
    label: int

    @property
    def ped_x(self) -> np.ndarray:
        return self.gen.road_half_m + self.d


def label_rule(d, v_lat, speed, crossing_frame) -> int:
    """The declared, re-derivable crossing rule.

    Crossing means: a frame cf exists where d first reaches 0, the lateral
    velocity stayed above 0.15 m/frame over the 5 frames before cf, the
    pedestrian was within 5 m at the start of that push, and the ego was
    either braking (lost over 1 km/h in the last second) or under 30 km/h.
    """
    if crossing_frame is None:
        return 0
    cf = int(crossing_frame)
    if cf < 6:
        return 0
    d = np.asarray(d, dtype=np.float64)
    v_lat = np.asarray(v_lat, dtype=np.float64)
    speed = np.asarray(speed, dtype=np.float64)
    if not np.all(v_lat[cf - 5:cf] > 0.15):
        return 0
    if not d[cf - 5] < 5.0:
        return 0
    decel = speed[cf] < speed[max(0, cf - 30)] - 1.0
    return 1 if (decel or speed[cf] < 30.0) else 0


def _wander(rng, T, amp=0.4):
    theta = rng.uniform(0.0, 2.0 * np.pi)
    return amp * np.sin(2.0 * np.pi * np.arange(T) / 47.0 + theta)


def _ego_fast(rng, T):
    return np.full(T, rng.uniform(38.0, 46.0))


def _ego_slow(rng, T):
    return np.full(T, rng.uniform(14.0, 26.0))


def _ego_decel(rng, T, event):
    s0 = rng.uniform(38.0, 50.0)
    s1 = rng.uniform(10.0, 22.0)
    onset = event - 110 + int(rng.integers(-8, 9))
    t = np.arange(T)
    ramp = s0 + (s1 - s0) * (t - onset) / max(event - onset, 1)
    return np.where(t <= onset, s0, np.where(t >= event, s1, ramp))


def _ego_nonevent(rng, T, gen):
    """Speed profile for a non-crosser.

    Fast-biased by default so ego speed separates crossers from the rest;
    the decoupled mode mirrors the crosser distribution instead, removing
    that signal on purpose.
    """
    if gen.decouple_speed:
        if rng.random() < 0.7:
            return _ego_decel(rng, T, int(rng.integers(141, 161)))
        return _ego_slow(rng, T)
    return _ego_fast(rng, T) if rng.random() < 0.65 else _ego_slow(rng, T)


def generate_scenario(rng, gen: GenConfig) -> Scenario:
    """Draw one labeled scenario; margins keep the label rule crisp."""
    gen.validate()
    T = gen.duration
    u = rng.random()
    if u < gen.crossing_fraction:
        arch = "crosser"
    else:
        w = np.array(gen.non_cross_weights, dtype=np.float64)
        w = w / w.sum()
        arch = ARCHETYPES[1 + int(rng.choice(4, p=w))]

    vel = rng.normal(0.0, 0.002, T - 1)
    v_own = 0.0
    cf_plan = None

    if arch == "crosser":
        cf_plan = int(rng.integers(141, 161))
        n_c = int(rng.integers(16, 25))
        v_c = rng.uniform(0.18, 0.28)
        t_drift = cf_plan - 100 + int(rng.integers(-8, 9))
        t_commit = cf_plan - n_c
        v_d = rng.uniform(0.05, 0.09)
        vel[t_drift:t_commit] = v_d + np.clip(
            rng.normal(0.0, 0.01, t_commit - t_drift), -0.025, 0.025)
        vel[t_commit:] = v_c + rng.uniform(-0.008, 0.008, T - 1 - t_commit)
        d0 = v_c * n_c + v_d * (t_commit - t_drift)
        speed = (_ego_decel(rng, T, cf_plan) if rng.random() < 0.7
                 else _ego_slow(rng, T))
    elif arch == "stander":
        vel = rng.normal(0.0, 0.0025, T - 1)
        d0 = rng.uniform(1.5, 8.0)
        speed = _ego_nonevent(rng, T, gen)
    elif arch == "along":
        vel = rng.normal(0.0, 0.003, T - 1)
        d0 = rng.uniform(0.6, 4.0)
        v_own = rng.uniform(-0.06, 0.06)
        speed = _ego_nonevent(rng, T, gen)
    elif arch == "hesitater":
        # approach ends by frame 90, before any anchor window can reach
        # back to it (earliest window start: 109 - 18), so windows always
        # see a pedestrian who already gave up; an approach still underway
        # there is indistinguishable from a crosser's drift
        o_h = int(rng.integers(30, 51))
        n_h = int(rng.integers(25, 41))
        v_h = rng.uniform(0.05, 0.10)
        t = np.arange(T - 1)
        ramp = v_h * np.clip(1.0 - (t - o_h) / n_h, 0.0, 1.0)
        ramp[t < o_h] = 0.0
        vel = vel + ramp
        d_stop = rng.uniform(0.8, 3.0)
        d0 = d_stop + v_h * n_h / 2.0 + rng.uniform(0.0, 0.5)
        speed = _ego_nonevent(rng, T, gen)
    else:   # distractor
        # Mirrors the crosser's pedestrian draws (timing, drift, push) so
        # the window kinematics overlap class-for-class; the halt at the
        # curb and the ego that stays fast until the pedestrian's event
        # are what tell the two apart.
        ef = int(rng.integers(141, 161))
        n_c = int(rng.integers(16, 25))
        v_c = rng.uniform(0.18, 0.28)
        t_drift = ef - 100 + int(rng.integers(-8, 9))
        t_commit = ef - n_c
        v_d = rng.uniform(0.05, 0.09)
        vel[t_drift:t_commit] = v_d + np.clip(
            rng.normal(0.0, 0.01, t_commit - t_drift), -0.025, 0.025)
        vel[t_commit:ef] = v_c + rng.uniform(-0.008, 0.008, ef - t_commit)
        vel[ef:] = 0.0
        d_stop = rng.uniform(0.25, 0.8)
        d0 = d_stop + v_c * n_c + v_d * (t_commit - t_drift)
        if gen.decouple_speed:
            # ego mirrors the crosser distribution like every other
            # non-crosser, so nothing kinematic tells the pair apart
            speed = _ego_nonevent(rng, T, gen)
        else:
            # hard stop shortly after the halt; a handful of late anchors
            # see its onset, which only reinforces that a braking ego next
            # to a halted pedestrian is still a non-crossing scene
            s0 = rng.uniform(38.0, 46.0)
            brake_on = ef + int(rng.integers(2, 6))
            brake_n = int(rng.integers(10, 17))
            tt = np.arange(T)
            speed = s0 * np.clip(1.0 - (tt - brake_on) / brake_n, 0.0, 1.0)

    speed = np.maximum(speed + _wander(rng, T), 4.0)
    ego = np.concatenate([[0.0], np.cumsum(speed[:-1] * _KMH_TO_MPF)])

    d = d0 - np.concatenate([[0.0], np.cumsum(vel)])
    if arch == "crosser":
        d = np.maximum(d, -2.0)
    elif arch in ("hesitater", "distractor"):
        d = np.maximum(d, d_stop)
    crossing = np.flatnonzero(d <= 0.0)
    cf = int(crossing[0]) if crossing.size else None

    if arch == "crosser":
        z_event = rng.uniform(8.0, 15.0) if gen.cross_near \
            else rng.uniform(9.0, 16.0)
        zw = z_event + ego[cf if cf is not None else cf_plan]
        z = zw - ego
    elif arch == "distractor":
        # Drawn nearer than the crosser band on purpose: the fast ego
        # covers far more road between anchor and event, so matching
        # event depths would hand anchor windows a size shortcut.  The
        # late hard stop keeps the ego short of this plane.  The
        # decoupled band sits almost inside the crosser band instead: a
        # slow mirrored ego covers little road, and the residual offset
        # is what the exact depth readout can resolve.
        z_event = rng.uniform(8.5, 13.0) if gen.decouple_speed \
            else rng.uniform(7.0, 11.0)
        zw = z_event + ego[ef]
        z = zw - ego
    else:
        # cross_near bands overlap on purpose: apparent size settles only
        # part of the class question, the rest needs the motion read
        z_end = rng.uniform(12.0, 26.0) if gen.cross_near \
            else rng.uniform(9.0, 30.0)
        zw = z_end + ego[T - 1] - v_own * (T - 1)
        z = zw + v_own * np.arange(T) - ego

    v_lat = np.append(d[:-1] - d[1:], 0.0)
    label = label_rule(d, v_lat, speed, cf)
    if label != (1 if arch == "crosser" else 0):
        raise RuntimeError(
            f"generator margin violated: archetype {arch} got label {label}")

    ground_speed = np.abs(v_lat) + abs(v_own)
    phase = rng.uniform(0.0, 2.0 * np.pi) + np.concatenate(
        [[0.0], np.cumsum(2.0 * np.pi * ground_speed[:-1] / 1.1)])

    zw_ped = z + ego
    vehicles = []
    for i in range(int(rng.integers(1, 4))):
        for _attempt in range(20):
            if rng.random() < 0.5:
                x = rng.uniform(-5.5, -3.8)
                vz = -rng.uniform(0.25, 0.55)
                z0 = rng.uniform(25.0, ego[-1] + 60.0)
            else:
                x = rng.uniform(4.4, 6.0)
                vz = 0.0
                z0 = rng.uniform(12.0, ego[-1] + 40.0)
            zv = z0 + vz * np.arange(T)
            if np.min(np.abs(zv - zw_ped)) >= 8.0:
                cls = str(rng.choice(("car", "car", "car", "truck", "bus",
                                      "motorcycle", "bicycle")))
                wm, hm = _VEHICLE_SIZES[cls]
                vehicles.append(InstanceSpec(cls, 10 + i, x, z0, vz, wm, hm,
                                             rng.uniform(0.75, 1.25)))
                break

    props = []
    for i in range(int(rng.integers(0, 3))):
        cls = str(rng.choice(tuple(_PROP_SIZES)))
        wm, hm = _PROP_SIZES[cls]
        props.append(InstanceSpec(cls, 40 + i, rng.uniform(3.6, 5.2),
                                  rng.uniform(12.0, ego[-1] + 40.0), 0.0,
                                  wm, hm, rng.uniform(0.85, 1.15)))

    return Scenario(seed=int(rng.integers(2 ** 62)), gen=gen,
                    archetype=arch, fps=gen.fps, duration=T, speed=speed,
                    ego=ego, d=d, v_lat=v_lat, z=z, phase=phase,
                    vehicles=vehicles, props=props, crossing_frame=cf,
                    label=label)


def _keypoints(sc: Scenario, lay: StitchLayout) -> np.ndarray:
    """(T, 34) projected keypoints; off-canvas points become (0, 0)."""
    gen = sc.gen
    f, cy = gen.focal, gen.cam_height / 2.0
    cx = lay.stitched_width / 2.0
    z = np.maximum(sc.z, 0.5)[:, None]
    swing = np.sin(sc.phase)[:, None]
    xm = sc.ped_x[:, None] + _KP_LAT[None, :] + _KP_SWING[None, :] * swing
    xs = cx + f * xm / z
    ys = cy + f * (gen.cam_height_m - _KP_H[None, :]) / z
    bad = ((xs < 0) | (xs >= lay.stitched_width) | (ys < 0)
           | (ys >= gen.cam_height) | (sc.z[:, None] <= 2.0))
    xs = np.where(bad, 0.0, xs)
    ys = np.where(bad, 0.0, ys)
    out = np.empty((sc.duration, 34))
    out[:, 0::2] = xs
    out[:, 1::2] = ys
    return out


def _ped_rect(sc: Scenario, lay: StitchLayout, t: int):
    gen = sc.gen
    f, cy = gen.focal, gen.cam_height / 2.0
    cx = lay.stitched_width / 2.0
    z = max(float(sc.z[t]), 0.5)
    x = float(sc.ped_x[t])
    half = (0.5 + 0.12 * abs(np.sin(float(sc.phase[t])))) / 2.0
    y2 = cy + f * gen.cam_height_m / z
    return (cx + f * (x - half) / z, y2 - f * gen.ped_height_m / z,
            cx + f * (x + half) / z, y2)


def scenario_track(sc: Scenario) -> PedestrianTrack:
    """Full-length observed track; optional pixel noise models detector
    error without touching the kinematic state the label rule reads."""
    gen = sc.gen
    lay = gen.layout()
    T = sc.duration
    bbox = np.array([_ped_rect(sc, lay, t) for t in range(T)])
    pose = _keypoints(sc, lay)
    if gen.track_noise_px > 0:
        nrng = np.random.default_rng([sc.seed, 7])
        bbox = bbox + nrng.normal(0.0, gen.track_noise_px, bbox.shape)
        bbox[:, 2] = np.maximum(bbox[:, 2], bbox[:, 0] + 1.0)
        bbox[:, 3] = np.maximum(bbox[:, 3], bbox[:, 1] + 1.0)
        jitter = nrng.normal(0.0, gen.track_noise_px, pose.shape)
        pose = np.where(pose == 0.0, 0.0, pose + jitter)
    center = (bbox[:, 0] + bbox[:, 2]) / 2.0
    visible = ((center >= 0) & (center < lay.stitched_width)
               & (sc.z > 2.0))
    cam = np.array([camera_of_global_x(
        min(max(float(c), 0.0), lay.stitched_width - 1e-6), lay)
        for c in center], dtype=np.int64)
    return PedestrianTrack(ped_id=1, first_frame=0, bbox=bbox, pose=pose,
                           camera_index=cam, visible=visible,
                           label=sc.label, crossing_frame=sc.crossing_frame)


_STATIC_CACHE: dict = {}


def _static_layers(gen: GenConfig, lay: StitchLayout):
    key = (gen.cam_height, lay.stitched_width, gen.focal, gen.road_half_m,
           gen.z_scale, gen.cam_height_m)
    hit = _STATIC_CACHE.get(key)
    if hit is not None:
        return hit
    H, Wp = gen.cam_height, lay.stitched_width
    cy, cx = H / 2.0, Wp / 2.0
    rows = np.arange(H) + 0.5
    cols = np.arange(Wp) + 0.5
    sem = np.full((H, Wp), CLASS_ID["sky"], dtype=np.int16)
    band = (rows >= cy - 24) & (rows < cy)
    sem[band] = CLASS_ID["building"]
    veg_cols = (np.arange(Wp) % 96) < 20
    sem[np.ix_(band, veg_cols)] = CLASS_ID["vegetation"]
    ground = rows > cy
    z_row = np.full(H, np.inf)
    z_row[band] = 80.0
    z_row[ground] = gen.focal * gen.cam_height_m / (rows[ground] - cy)
    road_half_px = gen.focal * gen.road_half_m / z_row[:, None]
    on_road = ground[:, None] & (np.abs(cols[None, :] - cx) <= road_half_px)
    sem[ground] = CLASS_ID["sidewalk"]
    sem[on_road] = CLASS_ID["road"]
    depth = np.zeros((H, Wp), dtype=np.float32)
    finite = np.isfinite(z_row)
    depth[finite] = (1.0 / (1.0 + z_row[finite] / gen.z_scale)
                     )[:, None] * np.ones(Wp, dtype=np.float64)
    rgb = np.zeros((H, Wp, 3), dtype=np.float32)
    for name in ("sky", "building", "vegetation", "road", "sidewalk"):
        rgb[sem == CLASS_ID[name]] = _PALETTE[name]
    out = (sem, depth, rgb, z_row, cy, cx)
    _STATIC_CACHE[key] = out
    return out


@dataclass
class PlaneFrame:
    """All rasters for one frame on the full camera plane."""

    rgb: np.ndarray
    depth: np.ndarray
    flow: np.ndarray
    sem: np.ndarray        # class indices
    ids: np.ndarray        # instance ids, 0 = none
    boxes: list            # (cls, instance_id, x1, y1, x2, y2) paint order

    def instances(self) -> list:
        out = []
        for cls, iid, *_rect in self.boxes:
            mask = self.ids == iid
            if mask.any():
                out.append(Instance(cls, iid, mask))
        return out


def _inst_rect(spec: InstanceSpec, sc: Scenario, t: int):
    gen = sc.gen
    lay = gen.layout()
    f, cy, cx = gen.focal, gen.cam_height / 2.0, lay.stitched_width / 2.0
    z = spec.z0_m + spec.v_z * t - sc.ego[t]
    if not 1.5 <= z <= 250.0:
        return None, z
    y2 = cy + f * gen.cam_height_m / z
    y1 = y2 - f * spec.height_m / z
    x1 = cx + f * (spec.x_m - spec.width_m / 2.0) / z
    x2 = cx + f * (spec.x_m + spec.width_m / 2.0) / z
    return (x1, y1, x2, y2), z


def render_frame(sc: Scenario, t: int) -> PlaneFrame:
    gen = sc.gen
    lay = gen.layout()
    H, Wp = gen.cam_height, lay.stitched_width
    sem0, depth0, rgb0, z_row, cy, cx = _static_layers(gen, lay)
    sem = sem0.copy()
    depth = depth0.copy()
    rgb = rgb0.copy()
    ids = np.zeros((H, Wp), dtype=np.int16)

    # static-world flow from ego motion: every surface point moves by the
    # same longitudinal step, which projects to a radial pattern
    step = float(sc.speed[t - 1]) * _KMH_TO_MPF if t >= 1 else 0.0
    factor = np.where(np.isfinite(z_row), step / (z_row + step), 0.0)
    flow = np.empty((H, Wp, 2), dtype=np.float32)
    flow[..., 0] = factor[:, None] * (np.arange(Wp) + 0.5 - cx)
    flow[..., 1] = (factor * (np.arange(H) + 0.5 - cy))[:, None]
    frng = (np.random.default_rng([sc.seed, 11, t])
            if gen.depth_jitter > 0.0 or gen.flow_noise_px > 0.0 else None)

    entries = []
    for spec in sc.vehicles + sc.props:
        rect, z = _inst_rect(spec, sc, t)
        if rect is not None:
            prev, _zp = _inst_rect(spec, sc, t - 1) if t >= 1 else (None, 0)
            color = np.clip(np.array(_PALETTE[spec.cls]) * spec.tint, 0, 1)
            entries.append((z, spec.cls, spec.instance_id, rect, prev, color))
    pz = float(sc.z[t])
    if 1.5 <= pz <= 250.0:
        rect = _ped_rect(sc, lay, t)
        prev = _ped_rect(sc, lay, t - 1) if t >= 1 else None
        entries.append((pz, "person", 1, rect, prev,
                        np.array(_PALETTE["person"])))

    boxes = []
    zs = gen.z_scale
    for z, cls, iid, rect, prev, color in sorted(entries,
                                                 key=lambda e: -e[0]):
        x1, y1, x2, y2 = rect
        xa, ya = max(int(np.floor(x1)), 0), max(int(np.floor(y1)), 0)
        xb, yb = min(int(np.ceil(x2)), Wp), min(int(np.ceil(y2)), H)
        if xa >= xb or ya >= yb:
            continue
        region = (slice(ya, yb), slice(xa, xb))
        sem[region] = CLASS_ID[cls]
        ids[region] = iid
        zd = z * (1.0 + frng.normal(0.0, gen.depth_jitter)) \
            if frng is not None and gen.depth_jitter > 0.0 else z
        depth[region] = 1.0 / (1.0 + zd / zs)
        rgb[region] = color
        if prev is not None:
            # each pixel follows its body point: affine in normalized
            # rect coordinates, exact for translation plus scaling
            px1, py1, px2, py2 = prev
            ax = (np.arange(xa, xb) + 0.5 - x1) / max(x2 - x1, 1e-9)
            ay = (np.arange(ya, yb) + 0.5 - y1) / max(y2 - y1, 1e-9)
            fx = (np.arange(xa, xb) + 0.5) - (px1 + ax * (px2 - px1))
            fy = (np.arange(ya, yb) + 0.5) - (py1 + ay * (py2 - py1))
            flow[region[0], region[1], 0] = fx[None, :]
            flow[region[0], region[1], 1] = fy[:, None]
        else:
            flow[region][...] = 0.0
        boxes.append((cls, iid, xa, ya, xb, yb))

    if frng is not None and gen.flow_noise_px > 0.0:
        # low-frequency estimator error: a per-frame bias plus a random
        # affine field, so apparent-motion rates stop being a clean
        # odometry readout; iid pixel noise would just average back out
        bias = frng.normal(0.0, gen.flow_noise_px, 2)
        lin = frng.normal(0.0, gen.flow_noise_px / 30.0, (2, 2))
        xx = np.arange(Wp, dtype=np.float32) + 0.5 - cx
        yy = np.arange(H, dtype=np.float32) + 0.5 - cy
        flow[..., 0] += bias[0] + lin[0, 0] * xx[None, :] \
            + lin[0, 1] * yy[:, None]
        flow[..., 1] += bias[1] + lin[1, 0] * xx[None, :] \
            + lin[1, 1] * yy[:, None]

    if 1.5 <= pz <= 250.0:
        kps = _keypoints(sc, lay)[t].reshape(17, 2)
        dark = np.array(_PALETTE["person"]) * 0.3
        for kx, ky in kps:
            if kx == 0.0 and ky == 0.0:
                continue
            xi, yi = int(kx), int(ky)
            r = (slice(max(yi - 1, 0), min(yi + 2, H)),
                 slice(max(xi - 1, 0), min(xi + 2, Wp)))
            patch = ids[r] == 1
            rgb[r][patch] = dark
    return PlaneFrame(rgb=rgb, depth=depth, flow=flow, sem=sem, ids=ids,
                      boxes=boxes)


def camera_view(pf: PlaneFrame, gen: GenConfig, cam: int) -> FrameContext:
    lay = gen.layout()
    lo = lay.offset[cam] - lay.crop_left[cam]
    win = slice(lo, lo + gen.cam_width)
    insts = []
    for cls, iid, *_rect in pf.boxes:
        mask = pf.ids[:, win] == iid
        if mask.any():
            insts.append(Instance(cls, iid, mask))
    return FrameContext(rgb=pf.rgb[:, win], depth=pf.depth[:, win],
                        instances=insts, flow=pf.flow[:, win])


def render_features(sc: Scenario, frames):
    """Per-camera FrameContexts for the requested frames, plus the track."""
    contexts = {int(f): [camera_view(render_frame(sc, int(f)), sc.gen, c)
                         for c in range(sc.gen.cameras)]
                for f in frames}
    return contexts, scenario_track(sc)


def window_frames(t: int, m: int, stride: int) -> list:
    return [t - (m - 1 - i) * stride for i in range(m)]


def assemble_from_planes(planes: dict, track: PedestrianTrack, speeds,
                         t: int, gen: GenConfig) -> Sample:
    """Build the model-ready sample whose window ends at frame t."""
    lay = gen.layout()
    m, s = gen.m, gen.stride
    frames = window_frames(t, m, s)
    if frames[0] < track.first_frame or t > track.last_frame:
        raise InsufficientHistory(
            f"window [{frames[0]}, {t}] outside track")
    for f in frames:
        if not track.visible[track.row(f)]:
            raise OffCanvas(f"pedestrian not visible at frame {f}")
    hw = (gen.cam_height, lay.stitched_width)
    p_bb, p_bp, v_s = assemble_kinematic_seq(track, speeds, t, m, s, hw)

    S, g, c = gen.crop_side, gen.ctx_size, gen.cameras
    p_lc = np.empty((m, S, S, 3), dtype=np.float16)
    p_lm = np.empty((m, S, S, 2), dtype=np.float16)
    e_sc = np.empty((m, c, len(CLASSES), g, g), dtype=np.float16)
    e_cd = np.empty((m, c, 2, g, g), dtype=np.float16)
    e_gm = np.empty((m, c, 2, g, g), dtype=np.float16) if gen.with_gm else None
    e_md = np.empty((m, c, 1, g, g), dtype=np.float16) if gen.with_md else None

    for i, f in enumerate(frames):
        pf = planes[f]
        bbox = track.bbox[track.row(f)]
        p_lc[i] = crop_local_content(pf.rgb, bbox, S)
        p_lm[i] = crop_local_motion(pf.flow, bbox, S)
        for cam in range(c):
            lo = lay.offset[cam] - lay.crop_left[cam]
            win = slice(lo, lo + gen.cam_width)
            e_sc[i, cam] = one_hot_context(pf.sem[:, win], (g, g))
            insts = [Instance(cls, iid, pf.ids[:, win] == iid)
                     for cls, iid, *_r in pf.boxes]
            insts = [x for x in insts if x.mask.any()]
            cd = build_categorical_depth(pf.depth[:, win], insts)
            e_cd[i, cam] = area_downsample(cd, (g, g))
            if e_gm is not None:
                e_gm[i, cam] = area_downsample(
                    np.transpose(pf.flow[:, win], (2, 0, 1)), (g, g))
            if e_md is not None:
                e_md[i, cam] = area_downsample(pf.depth[None, :, win], (g, g))

    def squeeze(arr):
        if arr is None:
            return None
        return arr[:, 0] if c == 1 else arr

    row_t = track.row(t)
    return Sample(p_bb=p_bb, p_bp=p_bp, v_s=v_s,
                  p_lc=p_lc, p_lm=p_lm,
                  e_sc=squeeze(e_sc), e_cd=squeeze(e_cd),
                  e_gm=squeeze(e_gm), e_md=squeeze(e_md),
                  sentinel=int(track.camera_index[row_t]),
                  label=int(track.label))


def build_sample(sc: Scenario, track: PedestrianTrack, t: int) -> Sample:
    frames = window_frames(t, sc.gen.m, sc.gen.stride)
    planes = {f: render_frame(sc, f) for f in frames}
    return assemble_from_planes(planes, track, sc.speed, t, sc.gen)


def _anchor_frame(sc: Scenario, rng, gen: GenConfig) -> int:
    horizon = rng.uniform(gen.horizon_lo, gen.horizon_hi)
    event = sc.crossing_frame if sc.crossing_frame is not None \
        else sc.duration - 1
    return int(event) - int(round(horizon * gen.fps))


def _split_slots(gen: GenConfig, n: int) -> list:
    if gen.split_mode == "pie":
        n_tr, n_te = int(0.5 * n), int(0.4 * n)
        return (["train"] * n_tr + ["test"] * n_te
                + ["val"] * (n - n_tr - n_te))
    n_tr = int(0.8 * n)
    return ["train"] * n_tr + ["val"] * (n - n_tr)


def _scenario_stream(gen: GenConfig, seed: int, tag: int):
    """Endless deterministic stream of (scenario, track, anchor rng)."""
    idx = 0
    while True:
        rng = np.random.default_rng([seed, tag, idx])
        idx += 1
        sc = generate_scenario(rng, gen)
        yield sc, scenario_track(sc), rng


def build_dataset(gen: GenConfig, n: int, seed: int) -> dict:
    """n in-memory samples split per the configured protocol."""
    gen.validate()
    if n < 1:
        raise BadConfig("need n >= 1")
    slots = _split_slots(gen, n)
    out = {"train": [], "val": [], "test": []}
    made = 0
    for sc, track, rng in _scenario_stream(gen, seed, 0):
        t = _anchor_frame(sc, rng, gen)
        try:
            sample = build_sample(sc, track, t)
        except (OffCanvas, InsufficientHistory):
            continue
        out[slots[made]].append(sample)
        made += 1
        if made == n:
            break
    return out


def etc_dataset(gen: GenConfig, n: int, seed: int,
                horizons=(1.0, 2.0, 3.0, 4.0)):
    """n scenarios, one sample per horizon each; skipped scenarios counted.

    The anchor sits horizon seconds before the crossing frame, or before
    the final frame for non-crossers, so every horizon set contains the
    same scenarios and differences isolate the lead time.
    """
    gen.validate()
    out = {float(h): [] for h in horizons}
    skipped = 0
    made = 0
    for sc, track, _rng in _scenario_stream(gen, seed, 1):
        event = sc.crossing_frame if sc.crossing_frame is not None \
            else sc.duration - 1
        try:
            batch = {}
            for h in horizons:
                t = int(event) - int(round(float(h) * gen.fps))
                batch[float(h)] = build_sample(sc, track, t)
        except (OffCanvas, InsufficientHistory):
            skipped += 1
            continue
        for h, smp in batch.items():
            out[h].append(smp)
        made += 1
        if made == n:
            break
    return out, skipped


def canonical_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def emit_dataset(n: int, seed: int, out_dir, gen: GenConfig) -> dict:
    """Write raw renders, annotations, and a digest-bearing manifest."""
    gen.validate()
    if n < 10:
        raise BadConfig("emit needs n >= 10 so every split is non-empty")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {root}: {e}") from e
    files = {}

    def put(rel: str, data: bytes):
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            path.write_bytes(data)
        except OSError as e:
            raise IoError(f"cannot write {path}: {e}") from e
        files[rel] = hashlib.sha256(data).hexdigest()

    slots = _split_slots(gen, n)
    annotations = []
    made = 0
    for sc, track, rng in _scenario_stream(gen, seed, 0):
        t = _anchor_frame(sc, rng, gen)
        frames = window_frames(t, gen.m, gen.stride)
        try:
            if frames[0] < 1:
                raise InsufficientHistory("window reaches frame 0")
            for f in frames:
                if not track.visible[track.row(f)]:
                    raise OffCanvas(f"not visible at {f}")
        except (OffCanvas, InsufficientHistory):
            continue
        split = slots[made]
        scene = f"scenes/{made:05d}"
        inst_index = {}
        for f in frames:
            pf = render_frame(sc, f)
            for kind, arr in (("rgb", pf.rgb), ("depth", pf.depth),
                              ("flow", pf.flow),
                              ("sem", pf.sem.astype(np.float32))):
                put(f"{scene}/f{f:03d}.{kind}.pipt", tensor_to_bytes(arr))
            inst_index[str(f)] = [[cls, iid, xa, ya, xb, yb]
                                  for cls, iid, xa, ya, xb, yb in pf.boxes]
        put(f"{scene}/instances.json",
            json.dumps(inst_index, sort_keys=True).encode())
        for f in range(frames[0], t + 1):
            r = track.row(f)
            annotations.append({
                "scene": made, "frame": int(f),
                "cam": int(track.camera_index[r]), "ped_id": track.ped_id,
                "bbox": [float(v) for v in track.bbox[r]],
                "pose": [float(v) for v in track.pose[r]],
                "speed": float(sc.speed[f]), "label": int(sc.label),
                "crossing_frame": (None if sc.crossing_frame is None
                                   else int(sc.crossing_frame)),
                "split": split})
        made += 1
        if made == n:
            break

    put("annotations.jsonl",
        "\n".join(json.dumps(r, sort_keys=True) for r in annotations)
        .encode() + b"\n")
    meta = {"format": 1, "n": n, "seed": seed,
            "config": gen.to_dict(),
            "split_counts": {k: slots.count(k) for k in set(slots)}}
    manifest = dict(meta)
    manifest["files"] = files
    manifest["digest"] = canonical_digest({"meta": meta, "files": files})
    put_path = root / "manifest.json"
    put_path.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_dataset(data_dir) -> dict:
    """Rebuild split sample lists from an emitted directory.

    Runs the exact assembly path used in memory, so training on a loaded
    dataset matches training on the generating process bit for bit.
    """
    root = Path(data_dir)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except OSError as e:
        raise IoError(f"cannot read manifest in {root}: {e}") from e
    gen = GenConfig.from_dict(manifest["config"])
    by_scene: dict = {}
    try:
        lines = (root / "annotations.jsonl").read_text().splitlines()
    except OSError as e:
        raise IoError(f"cannot read annotations: {e}") from e
    for line in lines:
        if line.strip():
            rec = json.loads(line)
            by_scene.setdefault(rec["scene"], []).append(rec)

    out = {"train": [], "val": [], "test": []}
    for scene in sorted(by_scene):
        recs = sorted(by_scene[scene], key=lambda r: r["frame"])
        t = recs[-1]["frame"]
        first = recs[0]["frame"]
        frames = window_frames(t, gen.m, gen.stride)
        speeds = np.zeros(t + 1)
        T = t - first + 1
        bbox = np.zeros((T, 4))
        pose = np.zeros((T, 34))
        cam = np.zeros(T, dtype=np.int64)
        for r in recs:
            i = r["frame"] - first
            bbox[i] = r["bbox"]
            pose[i] = r["pose"]
            cam[i] = r["cam"]
            speeds[r["frame"]] = r["speed"]
        track = PedestrianTrack(
            ped_id=recs[0]["ped_id"], first_frame=first, bbox=bbox,
            pose=pose, camera_index=cam, visible=np.ones(T, dtype=bool),
            label=recs[0]["label"], crossing_frame=recs[0]["crossing_frame"])
        scene_dir = root / f"scenes/{scene:05d}"
        inst_index = json.loads((scene_dir / "instances.json").read_text())
        planes = {}
        for f in frames:
            rgb = read_pipt(scene_dir / f"f{f:03d}.rgb.pipt")
            depth = read_pipt(scene_dir / f"f{f:03d}.depth.pipt")
            flow = read_pipt(scene_dir / f"f{f:03d}.flow.pipt")
            sem = read_pipt(scene_dir / f"f{f:03d}.sem.pipt").astype(np.int16)
            ids = np.zeros(sem.shape, dtype=np.int16)
            boxes = []
            for cls, iid, xa, ya, xb, yb in inst_index[str(f)]:
                ids[ya:yb, xa:xb] = iid
                boxes.append((cls, iid, xa, ya, xb, yb))
            planes[f] = PlaneFrame(rgb=rgb, depth=depth, flow=flow,
                                   sem=sem, ids=ids, boxes=boxes)
        sample = assemble_from_planes(planes, track, speeds, t, gen)
        out[recs[0]["split"]].append(sample)
    return out
