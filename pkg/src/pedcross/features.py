"""Input assembly: kinematic sequences, local crops, and context rasters.

Pure transforms from per-frame scene records to the fixed-size arrays the
model consumes.  Canvas coordinates are pixels in the stitched panorama;
normalized quantities live in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (BadConfig, DegenerateBox, DimMismatch, EmptyMask,
                     InsufficientHistory, UnknownClass)

# Scene vocabulary.  The first eight classes are the movers; the rest is
# static furniture and surface.  Channel order is part of the raster
# format, so never reorder.
CLASSES = (
    "person", "rider", "car", "truck", "bus", "train", "motorcycle",
    "bicycle", "traffic light", "fire hydrant", "stop sign",
    "parking meter", "bench", "handbag", "road", "sidewalk", "sky",
    "building", "vegetation",
)
CLASS_ID = {name: i for i, name in enumerate(CLASSES)}
PED_CLASSES = frozenset({"person", "rider"})
VEHICLE_CLASSES = frozenset(
    {"car", "truck", "bus", "train", "motorcycle", "bicycle"})
DYNAMIC_CLASSES = PED_CLASSES | VEHICLE_CLASSES


@dataclass
class Instance:
    """One segmented object: class name, stable id, boolean pixel mask."""

    cls: str
    instance_id: int
    mask: np.ndarray


@dataclass
class FrameContext:
    """Everything one camera sees at one frame.

    rgb is (H, W, 3) in [0, 1]; depth is (H, W) in [0, 1] with larger
    meaning nearer; flow is (H, W, 2) pixel displacement since the
    previous frame.
    """

    rgb: np.ndarray
    depth: np.ndarray
    instances: list
    flow: np.ndarray


@dataclass
class PedestrianTrack:
    """Per-frame annotations for one pedestrian.

    Rows are contiguous frames starting at first_frame.  bbox is (T, 4)
    as [x1, y1, x2, y2] in stitched coordinates, pose is (T, 34) with
    (0, 0) marking an absent keypoint, camera_index is the camera whose
    kept band contains the box center.
    """

    ped_id: int
    first_frame: int
    bbox: np.ndarray
    pose: np.ndarray
    camera_index: np.ndarray
    visible: np.ndarray
    label: int
    crossing_frame: Optional[int] = None

    def __len__(self) -> int:
        return len(self.bbox)

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self.bbox) - 1

    def has_frame(self, frame: int) -> bool:
        return self.first_frame <= frame <= self.last_frame

    def row(self, frame: int) -> int:
        if not self.has_frame(frame):
            raise InsufficientHistory(
                f"track {self.ped_id} has frames "
                f"[{self.first_frame}, {self.last_frame}], not {frame}")
        return frame - self.first_frame


@dataclass
class Sample:
    """Model-ready observation window ending at one decision frame.

    Multi-camera rasters carry an extra camera axis after time; e_gm, e_md
    and p_cf exist only when the matching model feature is in use.
    """

    p_bb: Optional[np.ndarray] = None   # (m, 4) normalized boxes
    p_bp: Optional[np.ndarray] = None   # (m, 34) normalized keypoints
    v_s: Optional[np.ndarray] = None    # (m, 1) ego speed, km/h
    p_lc: Optional[np.ndarray] = None   # (m, S, S, 3) appearance crops
    p_lm: Optional[np.ndarray] = None   # (m, S, S, 2) flow crops
    e_sc: Optional[np.ndarray] = None   # (m, K, H', W') or (m, c, K, H', W')
    e_cd: Optional[np.ndarray] = None   # (m, 2, H', W') or (m, c, 2, H', W')
    e_gm: Optional[np.ndarray] = None   # (m, 2, H', W') scene flow raster
    e_md: Optional[np.ndarray] = None   # (m, 1, H', W') raw depth raster
    p_cf: Optional[np.ndarray] = None   # (m, F) precomputed content features
    sentinel: int = 0
    label: int = 0


def normalize_bbox(bbox, canvas_hw) -> np.ndarray:
    h, w = canvas_hw
    scale = np.array([w, h, w, h], dtype=np.float64)
    return np.asarray(bbox, dtype=np.float64) / scale


def denormalize_bbox(bbox, canvas_hw) -> np.ndarray:
    h, w = canvas_hw
    scale = np.array([w, h, w, h], dtype=np.float64)
    return np.asarray(bbox, dtype=np.float64) * scale


def assemble_kinematic_seq(track: PedestrianTrack, speeds, t: int, m: int,
                           stride: int, canvas_hw):
    """Sample m frames ending at t, spaced by stride, and normalize.

    Returns (P_bb, P_bp, V_s) with shapes (m, 4), (m, 34), (m, 1).  Box
    and keypoint coordinates are divided by the stitched canvas extents;
    speed stays in km/h.
    """
    if m < 1 or stride < 1:
        raise BadConfig(f"need m >= 1 and stride >= 1, got m={m} s={stride}")
    frames = [t - (m - 1 - i) * stride for i in range(m)]
    if frames[0] < 0 or not track.has_frame(frames[0]) \
            or not track.has_frame(t):
        raise InsufficientHistory(
            f"window [{frames[0]}, {t}] not covered by track "
            f"[{track.first_frame}, {track.last_frame}]")
    rows = [track.row(f) for f in frames]
    h, w = canvas_hw
    p_bb = normalize_bbox(track.bbox[rows], canvas_hw)
    p_bp = np.asarray(track.pose[rows], dtype=np.float64).copy()
    p_bp[:, 0::2] /= w
    p_bp[:, 1::2] /= h
    v_s = np.asarray(speeds, dtype=np.float64)[frames].reshape(m, 1)
    return p_bb, p_bp, v_s


def _warp(img: np.ndarray, bbox, side: int) -> np.ndarray:
    """Bilinear-warp the bbox region of img to side x side.

    Output pixel centers map to evenly spaced points inside the box.
    Points beyond the canvas rectangle come out zero; the sub-pixel
    fringe at the canvas border replicates the edge row/column.
    """
    x1, y1, x2, y2 = (float(v) for v in np.asarray(bbox).reshape(4))
    if not (x2 > x1 and y2 > y1):
        raise DegenerateBox(f"box ({x1}, {y1}, {x2}, {y2}) has no area")
    h, w = img.shape[:2]
    cy = y1 + (np.arange(side) + 0.5) * (y2 - y1) / side
    cx = x1 + (np.arange(side) + 0.5) * (x2 - x1) / side
    valid = ((cy >= 0) & (cy <= h))[:, None] & ((cx >= 0) & (cx <= w))
    py, px = cy - 0.5, cx - 0.5
    fy = np.floor(py).astype(np.int64)
    fx = np.floor(px).astype(np.int64)
    wy = (py - fy)[:, None, None]
    wx = (px - fx)[None, :, None]
    ya, yb = np.clip(fy, 0, h - 1), np.clip(fy + 1, 0, h - 1)
    xa, xb = np.clip(fx, 0, w - 1), np.clip(fx + 1, 0, w - 1)
    flat = img if img.ndim == 3 else img[..., None]

    def grid(yy, xx):
        return flat[yy[:, None], xx[None, :]]

    out = ((1 - wy) * (1 - wx) * grid(ya, xa)
           + (1 - wy) * wx * grid(ya, xb)
           + wy * (1 - wx) * grid(yb, xa)
           + wy * wx * grid(yb, xb))
    out = out * valid[..., None]
    if img.ndim == 2:
        out = out[..., 0]
    return np.ascontiguousarray(out, dtype=np.float32)


def crop_local_content(frame: np.ndarray, bbox, side: int) -> np.ndarray:
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DimMismatch(f"expected (H, W, 3) frame, got {frame.shape}")
    return _warp(frame, bbox, side)


def crop_local_motion(flow: np.ndarray, bbox, side: int) -> np.ndarray:
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise DimMismatch(f"expected (H, W, 2) flow, got {flow.shape}")
    return _warp(flow, bbox, side)


def _overlap_matrix(out_n: int, in_n: int) -> np.ndarray:
    """Row i holds the fraction of output cell i covered by each input cell."""
    r = in_n / out_n
    m = np.zeros((out_n, in_n))
    for i in range(out_n):
        lo, hi = i * r, (i + 1) * r
        for y in range(int(np.floor(lo)), min(int(np.ceil(hi)), in_n)):
            m[i, y] = (min(hi, y + 1) - max(lo, y)) / r
    return m


def area_downsample(img: np.ndarray, out_hw) -> np.ndarray:
    """Area-weighted resize over the trailing two axes.

    Exact block averaging when the ratio is integral; partial input cells
    contribute proportionally to their overlap otherwise.
    """
    h, w = img.shape[-2:]
    oh, ow = out_hw
    if h % oh == 0 and w % ow == 0:
        # integral ratio: overlap weights are a uniform block partition
        arr = np.asarray(img, dtype=np.float64)
        shp = img.shape[:-2] + (oh, h // oh, ow, w // ow)
        out = arr.reshape(shp).sum(axis=-1).sum(axis=-2)
        out /= (h // oh) * (w // ow)
        return np.ascontiguousarray(out, dtype=np.float32)
    ry = _overlap_matrix(oh, h)
    rx = _overlap_matrix(ow, w)
    out = np.matmul(ry, np.asarray(img, dtype=np.float64) @ rx.T)
    return np.ascontiguousarray(out, dtype=np.float32)


def class_index_raster(instances: Sequence[Instance], canvas_hw) -> np.ndarray:
    """Paint instance masks into a class-index map; -1 is background.

    List order is paint order, so a later instance wins overlapped pixels.
    """
    idx = np.full(canvas_hw, -1, dtype=np.int16)
    for inst in instances:
        if inst.cls not in CLASS_ID:
            raise UnknownClass(f"unknown class {inst.cls!r}")
        idx[inst.mask] = CLASS_ID[inst.cls]
    return idx


def one_hot_context(idx_raster: np.ndarray, out_hw) -> np.ndarray:
    """Expand a class-index raster to K soft-coverage channels at out_hw."""
    k = len(CLASSES)
    out = np.zeros((k,) + tuple(out_hw), dtype=np.float32)
    present = [int(c) for c in np.unique(idx_raster) if c >= 0]
    if present:
        # absent channels stay exactly zero through the linear resize, so
        # only occupied ones need expanding
        onehot = np.zeros((len(present),) + idx_raster.shape,
                          dtype=np.float64)
        for j, c in enumerate(present):
            onehot[j][idx_raster == c] = 1.0
        out[present] = area_downsample(onehot, out_hw)
    return out


def build_semantic_context(instances: Sequence[Instance], canvas_hw,
                           out_hw) -> np.ndarray:
    return one_hot_context(class_index_raster(instances, canvas_hw), out_hw)


def build_categorical_depth(depth: np.ndarray,
                            instances: Sequence[Instance]) -> np.ndarray:
    """Two-channel map of per-instance mean depths.

    Channel 0 carries pedestrians, channel 1 vehicles; every masked pixel
    of an instance gets that instance's mean depth, everything else stays
    zero.  Static classes are skipped.
    """
    out = np.zeros((2,) + depth.shape, dtype=np.float32)
    for inst in instances:
        if inst.cls not in CLASS_ID:
            raise UnknownClass(f"unknown class {inst.cls!r}")
        if inst.cls in PED_CLASSES:
            ch = 0
        elif inst.cls in VEHICLE_CLASSES:
            ch = 1
        else:
            continue
        if not inst.mask.any():
            raise EmptyMask(
                f"instance {inst.instance_id} ({inst.cls}) has no pixels")
        out[ch][inst.mask] = float(depth[inst.mask].mean())
    return out
