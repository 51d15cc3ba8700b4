"""Camera panorama layout, columnwise stitching, coordinate shifting, and the
sentinel-mask aggregation path used by the multi-camera model variant.

The panorama is built by excluding the overlap columns of the side cameras on
the edge facing the front camera; the front view is kept whole. Coordinates
move between a camera's local frame and panorama (global) frame by a pure
column offset, so the mapping is exactly invertible on kept columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadConfig, BadIndex, DimMismatch, OutOfKeptRange
from .tensor import Tape, Tensor


@dataclass(frozen=True)
class StitchLayout:
    cameras: int
    src_width: int
    src_height: int
    overlap: float
    crop_left: tuple      # columns dropped on the left of each camera
    kept_width: tuple     # columns surviving per camera
    offset: tuple         # global x of each camera's first kept column
    stitched_width: int

    def to_dict(self) -> dict:
        return {"cameras": self.cameras, "src_width": self.src_width,
                "src_height": self.src_height, "overlap": self.overlap,
                "crop_left": list(self.crop_left), "kept_width": list(self.kept_width),
                "offset": list(self.offset), "stitched_width": self.stitched_width}


def make_layout(cameras: int, width: int, height: int, overlap: float) -> StitchLayout:
    if cameras not in (1, 3):
        raise BadConfig(f"camera count must be 1 or 3, got {cameras}")
    if not 0.0 <= overlap < 0.5:
        raise BadConfig(f"overlap fraction {overlap} outside [0, 0.5)")
    if width <= 0 or height <= 0:
        raise BadConfig(f"non-positive camera extent {width}x{height}")
    if cameras == 1:
        return StitchLayout(1, width, height, overlap, (0,), (width,), (0,), width)
    ov = int(np.floor(overlap * width))
    crop_left = (0, 0, ov)                      # FL keeps its left part, FR loses its left edge
    kept = (width - ov, width, width - ov)      # front camera kept whole
    offset = (0, kept[0], kept[0] + kept[1])
    return StitchLayout(3, width, height, overlap, crop_left, kept, offset, sum(kept))


def stitch(maps, layout: StitchLayout) -> np.ndarray:
    """Copy each camera's kept columns into its global band; no blending.
    Maps are (H, W) or (H, W, C) with the camera axis along columns."""
    maps = [np.asarray(m) for m in maps]
    if len(maps) != layout.cameras:
        raise DimMismatch(f"expected {layout.cameras} maps, got {len(maps)}")
    ref = maps[0].shape
    for m in maps:
        if m.shape != ref:
            raise DimMismatch(f"camera map shapes differ: {ref} vs {m.shape}")
        if m.shape[0] != layout.src_height or m.shape[1] != layout.src_width:
            raise DimMismatch(f"map {m.shape[:2]} vs layout "
                              f"{(layout.src_height, layout.src_width)}")
    out_shape = (layout.src_height, layout.stitched_width) + ref[2:]
    out = np.zeros(out_shape, dtype=maps[0].dtype)
    for cam, m in enumerate(maps):
        left = layout.crop_left[cam]
        kept = layout.kept_width[cam]
        off = layout.offset[cam]
        out[:, off:off + kept] = m[:, left:left + kept]
    return out


def shift_coords(coords, camera: int, layout: StitchLayout,
                 direction: str = "local_to_global") -> np.ndarray:
    """Translate x between camera-local and panorama coordinates:
    global_x = local_x - crop_left + offset. y passes through. Accepts any
    (..., 2) array of (x, y) pairs; kept-range membership is enforced (the
    closed interval, so box edges on the crop boundary are legal)."""
    if not 0 <= camera < layout.cameras:
        raise BadIndex(f"camera {camera} outside 0..{layout.cameras - 1}")
    pts = np.asarray(coords, dtype=np.float64)
    if pts.shape[-1] != 2:
        raise DimMismatch(f"coords must end in (x, y) pairs, got shape {pts.shape}")
    left = layout.crop_left[camera]
    kept = layout.kept_width[camera]
    off = layout.offset[camera]
    x = pts[..., 0]
    if direction == "local_to_global":
        if np.any(x < left) or np.any(x > left + kept):
            raise OutOfKeptRange(f"local x outside kept columns [{left}, {left + kept}]")
        shifted = x - left + off
    elif direction == "global_to_local":
        if np.any(x < off) or np.any(x > off + kept):
            raise OutOfKeptRange(f"global x outside camera band [{off}, {off + kept}]")
        shifted = x - off + left
    else:
        raise BadConfig(f"unknown direction {direction!r}")
    out = pts.copy()
    out[..., 0] = shifted
    return out


def camera_of_global_x(x: float, layout: StitchLayout) -> int:
    """Which camera's kept band contains panorama column x. Bands partition
    the panorama; the right edge belongs to the last camera."""
    for cam in range(layout.cameras):
        off = layout.offset[cam]
        if off <= x < off + layout.kept_width[cam]:
            return cam
    if x == layout.stitched_width:
        return layout.cameras - 1
    raise OutOfKeptRange(f"x={x} outside panorama [0, {layout.stitched_width}]")


def padding_mask(cameras: int, sentinel: int, height: int, width: int) -> np.ndarray:
    """(cameras, H, W) indicator: the sentinel camera's channel is all ones."""
    if not 0 <= sentinel < cameras:
        raise BadIndex(f"sentinel {sentinel} outside 0..{cameras - 1}")
    mask = np.zeros((cameras, height, width), dtype=np.float32)
    mask[sentinel] = 1.0
    return mask


def aggregate(tape: Tape, stacked: Tensor, mask: Tensor, weights: Tensor) -> Tensor:
    """Fuse per-camera feature channels: concat the camera-stacked features
    with the sentinel-indicator channels, then mix per pixel down to the fused
    width. weights: (C_out, C_features + C_mask)."""
    combined = tape.concat([stacked, mask], axis=0)
    return tape.pointwise_conv(combined, weights)
